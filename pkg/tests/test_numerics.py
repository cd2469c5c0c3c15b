import zlib

import numpy as np
import pytest

from grasp import numerics as nx
from grasp.errors import ConfigError, DimensionError, NumericError, VocabularyError


def fd_check(build, shapes, rng, tol=1e-6, step=1e-6):
    """Compare backward against central differences for ``sum(w * build(*xs))``.

    The 1e-4 floor keeps near-zero components from turning the difference
    quotient's roundoff (about 1e-10 here) into a large ratio.
    """
    xs = [rng.normal(size=s) for s in shapes]
    nodes = [nx.leaf(x, requires_grad=True) for x in xs]
    out = build(*nodes)
    w = rng.normal(size=out.shape)
    loss = nx.sum(nx.elementwise_mul(out, w))
    grads = nx.backward(loss)
    for node in nodes:
        num = nx.numeric_gradient(
            lambda: float(np.sum(build(*[nx.leaf(n.value) for n in nodes]).value * w)), node.value, step)
        assert nx.relative_error(grads[node], num, floor=1e-4) <= tol


def test_matmul_fixtures():
    out = nx.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [4.0]])
    assert nx.matmul(np.array([[2.0]]), np.array([[5.0]])).value[0, 0] == 10.0


def test_matmul_gradient_is_column_sums():
    rng = np.random.default_rng(0)
    a = nx.leaf(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 2))
    g = nx.backward(nx.sum(nx.matmul(a, b)))[a]
    np.testing.assert_allclose(g, np.tile(b.sum(axis=1), (3, 1)), atol=1e-15)
    num = nx.numeric_gradient(lambda: float(np.sum(a.value @ b)), a.value, 1e-6)
    assert nx.relative_error(g, num) <= 1e-7


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_mean_pool():
    x = np.array([[2.0, 2.0], [4.0, 4.0]])
    np.testing.assert_array_equal(nx.mean_pool(x, [0, 1]).value, [3.0, 3.0])
    np.testing.assert_array_equal(nx.mean_pool(x, [1]).value, [4.0, 4.0])
    rng = np.random.default_rng(1)
    y = rng.normal(size=(6, 3))
    loop = sum(y[i] for i in (1, 3, 5)) / 3
    np.testing.assert_allclose(nx.mean_pool(y, [1, 3, 5]).value, loop, atol=1e-15, rtol=0)


def test_softmax_and_cross_entropy_fixtures():
    np.testing.assert_allclose(nx.softmax_row(np.zeros(3)).value, np.full(3, 1 / 3))
    assert nx.cross_entropy(np.array([10.0, 0.0, 0.0]), 0).value <= 1e-4
    assert nx.cross_entropy(np.zeros(7), 3).value == pytest.approx(np.log(7))


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(VocabularyError):
        nx.cross_entropy(np.zeros(3), 3)


def test_non_finite_forward_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        nx.scale(np.array([1e308]), 1e10)


OPS = {
    "matmul": (lambda a, b: nx.matmul(a, b), lambda r: [(r, 3), (3, 2)]),
    "batched_matmul": (lambda a, b: nx.matmul(a, b), lambda r: [(2, r, 3), (3, 4)]),
    "transpose": (lambda a: nx.transpose(a), lambda r: [(r, 3)]),
    "reshape": (lambda a: nx.reshape(a, (-1,)), lambda r: [(r, 2)]),
    "add_broadcast": (lambda a, b: nx.add(a, b), lambda r: [(r, 3), (3,)]),
    "scale": (lambda a: nx.scale(a, -1.7), lambda r: [(r,)]),
    "mul": (lambda a, b: nx.elementwise_mul(a, b), lambda r: [(r, 2), (r, 2)]),
    "gelu": (lambda a: nx.gelu(a), lambda r: [(r, 3)]),
    "sum_axis": (lambda a: nx.sum(a, axis=0), lambda r: [(r, 3)]),
    "mean_axis": (lambda a: nx.mean(a, axis=-2), lambda r: [(2, r, 3)]),
    "mean_pool": (lambda a: nx.mean_pool(a, [0, 2]), lambda r: [(r + 2, 3)]),
    "concat_rows": (lambda a, b: nx.concat_rows([a, b]), lambda r: [(r, 3), (2, 3)]),
    "select_row": (lambda a: nx.select_row(a, 1), lambda r: [(r + 1, 3)]),
    "layer_norm": (lambda a: nx.layer_norm(a), lambda r: [(r, 5)]),
    "softmax_row": (lambda a: nx.softmax_row(a), lambda r: [(r, 4)]),
    "cross_entropy": (lambda a: nx.cross_entropy(a, np.zeros(a.shape[:-1], dtype=int)), lambda r: [(r, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_backward_matches_finite_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for trial in range(20):
        fd_check(build, shapes(1 + trial % 4), rng)


def test_backward_linear_and_frozen_cases():
    p = nx.leaf(np.arange(4.0), requires_grad=True)
    np.testing.assert_array_equal(nx.backward(nx.sum(p))[p], np.ones(4))
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 4))
    x = nx.leaf(rng.normal(size=4), requires_grad=True)
    u = rng.normal(size=3)
    g = nx.backward(nx.sum(nx.elementwise_mul(nx.matmul(W, x), u)))[x]
    num = nx.numeric_gradient(lambda: float(u @ (W @ x.value)), x.value)
    np.testing.assert_allclose(g, W.T @ u, atol=1e-14)
    assert nx.relative_error(g, num) <= 1e-7
    frozen = nx.sum(nx.matmul(W, np.ones(4)))
    assert nx.backward(frozen) == {}


def test_shared_subexpression_accumulates():
    x = nx.leaf(np.array([1.5, -2.0]), requires_grad=True)
    y = nx.elementwise_mul(x, x)
    g = nx.backward(nx.sum(nx.add(y, x)))[x]
    np.testing.assert_allclose(g, 2 * x.value + 1)


def test_gaussian_init_statistics():
    draws = nx.gaussian_init(nx.RngState(7, nx.STREAM_PROMPTS), (100_000,), 0.02)
    assert abs(draws.mean()) <= 3 * 0.02 / np.sqrt(draws.size)
    assert abs(draws.std() - 0.02) <= 0.02 * 0.02


def test_rng_determinism_and_streams():
    a = nx.gaussian_init(nx.RngState(3, 1), (5, 5), 1.0)
    b = nx.gaussian_init(nx.RngState(3, 1), (5, 5), 1.0)
    c = nx.gaussian_init(nx.RngState(3, 2), (5, 5), 1.0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ConfigError):
        nx.gaussian_init(nx.RngState(0), (2,), 0.0)
