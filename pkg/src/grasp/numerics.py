"""Dense float64 tensors with a small define-by-run reverse-mode autodiff.

Every op takes and returns :class:`Node` objects wrapping a numpy array.
Leaves created with ``requires_grad=True`` are the trainable parameters;
everything else is frozen. A node requires grad iff one of its parents
does, so frozen sub-graphs are never visited by :func:`backward`.

Ops work on the trailing one or two axes and accept arbitrary leading
(batch) axes; the 2-D signatures in the docstrings are the base case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    ConfigError,
    DegenerateBlockError,
    DimensionError,
    NumericError,
    VocabularyError,
)

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Node:
    __slots__ = ("value", "op", "parents", "requires_grad", "grad", "name", "_backward")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False, backward=None, name=None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or self.op
        return f"Node({tag}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad=False, name=None) -> Node:
    arr = np.array(value, dtype=DTYPE)
    _check_finite(arr, "leaf")
    return Node(arr, "leaf", (), requires_grad, None, name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


def _make(value, op, parents, backward) -> Node:
    _check_finite(value, op)
    rg = any(p.requires_grad for p in parents)
    return Node(value, op, parents if rg else (), rg, backward if rg else None)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    """Matrix product ``a @ b`` for ``a[..., m, k]`` and ``b[..., k, n]``.

    1-D operands follow numpy's promotion rules.
    """
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    ka = av.shape[-1]
    kb = bv.shape[0] if bv.ndim == 1 else bv.shape[-2]
    if ka != kb:
        raise DimensionError(f"matmul inner extents differ: {av.shape} @ {bv.shape}")
    try:
        out = av @ bv
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        da = db = None
        if a.requires_grad:
            da = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape)
        if b.requires_grad:
            db = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bv.shape)
        return da, db

    return _make(out, "matmul", (a, b), backward)


def transpose(x) -> Node:
    x = as_node(x)
    if x.value.ndim < 2:
        raise DimensionError("transpose needs at least two axes")
    return _make(np.swapaxes(x.value, -1, -2), "transpose", (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.value.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    sa, sb = a.value.shape, b.value.shape
    return _make(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                            _unbroadcast(g, sb) if b.requires_grad else None))


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value * c, "scale", (x,), lambda g: (g * c,))


def elementwise_mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    try:
        out = av * bv
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def gelu(x) -> Node:
    """GELU, tanh approximation."""
    x = as_node(x)
    v = x.value
    t = np.tanh(_GELU_K * (v + _GELU_C * v * v * v))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _make(out, "gelu", (x,), backward)


# --------------------------------------------------------------------------
# reductions and row ops


def sum(x, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    x = as_node(x)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (x,), backward)


def mean(x, axis=None) -> Node:
    x = as_node(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def mean_pool(x, index_set: Sequence[int]) -> Node:
    """Mean of the rows ``index_set`` of ``x[..., n, d]`` -> ``[..., d]``."""
    x = as_node(x)
    idx = np.asarray(list(index_set), dtype=np.int64)
    if idx.size == 0:
        raise DegenerateBlockError("mean_pool over an empty index set")
    n = x.value.shape[-2]
    if idx.min() < 0 or idx.max() >= n:
        raise DimensionError(f"row index out of range for {n} rows")
    shape = x.value.shape
    out = x.value[..., idx, :].mean(axis=-2)

    def backward(g):
        dx = np.zeros(shape)
        share = np.expand_dims(g / idx.size, -2)
        np.add.at(dx, (..., idx, slice(None)), np.broadcast_to(share, g.shape[:-1] + (idx.size, g.shape[-1])))
        return (dx,)

    return _make(out, "mean_pool", (x,), backward)


def concat_rows(parts: Iterable, axis: int = -2) -> Node:
    parts = [as_node(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    sizes = [p.value.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, cuts, axis=axis)
        return tuple(pc if p.requires_grad else None for pc, p in zip(pieces, parts))

    return _make(out, "concat_rows", parts, backward)


def select_row(x, i: int) -> Node:
    x = as_node(x)
    n = x.value.shape[-2]
    if not -n <= i < n:
        raise DimensionError(f"row {i} out of range for {n} rows")
    shape = x.value.shape

    def backward(g):
        dx = np.zeros(shape)
        dx[..., i, :] = g
        return (dx,)

    return _make(x.value[..., i, :].copy(), "select_row", (x,), backward)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Node:
    """Normalise over the last axis (no affine parameters)."""
    x = as_node(x)
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, "layer_norm", (x,), backward)


def _softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_row(x) -> Node:
    x = as_node(x)
    y = _softmax(x.value)
    return _make(y, "softmax_row", (x,),
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits, target) -> Node:
    """Per-row ``-log softmax(logits)[target]``.

    ``logits[V]`` with an int target gives a scalar; ``logits[..., V]``
    with an int array of the leading shape gives one loss per row.
    """
    logits = as_node(logits)
    v = logits.value
    vocab = v.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != v.shape[:-1]:
        raise DimensionError(f"target shape {tgt.shape} does not match logits {v.shape}")
    if np.any(tgt < 0) or np.any(tgt >= vocab):
        raise VocabularyError(f"target id outside vocabulary of size {vocab}")
    m = v.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(v - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(v, tgt[..., None], axis=-1)[..., 0]
    out = lse - picked

    def backward(g):
        p = _softmax(v)
        np.put_along_axis(p, tgt[..., None], np.take_along_axis(p, tgt[..., None], -1) - 1.0, -1)
        return (p * np.expand_dims(g, -1),)

    return _make(np.asarray(out, dtype=DTYPE), "cross_entropy", (logits,), backward)


# --------------------------------------------------------------------------
# backward


def backward(loss: Node) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Returns ``{leaf: grad}`` for every trainable leaf reachable from
    ``loss``; each such leaf also gets ``leaf.grad`` set.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return {}

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.value)}
    out = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g
            out[node] = g
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return out


# --------------------------------------------------------------------------
# finite differences


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fn()
        flat[i] = old - step
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 0.0) -> float:
    """Max over components of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    diff = np.abs(a - n)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(diff == 0.0, 0.0, diff / denom)
    return float(rel.max()) if rel.size else 0.0


def norm_relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the whole array.

    Preferred for end-to-end checks: an entry far below the array's scale
    cannot be resolved by a difference quotient whose roundoff is set by
    the loss value, so per-entry ratios there measure noise, not bugs.
    """
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - n) / denom)


# --------------------------------------------------------------------------
# seeded randomness

STREAM_PROMPTS = 1
STREAM_PROJECTIONS = 2
STREAM_DATA = 3
STREAM_SHUFFLE = 4
STREAM_BACKBONE = 5
STREAM_PROTOTYPES = 6
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    """Philox counter-based stream identified by ``(seed, stream)``."""

    seed: int
    stream: int = 0
    algorithm: str = "philox4x64-10"

    def generator(self) -> np.random.Generator:
        key = (int(self.seed) & _MASK64) | ((int(self.stream) & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "RngState":
        return RngState(self.seed, (int(self.stream) << 32) + int(index) + 1, self.algorithm)


def gaussian_init(rng: RngState, shape, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return rng.generator().normal(0.0, sigma, size=shape)
