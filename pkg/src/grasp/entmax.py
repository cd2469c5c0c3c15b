"""alpha-entmax over a score vector.

``alpha == 1`` is softmax, ``alpha == 2`` is sparsemax (sort based), and
any other ``alpha > 1`` is solved by bisection on the threshold. Outputs
off the support are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, SolverError
from .numerics import Node, _make, as_node


@dataclass(frozen=True)
class EntmaxConfig:
    alpha: float = 1.5
    tol: float = 1e-12
    max_iter: int = 100

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if not self.tol > 0:
            raise ConfigError("bisection tolerance must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be a positive integer")


@dataclass(frozen=True)
class EntmaxOutput:
    probs: np.ndarray
    support: np.ndarray
    tau: float


def _check_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ContractError("entmax expects a non-empty 1-D score vector")
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite entmax score")
    return s


def softmax(scores) -> EntmaxOutput:
    s = _check_scores(scores)
    m = s.max()
    e = np.exp(s - m)
    z = e.sum()
    return EntmaxOutput(e / z, np.ones(s.size, dtype=bool), float(m + np.log(z)))


def sparsemax(scores) -> EntmaxOutput:
    """Euclidean projection onto the simplex via sorting."""
    s = _check_scores(scores)
    order = np.argsort(-s, kind="stable")
    zs = s[order]
    csum = np.cumsum(zs)
    ks = np.arange(1, s.size + 1)
    k = int(ks[1.0 + ks * zs > csum][-1])
    tau = (csum[k - 1] - 1.0) / k
    p = np.maximum(s - tau, 0.0)
    return EntmaxOutput(p, p > 0, float(tau))


def entmax_bisect(scores, alpha: float, tol: float = 1e-12, max_iter: int = 100) -> EntmaxOutput:
    """Threshold search for general ``alpha > 1``.

    Stops once the simplex residual is within ``tol`` or the bracket can
    no longer be split in float64, takes a few Newton steps on the threshold
    and renormalises.
    """
    s = _check_scores(scores)
    if not alpha > 1.0:
        raise ConfigError("bisection needs alpha > 1")
    am1 = alpha - 1.0
    z = am1 * s
    expo = 1.0 / am1

    def mass(t):
        return np.sum(np.maximum(z - t, 0.0) ** expo)

    lo, hi = z.max() - 1.0, z.max()
    tau = lo
    converged = False
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            converged = True
            break
        f = mass(mid) - 1.0
        tau = mid
        if abs(f) <= tol:
            converged = True
            break
        if f > 0:
            lo = mid
        else:
            hi = mid
    if not converged:
        raise SolverError(f"entmax bisection did not converge in {max_iter} iterations")
    # Newton polish on the current support so finite differences of the
    # output are not swamped by the bisection residual
    for _ in range(4):
        gap = np.maximum(z - tau, 0.0)
        slope = expo * np.sum(gap[gap > 0] ** (expo - 1.0))
        if not slope > 0:
            break
        nxt = tau + (np.sum(gap ** expo) - 1.0) / slope
        if not lo - 1e-12 <= nxt <= hi + 1e-12 or nxt == tau:
            break
        tau = nxt
    p = np.maximum(z - tau, 0.0) ** expo
    total = p.sum()
    if not total > 0:
        # bracket collapsed onto the top score
        p = (z == z.max()).astype(np.float64)
        total = p.sum()
    p = p / total
    return EntmaxOutput(p, p > 0, float(tau))


def entmax_forward(scores, cfg: EntmaxConfig) -> EntmaxOutput:
    if cfg.alpha == 1.0:
        return softmax(scores)
    if cfg.alpha == 2.0:
        return sparsemax(scores)
    return entmax_bisect(scores, cfg.alpha, cfg.tol, cfg.max_iter)


def entmax_jvp(output: EntmaxOutput, cfg: EntmaxConfig, upstream) -> np.ndarray:
    """Vector-Jacobian product of entmax at ``output`` (the Jacobian is symmetric)."""
    p = output.probs
    u = np.asarray(upstream, dtype=np.float64)
    if cfg.alpha == 1.0:
        d = p.copy()
    else:
        d = np.where(output.support, p ** (2.0 - cfg.alpha), 0.0)
    dsum = d.sum()
    if not dsum > 0:
        raise ContractError("entmax output has empty support")
    return d * u - (np.dot(d, u) / dsum) * d


def entmax(scores, cfg: EntmaxConfig) -> Node:
    """Autodiff op: entmax along the last axis of ``scores``."""
    x = as_node(scores)
    v = x.value
    flat = v.reshape(-1, v.shape[-1])
    outs = [entmax_forward(row, cfg) for row in flat]
    probs = np.stack([o.probs for o in outs]).reshape(v.shape)

    def backward(g):
        gflat = g.reshape(-1, v.shape[-1])
        return (np.stack([entmax_jvp(o, cfg, gr) for o, gr in zip(outs, gflat)]).reshape(v.shape),)

    node = _make(probs, f"entmax{cfg.alpha:g}", (x,), backward)
    return node
