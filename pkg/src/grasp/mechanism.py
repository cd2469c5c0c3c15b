"""Block pooling, question-guided sparse prompt fusion and injection.

Grid and block order is row-major throughout: token ``j`` sits at
``(j // W_t, j % W_t)`` and block ``i`` at ``(i // sqrt(N), i % sqrt(N))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .entmax import EntmaxConfig, entmax
from .errors import ConfigError, DimensionError, PartitionError
from .numerics import Node, RngState


@dataclass
class TokenGrid:
    height: int
    width: int
    tokens: object  # ndarray or Node, [..., M, d_v]

    def __post_init__(self):
        shape = self.tokens.shape
        if shape[-2] != self.height * self.width:
            raise DimensionError(f"{shape[-2]} tokens do not fill a {self.height}x{self.width} grid")

    @property
    def n_tokens(self) -> int:
        return self.height * self.width

    @property
    def d_v(self) -> int:
        return self.tokens.shape[-1]


@dataclass(frozen=True)
class BlockPartition:
    n_blocks: int
    grid_rows: int
    grid_cols: int
    height: int
    width: int
    index_sets: tuple

    def pooling_matrix(self) -> np.ndarray:
        """``[N, M]`` matrix whose product with the tokens gives block means."""
        P = np.zeros((self.n_blocks, self.height * self.width))
        for i, idx in enumerate(self.index_sets):
            P[i, idx] = 1.0 / len(idx)
        return P

    def block_of_token(self) -> np.ndarray:
        owner = np.empty(self.height * self.width, dtype=np.int64)
        for i, idx in enumerate(self.index_sets):
            owner[idx] = i
        return owner


def partition_grid(height: int, width: int, n_blocks: int) -> BlockPartition:
    side = math.isqrt(n_blocks)
    if n_blocks < 1 or side * side != n_blocks:
        raise PartitionError(f"block count {n_blocks} is not a perfect square")
    if height % side or width % side:
        raise PartitionError(f"sqrt(N)={side} does not divide the {height}x{width} grid")
    bh, bw = height // side, width // side
    sets = []
    for br in range(side):
        for bc in range(side):
            rows = np.arange(br * bh, (br + 1) * bh)
            cols = np.arange(bc * bw, (bc + 1) * bw)
            sets.append((rows[:, None] * width + cols[None, :]).reshape(-1))
    return BlockPartition(n_blocks, side, side, height, width, tuple(sets))


def positional_table(n_blocks: int, d_v: int, amplitude: float = 1.0, base: float = 1e4) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding: first half of the channels encode the
    block row, second half the block column."""
    side = math.isqrt(n_blocks)
    half = d_v // 2
    table = np.zeros((n_blocks, d_v))
    for i in range(n_blocks):
        r, c = divmod(i, side)
        for pos, off, width in ((r, 0, half), (c, half, d_v - half)):
            for ch in range(width):
                freq = base ** (-(2 * (ch // 2)) / max(width, 1))
                table[i, off + ch] = math.sin(pos * freq) if ch % 2 == 0 else math.cos(pos * freq)
    return amplitude * table


def pool_blocks(grid: TokenGrid, part: BlockPartition, pe) -> Node:
    """Block means plus positional encodings, ``[..., N, d_v]``."""
    pe = np.asarray(pe)
    if pe.shape != (part.n_blocks, grid.d_v):
        raise DimensionError(f"positional table {pe.shape} != ({part.n_blocks}, {grid.d_v})")
    if (grid.height, grid.width) != (part.height, part.width):
        raise DimensionError("partition was built for a different grid")
    means = nx.matmul(part.pooling_matrix(), grid.tokens)
    return nx.add(means, pe)


class PromptBank:
    """The trainable set: block prompts plus the key and query projections."""

    names = ("prompts", "proj_k", "proj_q")

    def __init__(self, prompts, proj_k, proj_q, sigma=0.02):
        prompts, proj_k, proj_q = (np.array(a, dtype=np.float64) for a in (prompts, proj_k, proj_q))
        if prompts.ndim != 2 or proj_k.ndim != 2 or proj_q.ndim != 2:
            raise DimensionError("prompt bank arrays must be 2-D")
        if proj_k.shape[0] != proj_q.shape[0]:
            raise DimensionError("key and query projections disagree on h")
        if prompts.shape[1] != proj_k.shape[1]:
            raise DimensionError("prompt width must equal d_v")
        self.sigma = sigma
        self.prompts = nx.leaf(prompts, requires_grad=True, name="prompts")
        self.proj_k = nx.leaf(proj_k, requires_grad=True, name="proj_k")
        self.proj_q = nx.leaf(proj_q, requires_grad=True, name="proj_q")

    @classmethod
    def initialize(cls, n_blocks, d_v, d_t, h, seed, sigma=0.02, proj_gain=1.0, query_map=None):
        """Gaussian prompts; projections ``N(0, gain^2 / fan_in)``.

        With ``query_map`` (``[d_t, d_v]``, the frozen question-to-visual
        map) the query projection starts as ``proj_k @ query_map.T``, so the
        initial score is a similarity measured in the visual space.
        """
        if min(n_blocks, d_v, d_t, h) < 1:
            raise ConfigError("prompt bank dimensions must be positive")
        prompts = nx.gaussian_init(RngState(seed, nx.STREAM_PROMPTS), (n_blocks, d_v), sigma)
        proj = RngState(seed, nx.STREAM_PROJECTIONS)
        proj_k = nx.gaussian_init(proj.substream(0), (h, d_v), proj_gain / math.sqrt(d_v))
        if query_map is None:
            proj_q = nx.gaussian_init(proj.substream(1), (h, d_t), proj_gain / math.sqrt(d_t))
        else:
            query_map = np.asarray(query_map, dtype=np.float64)
            if query_map.shape != (d_t, d_v):
                raise DimensionError(f"query map {query_map.shape} != ({d_t}, {d_v})")
            proj_q = proj_k @ query_map.T
        return cls(prompts, proj_k, proj_q, sigma)

    @property
    def n_blocks(self):
        return self.prompts.value.shape[0]

    @property
    def d_p(self):
        return self.prompts.value.shape[1]

    @property
    def d_v(self):
        return self.proj_k.value.shape[1]

    @property
    def d_t(self):
        return self.proj_q.value.shape[1]

    @property
    def h(self):
        return self.proj_k.value.shape[0]

    def params(self) -> dict:
        return {"prompts": self.prompts, "proj_k": self.proj_k, "proj_q": self.proj_q}

    def arrays(self) -> dict:
        return {k: v.value for k, v in self.params().items()}

    def snapshot(self) -> dict:
        return {k: v.value.copy() for k, v in self.params().items()}

    def load(self, arrays: dict):
        for k, node in self.params().items():
            if arrays[k].shape != node.value.shape:
                raise DimensionError(f"{k}: shape {arrays[k].shape} != {node.value.shape}")
            node.value = np.array(arrays[k], dtype=np.float64)


@dataclass
class FlopCounter:
    """Multiply-adds spent by :func:`fuse`, per stage."""

    counts: dict = field(default_factory=dict)

    def add(self, stage, n):
        self.counts[stage] = self.counts.get(stage, 0) + int(n)

    @property
    def total(self):
        return sum(self.counts.values())


@dataclass
class FusionResult:
    block_features: Node
    scores: Node
    weights: Node
    p_global: Node
    extended_length: int = 0


def fuse(E, q, bank: PromptBank, cfg: EntmaxConfig, uniform=False, counter=None) -> FusionResult:
    """Score blocks against the question and mix prompts under entmax weights.

    ``E`` is ``[..., N, d_v]`` and ``q`` is ``[..., d_t]`` with matching
    leading axes. With ``uniform=True`` the weights are fixed at ``1/N`` and
    the projections are cut off from the weight path.
    """
    E, q = nx.as_node(E), nx.as_node(q)
    n, d_v = E.shape[-2:]
    if n != bank.n_blocks or d_v != bank.d_v:
        raise DimensionError(f"block features {E.shape} do not match the prompt bank")
    if q.shape[-1] != bank.d_t:
        raise DimensionError(f"question vector width {q.shape[-1]} != d_t={bank.d_t}")
    lead = E.shape[:-2]
    if q.shape[:-1] != lead:
        raise DimensionError("block features and question disagree on batch shape")
    h = bank.h
    batch = int(np.prod(lead)) if lead else 1

    k = nx.matmul(E, nx.transpose(bank.proj_k))              # [..., N, h]
    q_t = nx.matmul(q, nx.transpose(bank.proj_q))            # [..., h]
    raw = nx.matmul(k, nx.reshape(q_t, lead + (h, 1)))       # [..., N, 1]
    scores = nx.scale(nx.reshape(raw, lead + (n,)), 1.0 / math.sqrt(h))
    if uniform:
        weights = nx.leaf(np.full(lead + (n,), 1.0 / n))
    else:
        weights = entmax(scores, cfg)
    p_global = nx.matmul(weights, bank.prompts)              # [..., d_p]

    if counter is not None:
        counter.add("query_projection", batch * h * bank.d_t)
        counter.add("block_projection", batch * n * h * d_v)
        counter.add("scores", batch * n * h)
        counter.add("scaling", batch * n)
        counter.add("entmax", batch * n)
        counter.add("aggregation", batch * n * bank.d_p)
    return FusionResult(E, scores, weights, p_global)


def inject(grid: TokenGrid, p_global) -> Node:
    """Prepend the global prompt as one extra token: ``[..., M + 1, d_v]``."""
    p_global = nx.as_node(p_global)
    if p_global.shape[-1] != grid.d_v:
        raise DimensionError(f"prompt width {p_global.shape[-1]} != d_v={grid.d_v}")
    lead = grid.tokens.shape[:-2]
    if p_global.shape[:-1] != lead:
        raise DimensionError("prompt and grid disagree on batch shape")
    row = nx.reshape(p_global, lead + (1, grid.d_v))
    return nx.concat_rows([row, grid.tokens], axis=-2)


def count_params(bank: PromptBank) -> int:
    return bank.n_blocks * bank.d_p + bank.h * bank.d_v + bank.h * bank.d_t


def fusion_cost(n_blocks: int, d_v: int, d_p: int, h: int, d_t: int) -> int:
    """Multiply-adds of one unbatched :func:`fuse` call."""
    return h * d_t + n_blocks * (h * d_v + h + 2 + d_p)
