"""Frozen toy multimodal backbone.

A linear patch embedding stands in for the vision encoder, embed-then-mean
for the question encoder, and one post-norm transformer block with an
answer head for the language decoder. Every array is drawn once from a
seeded stream and never receives gradients.

Scale convention: visual tokens and mapped question tokens are produced at
scale ``token_scale`` while the attention query/key maps carry the inverse
factor. Attention logits and the layer norms are unchanged by this, so the
decoder computes the same function of the image and question for any
``token_scale``; what changes is how large an injected prompt has to be
relative to the tokens before the decoder reacts to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, VocabularyError
from .mechanism import TokenGrid
from .numerics import RngState


@dataclass(frozen=True)
class BackboneConfig:
    d_raw: int = 8
    d_v: int = 64
    d_t: int = 32
    n_question_words: int = 26
    n_answers: int = 73
    max_len: int = 128
    token_scale: float = 0.1
    ffn_scale: float = 3.0
    head_scale: float = 1.0
    position_scale: float = 0.0
    # reference input shape used to calibrate the answer head; 0 disables
    ref_tokens: int = 0
    ref_question_len: int = 0
    seed: int = 0


@dataclass
class FrozenVisionEncoder:
    patch_embed: np.ndarray        # [d_raw, d_v]


@dataclass
class FrozenQuestionEncoder:
    embeddings: np.ndarray         # [V_q, d_t]


@dataclass
class FrozenDecoder:
    interface: np.ndarray          # [d_t, d_v] question-to-visual map
    positions: np.ndarray          # [max_len, d_v]
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray                 # [d_v, 4 d_v]
    w2: np.ndarray                 # [4 d_v, d_v]
    head: np.ndarray               # [d_v, V_a]

    @property
    def d_v(self):
        return self.wq.shape[0]


@dataclass
class FrozenBackbone:
    vision: FrozenVisionEncoder
    question: FrozenQuestionEncoder
    decoder: FrozenDecoder
    cfg: BackboneConfig

    def arrays(self) -> dict:
        d = self.decoder
        return {
            "vision.patch_embed": self.vision.patch_embed,
            "question.embeddings": self.question.embeddings,
            **{f"decoder.{k}": getattr(d, k) for k in
               ("interface", "positions", "wq", "wk", "wv", "wo", "w1", "w2", "head")},
        }


def build_backbone(cfg: BackboneConfig, aligned=None) -> FrozenBackbone:
    """Draw all frozen arrays from the backbone stream.

    ``aligned`` optionally maps question-word ids to raw feature vectors
    (``{id: vector[d_raw]}``). Those words get the embedding whose image
    under the interface map is the closest match to the vector's visual
    embedding, rescaled to the typical word-embedding norm; every other
    word has the visual component of its image removed before being mapped
    back, which leaves it nearly orthogonal to the visual embeddings. This mimics a pretrained vision-language model in which a
    class name and the look of that class live close together in the
    shared space while function words carry no visual content.
    """
    base = RngState(cfg.seed, nx.STREAM_BACKBONE)
    draw = iter(range(100))

    def normal(shape, std):
        return base.substream(next(draw)).generator().normal(0.0, std, size=shape)

    s, dv, dt = cfg.token_scale, cfg.d_v, cfg.d_t
    patch = normal((cfg.d_raw, dv), s)
    emb = normal((cfg.n_question_words, dt), 1.0)
    interface = normal((dt, dv), s / math.sqrt(dt))
    positions = normal((cfg.max_len, dv), 1.0) * cfg.position_scale
    wq = normal((dv, dv), 1.0 / math.sqrt(dv)) / s
    wk = normal((dv, dv), 1.0 / math.sqrt(dv)) / s
    wv = normal((dv, dv), 1.0 / math.sqrt(dv))
    wo = normal((dv, dv), 1.0 / math.sqrt(dv))
    w1 = normal((dv, 4 * dv), 1.0 / math.sqrt(dv))
    w2 = normal((4 * dv, dv), cfg.ffn_scale / math.sqrt(4 * dv))
    head = normal((dv, cfg.n_answers), cfg.head_scale / math.sqrt(dv))

    if aligned:
        inv = np.linalg.pinv(interface)
        ids = sorted(aligned)
        others = [i for i in range(cfg.n_question_words) if i not in aligned]
        target = float(np.linalg.norm(emb[others], axis=1).mean()) if others else 1.0
        vis = np.stack([np.asarray(aligned[i], dtype=np.float64) for i in ids]) @ patch
        sol = vis @ inv
        emb[ids] = sol * (target / np.linalg.norm(sol, axis=1, keepdims=True))
        if others:
            # words without a visual referent: drop the visual part of their image
            basis = np.linalg.svd(patch.T, full_matrices=False)[0]            # [d_v, d_raw]
            img = emb[others] @ interface
            emb[others] = (img - (img @ basis) @ basis.T) @ inv

    dec = FrozenDecoder(interface, positions, wq, wk, wv, wo, w1, w2, head)
    bb = FrozenBackbone(FrozenVisionEncoder(patch), FrozenQuestionEncoder(emb), dec, cfg)
    if cfg.ref_tokens and cfg.ref_question_len:
        calibrate_head(bb, cfg.ref_tokens, cfg.ref_question_len, base.substream(next(draw)))
    return bb


def calibrate_head(bb: FrozenBackbone, n_tokens: int, q_len: int, rng: RngState, n_ref: int = 64):
    """Remove the answer head's response to the average decoder state.

    The state is averaged over reference inputs drawn from the backbone's
    own stream (unit-norm raw cells, random question words, a zero prompt
    row), so no answer is favoured before any prompt is learned, the way a
    pretrained model would not be biased toward a single answer.
    """
    gen = rng.generator()
    raw = gen.normal(size=(n_ref, n_tokens, bb.cfg.d_raw))
    raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
    tokens = raw @ bb.vision.patch_embed
    ids = gen.integers(bb.question.embeddings.shape[0], size=(n_ref, q_len))
    qt = bb.question.embeddings[ids] @ bb.decoder.interface
    ext = np.concatenate([np.zeros((n_ref, 1, tokens.shape[-1])), tokens], axis=1)
    head = bb.decoder.head
    bb.decoder.head = np.eye(head.shape[0])
    try:
        mu = decode(ext, qt, bb.decoder).value.mean(axis=0)
    finally:
        bb.decoder.head = head
    bb.decoder.head = head - np.outer(mu, mu @ head) / (mu @ mu)


def encode_image(raw, enc: FrozenVisionEncoder, height=None, width=None) -> TokenGrid:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != enc.patch_embed.shape[0]:
        raise DimensionError(f"raw width {raw.shape[-1]} != d_raw={enc.patch_embed.shape[0]}")
    m = raw.shape[-2]
    if height is None:
        height = width = math.isqrt(m)
    return TokenGrid(height, width, raw @ enc.patch_embed)


def _check_ids(ids, vocab_size):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise ContractError("empty question")
    if np.any(ids < 0) or np.any(ids >= vocab_size):
        raise VocabularyError(f"question token id outside vocabulary of size {vocab_size}")
    return ids


def question_embeddings(ids, enc: FrozenQuestionEncoder) -> np.ndarray:
    ids = _check_ids(ids, enc.embeddings.shape[0])
    return enc.embeddings[ids]


def encode_question(ids, enc: FrozenQuestionEncoder) -> np.ndarray:
    """Mean of the token embeddings, ``[d_t]`` (or ``[B, d_t]`` for a batch)."""
    return question_embeddings(ids, enc).mean(axis=-2)


def project_question(ids, enc: FrozenQuestionEncoder, dec: FrozenDecoder) -> np.ndarray:
    """Question tokens mapped into the decoder width, ``[..., L_q, d_v]``."""
    return question_embeddings(ids, enc) @ dec.interface


def decode(extended, q_tokens, dec: FrozenDecoder) -> nx.Node:
    """Answer logits for ``X_in = [extended, q_tokens]``.

    Post-norm block: ``x = LN(X + Attn(X))``, ``y = LN(x + FFN(x))``; the
    logits are the answer head applied to the mean of ``y`` over positions.
    """
    extended = nx.as_node(extended)
    q_tokens = np.asarray(q_tokens, dtype=np.float64)
    dv = dec.d_v
    if extended.shape[-1] != dv or q_tokens.shape[-1] != dv:
        raise DimensionError(f"decoder width is {dv}")
    if extended.shape[:-2] != q_tokens.shape[:-2]:
        raise DimensionError("extended sequence and question disagree on batch shape")
    x = nx.concat_rows([extended, q_tokens], axis=-2)
    length = x.shape[-2]
    if length > dec.positions.shape[0]:
        raise DimensionError(f"sequence length {length} exceeds decoder capacity {dec.positions.shape[0]}")
    x = nx.add(x, dec.positions[:length])
    q = nx.matmul(x, dec.wq)
    k = nx.matmul(x, dec.wk)
    v = nx.matmul(x, dec.wv)
    att = nx.softmax_row(nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dv)))
    x = nx.layer_norm(nx.add(x, nx.matmul(nx.matmul(att, v), dec.wo)))
    ff = nx.matmul(nx.gelu(nx.matmul(x, dec.w1)), dec.w2)
    y = nx.layer_norm(nx.add(x, ff))
    pooled = nx.mean(y, axis=-2)
    return nx.matmul(pooled, dec.head)
