"""A frozen backbone with a prompt bank in front of its decoder."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig, build_backbone, decode, encode_image, encode_question, project_question
from .entmax import EntmaxConfig
from .mechanism import PromptBank, TokenGrid, fuse, inject, partition_grid, pool_blocks, positional_table
from .synthdata import TEMPLATES
from .training import TrainConfig
from .vocab import answer_vocab, class_names, question_vocab

MAX_COUNT = 64
MAX_QUESTION = 16


def typical_question_length(categories) -> int:
    lengths = [len(TEMPLATES[c].format(c="x").split()) for c in categories]
    return int(round(sum(lengths) / len(lengths)))


class GraspModel:
    """Everything frozen is computed once per example and cached; a forward
    pass only redoes the fusion and the decoder."""

    def __init__(self, cfg: TrainConfig, prototypes):
        self.cfg = cfg
        self.question_vocab = question_vocab(cfg.n_classes)
        self.answer_vocab = answer_vocab(cfg.n_classes, cfg.category_list, MAX_COUNT)
        names = class_names(cfg.n_classes)
        aligned = {self.question_vocab.id(n): np.asarray(prototypes[c]) for c, n in enumerate(names)}
        bcfg = BackboneConfig(
            d_raw=cfg.d_raw, d_v=cfg.d_v, d_t=cfg.d_t,
            n_question_words=len(self.question_vocab), n_answers=len(self.answer_vocab),
            max_len=cfg.height * cfg.width + 1 + MAX_QUESTION, token_scale=cfg.token_scale,
            ffn_scale=cfg.ffn_scale, head_scale=cfg.head_scale, position_scale=cfg.position_scale,
            ref_tokens=(cfg.height * cfg.width) if cfg.calibrate_head else 0,
            ref_question_len=typical_question_length(cfg.category_list) if cfg.calibrate_head else 0,
            seed=cfg.seed)
        self.backbone = build_backbone(bcfg, aligned)
        self.partition = partition_grid(cfg.height, cfg.width, cfg.n_blocks)
        self.pe = positional_table(cfg.n_blocks, cfg.d_v, amplitude=cfg.pe_scale)
        self.entmax_cfg = EntmaxConfig(alpha=cfg.alpha)
        # scores scale with token_scale squared times the gain squared, so the
        # gain is stated relative to the token scale
        self.bank = PromptBank.initialize(cfg.n_blocks, cfg.d_v, cfg.d_t, cfg.h, cfg.seed, cfg.sigma,
                                          cfg.proj_gain / cfg.token_scale,
                                          query_map=self.backbone.decoder.interface)
        self._cache = {}

    def frozen_arrays(self) -> dict:
        return {**self.backbone.arrays(), "positional_table": self.pe,
                "pooling": self.partition.pooling_matrix()}

    def _encode(self, rec):
        key = id(rec)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is rec:
            return hit[1]
        bb = self.backbone
        grid = encode_image(rec.raw, bb.vision, self.cfg.height, self.cfg.width)
        E = pool_blocks(grid, self.partition, self.pe).value
        q = encode_question(rec.question, bb.question)
        qt = project_question(rec.question, bb.question, bb.decoder)
        enc = (grid.tokens, E, q, qt)
        self._cache[key] = (rec, enc)
        return enc

    @staticmethod
    def group_by_length(records):
        groups = {}
        for r in records:
            groups.setdefault(len(r.question), []).append(r)
        return [groups[k] for k in sorted(groups)]

    def forward(self, batch, uniform=None):
        """``(logits [B, V_a], FusionResult)`` for examples sharing a question length."""
        if uniform is None:
            uniform = self.cfg.uniform
        encs = [self._encode(r) for r in batch]
        tokens = np.stack([e[0] for e in encs])
        E = np.stack([e[1] for e in encs])
        q = np.stack([e[2] for e in encs])
        qt = np.stack([e[3] for e in encs])
        fusion = fuse(E, q, self.bank, self.entmax_cfg, uniform=uniform)
        grid = TokenGrid(self.cfg.height, self.cfg.width, tokens)
        extended = inject(grid, fusion.p_global)
        fusion.extended_length = extended.shape[-2]
        return decode(extended, qt, self.backbone.decoder), fusion

    def predict_words(self, records, uniform=None):
        from .training import evaluate
        ev = evaluate(self, records, uniform=uniform)
        return [self.answer_vocab.word(p) for p in ev.predictions], ev


def trainable_census(model) -> int:
    return int(sum(a.size for a in model.bank.arrays().values()))


def frozen_leaf_check(model) -> bool:
    """True when no frozen array is a gradient-requiring leaf."""
    return all(not isinstance(a, nx.Node) for a in model.frozen_arrays().values())
