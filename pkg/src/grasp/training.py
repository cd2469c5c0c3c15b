"""Optimisation of the prompt bank against a frozen backbone.

Only the three prompt-bank arrays are ever updated. Everything here is
deterministic given the config: shuffling uses its own seeded stream and
the update order is fixed.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, IntegrityError, NumericError
from .numerics import RngState


@dataclass
class TrainConfig:
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 6
    max_epochs: int = 20
    patience: int = 5
    warmup_fraction: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_prompts: bool = False
    clip_norm: float = 0.0          # 0 disables global-norm clipping
    # mechanism
    n_blocks: int = 4
    alpha: float = 1.5
    h: int = 64
    sigma: float = 0.02
    proj_gain: float = 2.0          # projection init gain, in units of 1 / token_scale
    uniform: bool = False
    # backbone
    d_v: int = 64
    d_t: int = 32
    d_raw: int = 32
    token_scale: float = 0.01
    ffn_scale: float = 3.0
    pe_scale: float = 0.01
    head_scale: float = 5.0
    position_scale: float = 0.003
    calibrate_head: bool = True
    # data
    height: int = 8
    width: int = 8
    n_classes: int = 6
    n_examples: int = 5000
    noise: float = 0.1
    categories: str = "presence"
    planted_min: int = 10
    planted_max: int = 16
    # bookkeeping
    seed: int = 0
    data_seed: int = -1             # -1 means "same as seed"
    dataset_path: str = ""
    out_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr", "batch_size", "max_epochs", "patience", "n_blocks", "h", "sigma",
                     "d_v", "d_t", "d_raw", "height", "width", "n_classes", "n_examples"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.weight_decay < 0 or self.clip_norm < 0:
            raise ConfigError("weight_decay and clip_norm must be non-negative")
        side = math.isqrt(self.n_blocks)
        if side * side != self.n_blocks or self.height % side or self.width % side:
            raise ConfigError(f"N={self.n_blocks} must be a perfect square dividing the grid")
        if self.alpha < 1.0:
            raise ConfigError("alpha must be >= 1")

    @property
    def category_list(self) -> tuple:
        return tuple(c.strip() for c in self.categories.split(",") if c.strip())

    @property
    def effective_data_seed(self):
        return self.seed if self.data_seed < 0 else self.data_seed

    @classmethod
    def keys(cls):
        return {f.name: f.type for f in fields(cls)}

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# schedule and optimiser


def warmup_steps(total: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(cfg.warmup_fraction * total))


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` then linear decay to zero at ``total``."""
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warm = warmup_steps(total, cfg)
    if step <= warm:
        return cfg.lr * step / warm
    return cfg.lr * (total - step) / (total - warm)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict):
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig,
               decay_keys=None) -> None:
    """In-place AdamW update with decoupled weight decay.

    ``decay_keys`` restricts weight decay to a subset of ``params``.
    """
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ContractError("gradient, state and parameter keys differ")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    decay_keys = params.keys() if decay_keys is None else decay_keys
    for k in sorted(params):
        p, g = params[k], grads[k]
        if k in decay_keys and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / (1.0 - b1 ** t)
        vhat = state.v[k] / (1.0 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# --------------------------------------------------------------------------
# loss and evaluation


def compute_loss(batch, model, uniform=None):
    """Mean NLL of the answer over ``batch``; examples are grouped by
    question length so each group stacks into one tensor."""
    if not batch:
        raise ContractError("empty batch")
    total = None
    for group in model.group_by_length(batch):
        logits, _ = model.forward(group, uniform=uniform)
        targets = np.array([r.answer for r in group])
        part = nx.sum(nx.cross_entropy(logits, targets))
        total = part if total is None else nx.add(total, part)
    return nx.scale(total, 1.0 / len(batch))


@dataclass
class Evaluation:
    predictions: list
    accuracy: float
    weights: np.ndarray            # [n, N]
    per_category: dict
    aa: float

    def planted_stats(self, records):
        """Mean weight on, and argmax hit-rate of, the planted block over
        correctly answered examples that have one."""
        rows = [i for i, r in enumerate(records)
                if r.planted_block is not None and self.predictions[i] == r.answer]
        if not rows:
            return {"n": 0, "mean_weight": 0.0, "argmax_rate": 0.0}
        pb = np.array([records[i].planted_block for i in rows])
        W = self.weights[rows]
        return {"n": len(rows), "mean_weight": float(W[np.arange(len(rows)), pb].mean()),
                "argmax_rate": float(np.mean(W.argmax(axis=1) == pb))}


def evaluate(model, records, uniform=None, chunk=500) -> Evaluation:
    from .synthdata import accuracy

    preds = [0] * len(records)
    weights = np.zeros((len(records), model.bank.n_blocks))
    index = {id(r): i for i, r in enumerate(records)}
    for group in model.group_by_length(records):
        for s in range(0, len(group), chunk):
            part = group[s:s + chunk]
            logits, fusion = model.forward(part, uniform=uniform)
            am = logits.value.argmax(axis=-1)
            for j, r in enumerate(part):
                preds[index[id(r)]] = int(am[j])
                weights[index[id(r)]] = fusion.weights.value[j]
    hits = np.mean([p == r.answer for p, r in zip(preds, records)]) if records else 0.0
    av = model.answer_vocab
    acc = accuracy([av.word(p) for p in preds], [av.word(r.answer) for r in records],
                   [r.category for r in records])
    return Evaluation(preds, float(hits), weights, acc["per_category"], acc["AA"])


# --------------------------------------------------------------------------
# run record and integrity


def hash_arrays(arrays: dict) -> dict:
    out = {}
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h = hashlib.sha256(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
        out[k] = h.hexdigest()
    return out


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = -1.0
    stop_reason: str = ""
    config_digest: str = ""

    def to_jsonl(self, timing=False) -> str:
        """Deterministic serialisation; wall times only with ``timing``."""
        lines = [json.dumps({"kind": "run", "config_digest": self.config_digest}, sort_keys=True)]
        for e in self.epochs:
            row = {k: v for k, v in e.items() if timing or k != "wall_time"}
            lines.append(json.dumps({"kind": "epoch", **row}, sort_keys=True))
        lines.append(json.dumps({"kind": "lr_trace", "lr": self.lr_trace}))
        lines.append(json.dumps({"kind": "summary", "best_epoch": self.best_epoch,
                                 "best_val_accuracy": self.best_val_accuracy,
                                 "stop_reason": self.stop_reason}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        rec = cls()
        for line in text.splitlines():
            row = json.loads(line)
            kind = row.pop("kind")
            if kind == "run":
                rec.config_digest = row["config_digest"]
            elif kind == "epoch":
                rec.epochs.append(row)
            elif kind == "lr_trace":
                rec.lr_trace = row["lr"]
            elif kind == "summary":
                rec.best_epoch = row["best_epoch"]
                rec.best_val_accuracy = row["best_val_accuracy"]
                rec.stop_reason = row["stop_reason"]
        return rec


def train(cfg: TrainConfig, model, train_set, val_set, log=None):
    """Fit the prompt bank; returns ``(RunRecord, best arrays)`` and leaves
    the best arrays loaded in ``model.bank``."""
    if not train_set or not val_set:
        raise ContractError("train and validation sets must be non-empty")
    frozen_before = hash_arrays(model.frozen_arrays())
    params = model.bank.arrays()
    state = OptimizerState.zeros_like(params)
    decay = set(params) if cfg.decay_prompts else {"proj_k", "proj_q"}
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.max_epochs * steps_per_epoch
    shuffle = RngState(cfg.seed, nx.STREAM_SHUFFLE)
    rec = RunRecord(config_digest=cfg.digest())
    best = model.bank.snapshot()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.substream(epoch).generator().permutation(len(train_set))
        loss_sum = 0.0
        for s in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[s:s + cfg.batch_size]]
            try:
                loss = compute_loss(batch, model)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {step + 1}: {exc}") from exc
            grads_by_node = nx.backward(loss)
            grads = {k: grads_by_node.get(node, np.zeros_like(node.value))
                     for k, node in model.bank.params().items()}
            if cfg.clip_norm:
                clip_gradients(grads, cfg.clip_norm)
            step += 1
            lr = lr_at(step, total, cfg)
            adamw_step(params, grads, state, lr, cfg, decay)
            rec.lr_trace.append(lr)
            loss_sum += float(loss.value) * len(batch)
        val = evaluate(model, val_set)
        rec.epochs.append({"epoch": epoch, "train_loss": loss_sum / len(train_set),
                           "val_accuracy": val.accuracy, "lr": rec.lr_trace[-1],
                           "wall_time": time.perf_counter() - t0})
        if log:
            log(rec.epochs[-1])
        if val.accuracy > rec.best_val_accuracy:
            rec.best_val_accuracy, rec.best_epoch = val.accuracy, epoch
            best = model.bank.snapshot()
        elif epoch - rec.best_epoch >= cfg.patience:
            rec.stop_reason = "patience"
            break
    else:
        rec.stop_reason = "max_epochs"
    model.bank.load(best)
    if hash_arrays(model.frozen_arrays()) != frozen_before:
        raise IntegrityError("a frozen backbone array changed during training")
    return rec, best


def early_stop_epoch(val_accuracies, patience):
    """Replay the stopping rule on a validation curve: ``(stop, best)``."""
    best, best_epoch = -math.inf, 0
    for epoch, acc in enumerate(val_accuracies, start=1):
        if acc > best:
            best, best_epoch = acc, epoch
        elif epoch - best_epoch >= patience:
            return epoch, best_epoch
    return len(val_accuracies), best_epoch


# --------------------------------------------------------------------------
# checkpoint container: magic, version byte, header length, JSON header,
# then little-endian float64 array data in header order

MAGIC = b"GRASPCKP"
VERSION = 1


def save_checkpoint(path, arrays: dict, cfg: TrainConfig, rng_states=None, extra=None):
    layout, offset = [], 0
    for k in sorted(arrays):
        a = np.asarray(arrays[k], dtype=np.float64)
        layout.append({"name": k, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {"config_digest": cfg.digest(), "config": cfg.to_dict(), "arrays": layout,
              "rng": rng_states or {}, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<I", len(blob)) + blob)
        for k in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version = data[len(MAGIC)]
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    pos = len(MAGIC) + 1
    (n,) = struct.unpack("<I", data[pos:pos + 4])
    header = json.loads(data[pos + 4:pos + 4 + n])
    body = data[pos + 4 + n:]
    arrays = {}
    for item in header["arrays"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        arrays[item["name"]] = np.frombuffer(body, dtype="<f8", count=count,
                                             offset=item["offset"]).reshape(item["shape"]).copy()
    return arrays, header
