"""Planted-signal VQA scenes, dataset files, answer normalisation and metrics.

A scene is an ``H x W`` grid of class labels; each cell's raw feature is
its class prototype plus Gaussian noise. Questions are about one class
``c`` (or, for *dominant*, about the whole scene) and every answer can be
recomputed from the label grid alone.
"""

from __future__ import annotations

import base64
import json
import re
import string
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .mechanism import partition_grid
from .numerics import RngState
from .vocab import answer_vocab, class_names, question_vocab

CATEGORIES = ("presence", "count", "comparison", "dominant")
SCHEMA = "grasp-dataset/1"

TEMPLATES = {
    "presence": "is there a {c} ?",
    "count": "how many blocks contain {c} ?",
    "comparison": "does the left half have more {c} than the right half ?",
    "dominant": "what is the most common class ?",
}


@dataclass(frozen=True)
class SceneSpec:
    height: int = 8
    width: int = 8
    n_classes: int = 6
    d_raw: int = 8
    n_blocks: int = 4
    noise: float = 0.1
    categories: tuple = CATEGORIES
    # number of cells of the asked class planted in the chosen block
    planted_min: int = 6
    planted_max: int = 10

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.d_raw < 1:
            raise ConfigError("grid extents and d_raw must be positive")
        class_names(self.n_classes)
        if self.n_classes < 2:
            raise ConfigError("need at least two classes so 'no' scenes have a background")
        if self.noise < 0:
            raise ConfigError("noise std must be non-negative")
        bad = [c for c in self.categories if c not in CATEGORIES]
        if bad or not self.categories:
            raise ConfigError(f"unknown question categories {bad}")
        part = partition_grid(self.height, self.width, self.n_blocks)
        block = len(part.index_sets[0])
        if not 1 <= self.planted_min <= self.planted_max <= block:
            raise ConfigError(f"planted cell range must lie in [1, {block}]")

    @property
    def n_cells(self):
        return self.height * self.width


@dataclass
class ExampleRecord:
    raw: np.ndarray              # [M, d_raw]
    labels: np.ndarray           # [M] int
    question: list               # question token ids
    category: str
    answer: int                  # answer id
    target_class: int = -1       # class the question asks about, -1 for dominant
    planted_block: int | None = None

    @property
    def has_planted(self):
        return self.planted_block is not None


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    spec: SceneSpec
    seed: int
    prototypes: np.ndarray = field(default=None, repr=False)

    def all(self):
        return self.train + self.validation + self.test


def make_prototypes(spec: SceneSpec, seed: int) -> np.ndarray:
    """Unit-norm class prototypes, redrawn until pairwise distinct."""
    gen = RngState(seed, nx.STREAM_PROTOTYPES).generator()
    while True:
        P = gen.normal(size=(spec.n_classes, spec.d_raw))
        P /= np.linalg.norm(P, axis=1, keepdims=True)
        gram = P @ P.T - np.eye(spec.n_classes)
        if np.all(gram < 1.0 - 1e-6):
            return P


# --------------------------------------------------------------------------
# ground truth from a label grid


def blocks_containing(labels, c, part):
    return sum(int(np.any(labels[idx] == c)) for idx in part.index_sets)


def left_minus_right(labels, c, spec):
    grid = np.asarray(labels).reshape(spec.height, spec.width)
    half = spec.width // 2
    return int(np.sum(grid[:, :half] == c)) - int(np.sum(grid[:, spec.width - half:] == c))


def modal_class(labels, n_classes):
    """Most frequent class; ties go to the smallest class index."""
    return int(np.argmax(np.bincount(labels, minlength=n_classes)))


def answer_text(labels, category, c, spec, part):
    if category == "presence":
        return "yes" if np.any(labels == c) else "no"
    if category == "count":
        return str(blocks_containing(labels, c, part))
    if category == "comparison":
        return "yes" if left_minus_right(labels, c, spec) > 0 else "no"
    if category == "dominant":
        return class_names(spec.n_classes)[modal_class(labels, spec.n_classes)]
    raise ConfigError(f"unknown category {category!r}")


# --------------------------------------------------------------------------
# scene sampling


def _background(gen, spec, c, n):
    others = np.array([k for k in range(spec.n_classes) if k != c])
    return others[gen.integers(len(others), size=n)]


def _plant(gen, labels, cells, c, k):
    labels[gen.choice(cells, size=k, replace=False)] = c


def _scene(gen, spec, part, category):
    C = spec.n_classes
    if category == "dominant":
        labels = gen.integers(C, size=spec.n_cells)
        return labels, -1, None
    c = int(gen.integers(C))
    labels = _background(gen, spec, c, spec.n_cells)
    planted = None
    if category == "presence":
        if gen.random() < 0.5:
            planted = int(gen.integers(spec.n_blocks))
            k = int(gen.integers(spec.planted_min, spec.planted_max + 1))
            _plant(gen, labels, part.index_sets[planted], c, k)
    elif category == "count":
        n_with = int(gen.integers(spec.n_blocks + 1))
        for b in gen.choice(spec.n_blocks, size=n_with, replace=False):
            k = int(gen.integers(spec.planted_min, spec.planted_max + 1))
            _plant(gen, labels, part.index_sets[int(b)], c, k)
    elif category == "comparison":
        half = spec.width // 2
        cols = np.arange(spec.n_cells) % spec.width
        left = np.flatnonzero(cols < half)
        right = np.flatnonzero(cols >= spec.width - half)
        a, b = gen.choice(min(len(left), 2 * spec.planted_max) + 1, size=2, replace=False)
        _plant(gen, labels, left, c, int(a))
        _plant(gen, labels, right, c, int(b))
    return labels, c, planted


def make_example(gen, spec, part, prototypes, category, qv, av) -> ExampleRecord:
    labels, c, planted = _scene(gen, spec, part, category)
    raw = prototypes[labels] + spec.noise * gen.normal(size=(spec.n_cells, spec.d_raw))
    names = class_names(spec.n_classes)
    text = TEMPLATES[category].format(c=names[c] if c >= 0 else "")
    ans = answer_text(labels, category, c, spec, part)
    return ExampleRecord(raw, labels.astype(np.int64), qv.encode(text), category, av.id(ans), c, planted)


def _stratified(records, gen, fractions=(0.8, 0.1, 0.1)):
    splits = ([], [], [])
    for cat in CATEGORIES:
        idx = [i for i, r in enumerate(records) if r.category == cat]
        if not idx:
            continue
        idx = [idx[j] for j in gen.permutation(len(idx))]
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        for part, sl in zip(splits, (idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:])):
            part.extend(sl)
    return tuple([records[i] for i in sorted(s)] for s in splits)


def generate(seed: int, count: int, spec: SceneSpec, max_count: int = 64) -> DatasetSplit:
    """Draw ``count`` examples, categories in round-robin order, and split
    80/10/10 stratified by category."""
    if count < 10:
        raise ConfigError("generate needs count >= 10")
    part = partition_grid(spec.height, spec.width, spec.n_blocks)
    protos = make_prototypes(spec, seed)
    qv, av = question_vocab(spec.n_classes), answer_vocab(spec.n_classes, spec.categories, max_count)
    data = RngState(seed, nx.STREAM_DATA)
    records = []
    for i in range(count):
        gen = data.substream(i).generator()
        cat = spec.categories[i % len(spec.categories)]
        records.append(make_example(gen, spec, part, protos, cat, qv, av))
    tr, va, te = _stratified(records, RngState(seed, nx.STREAM_DATA).substream(count).generator())
    return DatasetSplit(tr, va, te, spec, seed, protos)


# --------------------------------------------------------------------------
# dataset file: one JSON header line, then one record per line


def _b64(arr, dtype):
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _unb64(s, dtype, shape):
    return np.frombuffer(base64.b64decode(s), dtype=dtype).reshape(shape).copy()


def save_dataset(ds: DatasetSplit, path):
    spec = ds.spec
    header = {
        "schema": SCHEMA, "seed": ds.seed, "height": spec.height, "width": spec.width,
        "d_raw": spec.d_raw, "n_classes": spec.n_classes, "n_blocks": spec.n_blocks,
        "noise": spec.noise, "categories": list(spec.categories),
        "planted_min": spec.planted_min, "planted_max": spec.planted_max,
        "prototypes": _b64(ds.prototypes, "<f8"),
        "comparison_split": "left = columns [0, W//2), right = columns [W - W//2, W)",
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split, recs in (("train", ds.train), ("validation", ds.validation), ("test", ds.test)):
            for r in recs:
                row = {
                    "split": split, "category": r.category, "question": list(map(int, r.question)),
                    "answer": int(r.answer), "target_class": int(r.target_class),
                    "planted_block": r.planted_block,
                    "labels": _b64(r.labels, "<i2"), "raw": _b64(r.raw, "<f8"),
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path) -> DatasetSplit:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported dataset schema {header.get('schema')!r}")
        spec = SceneSpec(header["height"], header["width"], header["n_classes"], header["d_raw"],
                         header["n_blocks"], header["noise"], tuple(header["categories"]),
                         header["planted_min"], header["planted_max"])
        M = spec.n_cells
        out = {"train": [], "validation": [], "test": []}
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out[row["split"]].append(ExampleRecord(
                _unb64(row["raw"], "<f8", (M, spec.d_raw)).astype(np.float64),
                _unb64(row["labels"], "<i2", (M,)).astype(np.int64),
                row["question"], row["category"], row["answer"],
                row["target_class"], row["planted_block"]))
    protos = _unb64(header["prototypes"], "<f8", (spec.n_classes, spec.d_raw))
    return DatasetSplit(out["train"], out["validation"], out["test"], spec, header["seed"], protos)


# --------------------------------------------------------------------------
# evaluation protocol

NUMBER_WORDS = {
    "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4", "five": "5",
    "six": "6", "seven": "7", "eight": "8", "nine": "9", "ten": "10",
}
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_answer(text) -> str:
    words = _PUNCT.sub("", str(text).lower()).split()
    return " ".join(NUMBER_WORDS.get(w, w) for w in words)


def accuracy(predictions, references, categories) -> dict:
    """Exact match after normalisation, per category, plus the unweighted
    mean over categories under ``"AA"``."""
    if not len(predictions) == len(references) == len(categories):
        raise ContractError("predictions, references and categories differ in length")
    hits, totals = {}, {}
    for p, r, c in zip(predictions, references, categories):
        totals[c] = totals.get(c, 0) + 1
        hits[c] = hits.get(c, 0) + int(normalize_answer(p) == normalize_answer(r))
    per = {c: hits[c] / totals[c] for c in sorted(totals)}
    aa = float(np.mean(list(per.values()))) if per else 0.0
    return {"per_category": per, "AA": aa, "counts": {c: totals[c] for c in sorted(totals)}}


def check_grid(raw, spec: SceneSpec):
    if raw.shape != (spec.n_cells, spec.d_raw):
        raise DimensionError(f"raw grid {raw.shape} != ({spec.n_cells}, {spec.d_raw})")
