"""Closed question and answer vocabularies for the toy VQA tasks."""

from __future__ import annotations

from .errors import ConfigError, VocabularyError

CLASS_NAMES = (
    "building", "road", "water", "tree", "grass",
    "farmland", "parking", "bridge", "beach", "desert",
)

QUESTION_WORDS = (
    "is", "there", "a", "?", "how", "many", "blocks", "contain", "does", "the",
    "left", "half", "have", "more", "than", "right", "what", "most", "common", "class",
)


class Vocab:
    """Bijective id <-> string table with stable insertion order."""

    def __init__(self, words):
        self.words = tuple(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ConfigError("vocabulary entries must be unique")

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.ids

    def id(self, word) -> int:
        try:
            return self.ids[word]
        except KeyError:
            raise VocabularyError(f"{word!r} is not in the vocabulary") from None

    def word(self, i) -> str:
        if not 0 <= int(i) < len(self.words):
            raise VocabularyError(f"id {i} outside vocabulary of size {len(self.words)}")
        return self.words[int(i)]

    def encode(self, text: str) -> list:
        return [self.id(w) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.word(i) for i in ids)


def class_names(n_classes: int) -> tuple:
    if not 1 <= n_classes <= len(CLASS_NAMES):
        raise ConfigError(f"class count must be in [1, {len(CLASS_NAMES)}], got {n_classes}")
    return CLASS_NAMES[:n_classes]


def question_vocab(n_classes: int) -> Vocab:
    return Vocab(QUESTION_WORDS + class_names(n_classes))


def answer_vocab(n_classes: int, categories=("presence", "count", "comparison", "dominant"),
                 max_count: int = 64) -> Vocab:
    """Every answer the given question categories can produce: yes/no, the
    counts 0..max_count, the class names, in that order."""
    cats = set(categories)
    words = ()
    if cats & {"presence", "comparison"}:
        words += ("yes", "no")
    if "count" in cats:
        words += tuple(str(k) for k in range(max_count + 1))
    if "dominant" in cats:
        words += class_names(n_classes)
    if not words:
        raise ConfigError(f"no answers for categories {sorted(cats)}")
    return Vocab(words)
