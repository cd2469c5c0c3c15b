import numpy as np
import pytest

from grasp.errors import ConfigError, ContractError
from grasp.mechanism import partition_grid
from grasp.synthdata import (
    SceneSpec,
    accuracy,
    answer_text,
    generate,
    load_dataset,
    normalize_answer,
    save_dataset,
)
from grasp.vocab import answer_vocab, class_names, question_vocab

SMALL = SceneSpec(height=4, width=4, n_classes=4, d_raw=4, n_blocks=4, planted_min=1, planted_max=4)


def test_degenerate_scene():
    spec = SceneSpec(height=4, width=4, n_classes=2, d_raw=2, n_blocks=4, noise=0.0, planted_min=1, planted_max=4)
    part = partition_grid(4, 4, 4)
    labels = np.zeros(16, dtype=int)
    assert answer_text(labels, "presence", 0, spec, part) == "yes"
    assert answer_text(labels, "count", 0, spec, part) == "4"
    assert answer_text(labels, "dominant", -1, spec, part) == class_names(2)[0]


def test_presence_balance():
    spec = SceneSpec(height=4, width=4, n_classes=3, d_raw=2, n_blocks=4, categories=("presence",),
                     planted_min=1, planted_max=4)
    ds = generate(11, 10_000, spec)
    recs = ds.all()
    av = answer_vocab(3, spec.categories)
    yes = np.mean([av.word(r.answer) == "yes" for r in recs])
    assert 0.48 <= yes <= 0.52
    for r in recs:
        assert (r.planted_block is not None) == (av.word(r.answer) == "yes")


def recount(labels, c, spec):
    grid = np.asarray(labels).reshape(spec.height, spec.width)
    side = int(np.sqrt(spec.n_blocks))
    bh, bw = spec.height // side, spec.width // side
    return sum(int(np.any(grid[i * bh:(i + 1) * bh, j * bw:(j + 1) * bw] == c))
               for i in range(side) for j in range(side))


def test_count_answers_recount():
    spec = SceneSpec(height=8, width=8, n_classes=5, d_raw=3, n_blocks=4, categories=("count",))
    ds = generate(5, 1000, spec)
    av = answer_vocab(5, spec.categories)
    for r in ds.all():
        assert int(av.word(r.answer)) == recount(r.labels, r.target_class, spec)


def test_all_answers_recomputable():
    spec = SceneSpec(height=8, width=8, n_classes=5, d_raw=3, n_blocks=4)
    ds = generate(6, 400, spec)
    av = answer_vocab(5, spec.categories)
    names = class_names(5)
    for r in ds.all():
        lab = r.labels.reshape(8, 8)
        c = r.target_class
        want = {
            "presence": lambda: "yes" if np.any(lab == c) else "no",
            "count": lambda: str(recount(r.labels, c, spec)),
            "comparison": lambda: "yes" if np.sum(lab[:, :4] == c) > np.sum(lab[:, 4:] == c) else "no",
            "dominant": lambda: names[int(np.argmax(np.bincount(r.labels, minlength=5)))],
        }[r.category]()
        assert av.word(r.answer) == want


def test_planted_block_holds_the_class():
    spec = SceneSpec(categories=("presence",))
    part = partition_grid(8, 8, 4)
    for r in generate(3, 200, spec).all():
        if r.planted_block is not None:
            inside = np.sum(r.labels[part.index_sets[r.planted_block]] == r.target_class)
            assert spec.planted_min <= inside <= spec.planted_max
            assert np.sum(r.labels == r.target_class) == inside


def test_splits_stratified_and_disjoint():
    ds = generate(1, 1000, SMALL)
    assert (len(ds.train), len(ds.validation), len(ds.test)) == (800, 100, 100)
    ids = [id(r) for r in ds.all()]
    assert len(set(ids)) == 1000
    for split, frac in ((ds.train, 0.8), (ds.validation, 0.1), (ds.test, 0.1)):
        for cat in SMALL.categories:
            n = sum(r.category == cat for r in split)
            assert abs(n - frac * 250) <= 1


def test_generation_replays_bit_exactly():
    a, b = generate(9, 60, SMALL), generate(9, 60, SMALL)
    for x, y in zip(a.all(), b.all()):
        assert np.array_equal(x.raw, y.raw) and x.question == y.question and x.answer == y.answer


def test_dataset_roundtrip(tmp_path):
    ds = generate(2, 50, SMALL)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.spec == ds.spec
    np.testing.assert_array_equal(back.prototypes, ds.prototypes)
    for x, y in zip(ds.all(), back.all()):
        assert np.array_equal(x.raw, y.raw) and np.array_equal(x.labels, y.labels)
        assert (x.question, x.category, x.answer, x.planted_block) == (y.question, y.category, y.answer, y.planted_block)


def test_prototypes_distinct():
    P = generate(4, 20, SMALL).prototypes
    assert np.allclose(np.linalg.norm(P, axis=1), 1.0)
    assert len({tuple(np.round(p, 9)) for p in P}) == len(P)


def test_invalid_spec():
    with pytest.raises(ConfigError):
        SceneSpec(n_classes=11)
    with pytest.raises(ConfigError):
        SceneSpec(categories=("area",))
    with pytest.raises(ConfigError):
        generate(0, 5, SMALL)


def test_normalize_answer():
    assert normalize_answer("Yes.") == "yes"
    assert normalize_answer("Two") == "2"
    text = "  THREE  buildings! "
    stepwise = " ".join(text.lower().replace("!", "").split()).replace("three", "3")
    assert normalize_answer(text) == stepwise == "3 buildings"
    for t in ("Yes.", "Two", text, "ten, ELEVEN"):
        assert normalize_answer(normalize_answer(t)) == normalize_answer(t)


def test_accuracy_hand_fixture():
    preds = ["Yes.", "no", "No", "Two", "3", "zero", "Water", "ROAD"]
    refs = ["yes", "yes", "no", "2", "2", "1", "water", "road"]
    cats = ["presence"] * 3 + ["count"] * 3 + ["dominant"] * 2
    out = accuracy(preds, refs, cats)
    # by hand: presence 2/3, count 1/3, dominant 2/2
    assert out["per_category"] == {"count": 1 / 3, "dominant": 1.0, "presence": 2 / 3}
    assert out["AA"] == pytest.approx((2 / 3 + 1 / 3 + 1.0) / 3)
    assert out["counts"] == {"count": 3, "dominant": 2, "presence": 3}


def test_accuracy_trivial_cases():
    out = accuracy(["yes", "2"], ["yes", "2"], ["presence", "count"])
    assert out["AA"] == 1.0 and set(out["per_category"].values()) == {1.0}
    assert accuracy(["YES"], ["yes"], ["presence"])["AA"] == 1.0
    with pytest.raises(ContractError):
        accuracy(["yes"], [], [])


def test_vocabularies():
    qv = question_vocab(6)
    assert qv.decode(qv.encode("is there a water ?")) == "is there a water ?"
    av = answer_vocab(6, ("presence",))
    assert av.words == ("yes", "no")
    full = answer_vocab(6)
    assert full.word(2) == "0" and "desert" not in full and "farmland" in full
