"""Training runs, ablation sweeps, heatmap export and the gradient check."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import replace

import numpy as np

from . import __version__
from . import numerics as nx
from .errors import ConfigError
from .mechanism import count_params
from .synthdata import SceneSpec, generate, load_dataset
from .training import TrainConfig, compute_loss, evaluate, train


def scene_spec(cfg: TrainConfig) -> SceneSpec:
    return SceneSpec(cfg.height, cfg.width, cfg.n_classes, cfg.d_raw, cfg.n_blocks,
                     cfg.noise, cfg.category_list, cfg.planted_min, cfg.planted_max)


def load_or_generate(cfg: TrainConfig):
    if cfg.dataset_path:
        ds = load_dataset(cfg.dataset_path)
        spec = ds.spec
        if (spec.categories, spec.n_classes, spec.d_raw, spec.height, spec.width) != \
                (cfg.category_list, cfg.n_classes, cfg.d_raw, cfg.height, cfg.width):
            raise ConfigError(f"{cfg.dataset_path} does not match the config's data fields")
        return ds
    return generate(cfg.effective_data_seed, cfg.n_examples, scene_spec(cfg))


def run_training(cfg: TrainConfig, ds=None, log=None) -> dict:
    """Train one model and evaluate it on the test split."""
    from .model import GraspModel

    ds = ds if ds is not None else load_or_generate(cfg)
    model = GraspModel(cfg, ds.prototypes)
    t0 = time.perf_counter()
    record, best = train(cfg, model, ds.train, ds.validation, log=log)
    ev = evaluate(model, ds.test)
    return {"cfg": cfg, "model": model, "record": record, "arrays": best, "test": ev,
            "planted": ev.planted_stats(ds.test), "runtime": time.perf_counter() - t0}


def _support_fraction(ev: "object") -> float:
    return float(np.mean(ev.weights > 0))


def _report_header(cfg: TrainConfig, kind: str) -> dict:
    return {"kind": kind, "config_digest": cfg.digest(), "seed": cfg.seed, "version": __version__}


def _cell(cfg, ds, axis_name, value, log=None):
    try:
        out = run_training(cfg, ds, log=log)
    except Exception as exc:  # recorded per cell, the sweep goes on
        return {axis_name: value, "status": f"failed: {type(exc).__name__}: {exc}"}, 0.0
    ev = out["test"]
    row = {axis_name: value, "status": "ok", "AA": ev.aa, "accuracy": ev.accuracy,
           "per_category": ev.per_category, "support_fraction": _support_fraction(ev),
           "mean_support": float(np.mean(np.sum(ev.weights > 0, axis=1))),
           "params": count_params(out["model"].bank), "best_epoch": out["record"].best_epoch}
    return row, out["runtime"]


def run_sweep_n(cfg: TrainConfig, n_list=(4, 16, 64), ds=None, log=None) -> tuple:
    """One run per block count on shared data; returns ``(report, timing)``."""
    ds = ds if ds is not None else load_or_generate(cfg)
    rows, timing = [], {}
    for n in n_list:
        side = math.isqrt(n)
        if side * side != n or cfg.height % side or cfg.width % side:
            rows.append({"N": n, "status": "skipped: sqrt(N) must divide the grid"})
            continue
        row, rt = _cell(replace(cfg, n_blocks=n), ds, "N", n, log)
        rows.append(row)
        timing[str(n)] = rt
    report = {**_report_header(cfg, "sweep-n"), "axis": "N", "rows": rows}
    ok = [r for r in rows if r.get("status") == "ok"]
    report["checks"] = {"params_increasing": all(a["params"] < b["params"] for a, b in zip(ok, ok[1:]))}
    return report, timing


def run_sweep_alpha(cfg: TrainConfig, alphas=(1.0, 1.2, 1.5, 1.8, 2.0), ds=None, log=None) -> tuple:
    ds = ds if ds is not None else load_or_generate(cfg)
    rows, timing = [], {}
    for a in alphas:
        row, rt = _cell(replace(cfg, alpha=a), ds, "alpha", a, log)
        rows.append(row)
        timing[str(a)] = rt
    report = {**_report_header(cfg, "sweep-alpha"), "axis": "alpha", "rows": rows}
    by = {r["alpha"]: r for r in rows if r.get("status") == "ok"}
    checks = {}
    if 1.0 in by:
        checks["alpha1_full_support"] = by[1.0]["support_fraction"] == 1.0
    sparse = [by[a]["support_fraction"] < 1.0 for a in by if a >= 1.5]
    if sparse:
        checks["sparse_for_alpha_ge_1.5"] = all(sparse)
    if 1.5 in by and 2.0 in by:
        checks["alpha2_not_denser_than_1.5"] = by[2.0]["support_fraction"] <= by[1.5]["support_fraction"]
    report["checks"] = checks
    return report, timing


def run_ablate_uniform(cfg: TrainConfig, ds=None, log=None) -> tuple:
    """GRASP against fixed ``1/N`` weights on the same data and data order."""
    ds = ds if ds is not None else load_or_generate(cfg)
    guided = run_training(replace(cfg, uniform=False), ds, log=log)
    flat = run_training(replace(cfg, uniform=True), ds, log=log)
    g, u = guided["test"], flat["test"]
    report = {
        **_report_header(cfg, "ablate-uniform"),
        "grasp": {"AA": g.aa, "per_category": g.per_category},
        "uniform": {"AA": u.aa, "per_category": u.per_category,
                    "weights_all_equal": bool(np.all(u.weights == 1.0 / cfg.n_blocks))},
        "delta_AA": g.aa - u.aa,
    }
    return report, {"grasp": guided["runtime"], "uniform": flat["runtime"]}


# --------------------------------------------------------------------------
# heatmaps


def weight_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    side = math.isqrt(w.size)
    return w.reshape(side, side)


def pgm_bytes(matrix, cell: int = 16) -> bytes:
    """8-bit binary graymap; the largest weight maps to 255."""
    m = np.asarray(matrix, dtype=np.float64)
    top = m.max()
    levels = np.zeros_like(m) if top <= 0 else np.rint(255.0 * m / top)
    img = np.kron(levels, np.ones((cell, cell))).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_heatmaps(model, records, out_dir, limit=None, cell=16) -> list:
    """Write ``<i>.csv``, ``<i>.json`` and ``<i>.pgm`` per example; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    records = records[:limit] if limit else records
    ev = evaluate(model, records)
    qv, av = model.question_vocab, model.answer_vocab
    written = []
    for i, rec in enumerate(records):
        W = weight_matrix(ev.weights[i])
        stem = os.path.join(out_dir, f"example_{i:05d}")
        with open(stem + ".csv", "w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(x)) for x in row] for row in W])
        meta = {"index": i, "question": qv.decode(rec.question), "category": rec.category,
                "answer": av.word(rec.answer), "prediction": av.word(ev.predictions[i]),
                "planted_block": rec.planted_block, "weights": W.tolist()}
        with open(stem + ".json", "w") as fh:
            json.dump(meta, fh, sort_keys=True)
        with open(stem + ".pgm", "wb") as fh:
            fh.write(pgm_bytes(W, cell))
        written.append(stem)
    return written


# --------------------------------------------------------------------------
# gradient check


def tiny_config(seed=0, **over) -> TrainConfig:
    base = dict(d_v=8, d_t=6, h=5, n_blocks=4, d_raw=4, height=4, width=4, n_classes=3,
                n_examples=40, planted_min=1, planted_max=4, token_scale=1.0, sigma=0.5, proj_gain=1.0,
                categories="presence,count,comparison,dominant", seed=seed)
    base.update(over)
    return TrainConfig(**base)


def run_grad_check(cfg: TrainConfig = None, n_batches=5, batch_size=3, step=1e-6, tol=1e-5) -> dict:
    """Central differences against backward for every prompt-bank array;
    the error per array is norm-wise, worst over batches."""
    from .model import GraspModel

    cfg = cfg or tiny_config()
    ds = generate(cfg.effective_data_seed, cfg.n_examples, scene_spec(cfg))
    model = GraspModel(cfg, ds.prototypes)
    # move the projections off their tied start so every path carries signal
    gen = nx.RngState(cfg.seed, 99).generator()
    for key in ("proj_k", "proj_q"):
        node = model.bank.params()[key]
        node.value += 0.3 * gen.normal(size=node.value.shape) / np.sqrt(node.value.shape[1])
    worst = {k: 0.0 for k in model.bank.params()}
    scale = {k: 0.0 for k in model.bank.params()}
    pool = ds.train
    for b in range(n_batches):
        idx = gen.choice(len(pool), size=batch_size, replace=False)
        batch = [pool[i] for i in idx]
        loss = compute_loss(batch, model)
        grads = nx.backward(loss)
        for k, node in model.bank.params().items():
            num = nx.numeric_gradient(lambda: float(compute_loss(batch, model).value), node.value, step)
            ana = grads.get(node, np.zeros_like(node.value))
            worst[k] = max(worst[k], nx.norm_relative_error(ana, num))
            scale[k] = max(scale[k], float(np.linalg.norm(ana)))
    # an all-zero gradient would pass vacuously
    live = all(v > 0 for v in scale.values())
    return {"arrays": sorted(worst), "max_relative_error": worst, "gradient_norm": scale,
            "overall": max(worst.values()), "tolerance": tol,
            "passed": live and max(worst.values()) <= tol}
