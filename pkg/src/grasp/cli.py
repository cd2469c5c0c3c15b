"""Command-line entry point.

Every subcommand takes ``--config`` (a flat JSON object whose keys must be
TrainConfig fields), any number of ``--set key=value`` overrides applied
after the file, ``--seed`` and ``--out``. The output root defaults to
``$GRASP_OUT`` or ``./runs``. Reports are written with sorted keys so the
same config and seed give byte-identical files; wall-clock times go to a
separate ``timing.json``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace

from . import __version__
from .errors import ConfigError, GraspError
from .training import TrainConfig

OUT_ENV = "GRASP_OUT"


def _field_types():
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def parse_value(key, text, types=None):
    types = types or _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    if kind is bool:
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from exc


def _coerce(key, value, types):
    kind = types[key]
    if isinstance(value, str) and kind is not str:
        return parse_value(key, value, types)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is bool and not isinstance(value, bool) or kind is not bool and isinstance(value, bool) \
            or not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def build_config(path=None, overrides=(), seed=None) -> TrainConfig:
    types = _field_types()
    values = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold one flat JSON object")
        for k, v in raw.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = _coerce(k, v, types)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        values[k.strip()] = parse_value(k.strip(), v.strip(), types)
    if seed is not None:
        values["seed"] = int(seed)
    return TrainConfig(**values)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, TrainConfig):
        return o.to_dict()
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _out_dir(args, cfg, name):
    root = args.out or cfg.out_dir or os.environ.get(OUT_ENV) or "runs"
    path = os.path.join(root, name) if not args.out else root
    os.makedirs(path, exist_ok=True)
    return path


def _log(args):
    if args.quiet:
        return None
    return lambda row: print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
                             f"val {row['val_accuracy']:.4f}", file=sys.stderr)


def _dataset(cfg):
    from .experiments import load_or_generate
    return load_or_generate(cfg)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    from .synthdata import save_dataset
    out = _out_dir(args, cfg, "data")
    ds = _dataset(cfg)
    path = os.path.join(out, "dataset.jsonl")
    save_dataset(ds, path)
    _write_json(os.path.join(out, "config.json"), cfg.to_dict())
    print(f"wrote {len(ds.train)}/{len(ds.validation)}/{len(ds.test)} examples to {path}")
    return True


def cmd_train(args, cfg):
    from .experiments import run_training
    from .training import save_checkpoint
    out = _out_dir(args, cfg, "train")
    res = run_training(cfg, _dataset(cfg), log=_log(args))
    rec, ev = res["record"], res["test"]
    save_checkpoint(os.path.join(out, "checkpoint.bin"), res["arrays"], cfg,
                    rng_states={"seed": cfg.seed, "data_seed": cfg.effective_data_seed})
    with open(os.path.join(out, "run.jsonl"), "w") as fh:
        fh.write(rec.to_jsonl())
    _write_json(os.path.join(out, "config.json"), cfg.to_dict())
    report = {"config_digest": cfg.digest(), "seed": cfg.seed, "version": __version__,
              "test_accuracy": ev.accuracy, "AA": ev.aa, "per_category": ev.per_category,
              "planted": res["planted"], "best_epoch": rec.best_epoch, "stop_reason": rec.stop_reason}
    _write_json(os.path.join(out, "report.json"), report)
    _write_json(os.path.join(out, "timing.json"), {"runtime": res["runtime"],
                                                   "epochs": [e["wall_time"] for e in rec.epochs]})
    print(f"test accuracy {ev.accuracy:.4f}  AA {ev.aa:.4f}  best epoch {rec.best_epoch}")
    return True


def _restore(args, cfg):
    from .model import GraspModel
    from .training import load_checkpoint
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    arrays, header = load_checkpoint(args.checkpoint)
    stored = TrainConfig(**header["config"])
    # the checkpoint fixes the model; --set may still point at other data
    cfg = replace(stored, dataset_path=cfg.dataset_path or stored.dataset_path)
    ds = _dataset(cfg)
    model = GraspModel(cfg, ds.prototypes)
    model.bank.load(arrays)
    return cfg, ds, model


def cmd_eval(args, cfg):
    from .training import evaluate
    cfg, ds, model = _restore(args, cfg)
    out = _out_dir(args, cfg, "eval")
    ev = evaluate(model, ds.test)
    report = {"config_digest": cfg.digest(), "seed": cfg.seed, "version": __version__,
              "test_accuracy": ev.accuracy, "AA": ev.aa, "per_category": ev.per_category,
              "planted": ev.planted_stats(ds.test)}
    _write_json(os.path.join(out, "eval.json"), report)
    print(f"test accuracy {ev.accuracy:.4f}  AA {ev.aa:.4f}")
    return True


def _sweep(args, cfg, name, fn, **kw):
    out = _out_dir(args, cfg, name)
    report, timing = fn(cfg, log=_log(args), **kw)
    _write_json(os.path.join(out, "report.json"), report)
    _write_json(os.path.join(out, "timing.json"), timing)
    for row in report.get("rows", []):
        print(json.dumps({k: v for k, v in row.items() if k != "per_category"}, sort_keys=True))
    checks = report.get("checks", {})
    for k, v in sorted(checks.items()):
        print(f"check {k}: {'PASS' if v else 'FAIL'}")
    return all(checks.values())


def cmd_sweep_n(args, cfg):
    from .experiments import run_sweep_n
    kw = {"n_list": tuple(int(x) for x in args.values.split(","))} if args.values else {}
    return _sweep(args, cfg, "sweep-n", run_sweep_n, **kw)


def cmd_sweep_alpha(args, cfg):
    from .experiments import run_sweep_alpha
    kw = {"alphas": tuple(float(x) for x in args.values.split(","))} if args.values else {}
    return _sweep(args, cfg, "sweep-alpha", run_sweep_alpha, **kw)


def cmd_ablate_uniform(args, cfg):
    from .experiments import run_ablate_uniform
    out = _out_dir(args, cfg, "ablate-uniform")
    report, timing = run_ablate_uniform(cfg, log=_log(args))
    _write_json(os.path.join(out, "report.json"), report)
    _write_json(os.path.join(out, "timing.json"), timing)
    print(f"GRASP AA {report['grasp']['AA']:.4f}  uniform AA {report['uniform']['AA']:.4f}  "
          f"delta {report['delta_AA']:+.4f}")
    return report["uniform"]["weights_all_equal"]


def cmd_export_heatmaps(args, cfg):
    from .experiments import export_heatmaps
    cfg, ds, model = _restore(args, cfg)
    out = _out_dir(args, cfg, "heatmaps")
    written = export_heatmaps(model, ds.test, out, limit=args.limit)
    print(f"wrote {len(written)} heatmaps to {out}")
    return True


def cmd_grad_check(args, cfg):
    from .experiments import run_grad_check, tiny_config
    res = run_grad_check(tiny_config(seed=cfg.seed))
    for k in res["arrays"]:
        print(f"{k:8s} max relative error {res['max_relative_error'][k]:.3e}")
    print(f"overall {res['overall']:.3e} (tolerance {res['tolerance']:.0e}): "
          f"{'PASS' if res['passed'] else 'FAIL'}")
    if args.out:
        _write_json(os.path.join(_out_dir(args, cfg, "grad-check"), "grad_check.json"), res)
    return res["passed"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-n": cmd_sweep_n,
    "sweep-alpha": cmd_sweep_alpha,
    "ablate-uniform": cmd_ablate_uniform,
    "export-heatmaps": cmd_export_heatmaps,
    "grad-check": cmd_grad_check,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON object of TrainConfig fields")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    common.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    p = argparse.ArgumentParser(prog="grasp", description="Question-guided spatial prompt fusion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("eval", "export-heatmaps"):
            sp.add_argument("--checkpoint", help="checkpoint written by train")
        if name == "export-heatmaps":
            sp.add_argument("--limit", type=int, default=None, help="export only the first LIMIT test examples")
        if name in ("sweep-n", "sweep-alpha"):
            sp.add_argument("--values", help="comma-separated axis values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = build_config(args.config, args.overrides, args.seed)
        ok = COMMANDS[args.command](args, cfg)
    except (GraspError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
