"""Command-line entry points: train, eval, experiment, featurize, synth, report."""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import data as dio
from . import features, metrics
from .trainer import TrainConfig, config_from_kv, history_csv, load_state, parse_kv, save_state, train

TASKS = ("synthetic", "kdd-r2l", "kdd-u2r", "kdd-imbalance")
ENV_TRAIN = "SCARCEGAN_KDD_TRAIN"
ENV_TEST = "SCARCEGAN_KDD_TEST"

# per-task training defaults; --config and --set override them
TASK_DEFAULTS = {
    "synthetic": dict(batch_size=32, steps=1500, disc_widths=(64, 32, 16)),
    "kdd-r2l": dict(batch_size=64, steps=4000),
    "kdd-u2r": dict(batch_size=64, steps=4000),
    "kdd-imbalance": dict(batch_size=64, steps=4000),
}


def kdd_paths(train_path: str | None, test_path: str | None) -> tuple[str, str]:
    train_path = train_path or os.environ.get(ENV_TRAIN)
    test_path = test_path or os.environ.get(ENV_TEST)
    if not train_path or not test_path:
        raise FileNotFoundError(
            f"KDD data not configured: pass --train/--test or set {ENV_TRAIN} and {ENV_TEST}")
    for p in (train_path, test_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"KDD file not found: {p}")
    return train_path, test_path


@functools.lru_cache(maxsize=4)
def _encoded_kdd(train_path: str, test_path: str, subsample: float, subsample_seed: int):
    train_raw = dio.load_kdd(train_path, dedup=True)
    train_raw = dio.subsample(train_raw, subsample, subsample_seed)
    train_enc = dio.encode(train_raw)
    checksum = train_enc.meta.checksum()
    test_enc = dio.encode(dio.load_kdd(test_path), train_enc.meta)
    if train_enc.meta.checksum() != checksum:
        raise RuntimeError("encoder metadata changed while encoding the test file")
    return train_enc, test_enc


def task_factory(task: str, data_opts: dict | None = None):
    """Return ``seed -> Task`` for a named task. KDD splits are re-drawn per seed."""
    opts = dict(data_opts or {})
    if task == "synthetic":
        spec = dio.SyntheticSpec.from_text(Path(opts["spec"]).read_text()) if opts.get("spec") else \
            dio.default_synthetic_spec(float(opts.get("noise_rate", 0.3)))
        return lambda seed: dio.build_synthetic_task(spec, seed=seed)
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    paths = kdd_paths(opts.get("train"), opts.get("test"))
    frac = float(opts.get("subsample", 1.0))

    def make(seed: int):
        train_enc, test_enc = _encoded_kdd(*paths, frac, 0)
        if task == "kdd-imbalance":
            return dio.build_imbalance_task(train_enc, test_enc, seed=seed)
        positive = task.split("-", 1)[1]
        overrides = {}
        if positive == "u2r":
            overrides["n_pos_prior"] = 47  # 900/999 of the 52 available
        return dio.build_rare_class_task(train_enc, test_enc, positive, seed=seed, **overrides)

    return make


def train_config(args, task: str) -> TrainConfig:
    cfg = TrainConfig(**TASK_DEFAULTS.get(task, {}))
    if getattr(args, "config", None):
        cfg = config_from_kv(parse_kv(Path(args.config).read_text()), cfg)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "ablation", None):
        overrides["ablation"] = args.ablation
    return config_from_kv(overrides, cfg) if overrides else cfg


def _data_opts(args) -> dict:
    return {k: getattr(args, k) for k in ("train", "test", "subsample", "spec", "noise_rate")
            if getattr(args, k, None) is not None}


def _write_json(path: str, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = train_config(args, args.task).replace(seed=args.seed)
    task = task_factory(args.task, _data_opts(args))(args.seed)
    cfg = cfg.replace(batch_size=task.batch_size)
    state = train(cfg, task.prior, task.unlabeled)
    save_state(args.out, state, cfg)
    if args.history:
        Path(args.history).write_text(history_csv(state.history))
    if args.manifest:
        Path(args.manifest).write_text(dio.manifest_text(task.manifest))
    print(f"trained {state.step} steps -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    state, cfg = load_state(args.checkpoint)
    task = task_factory(args.task, _data_opts(args))(args.seed)
    rep = metrics.evaluate(state.disc, task.test_x, task.test_y, seed=args.seed,
                           config_digest=metrics.config_digest(cfg.to_dict()))
    out = {"schema_version": metrics.REPORT_SCHEMA_VERSION, "task": args.task,
           "checkpoint": args.checkpoint, **asdict(rep)}
    _write_json(args.out, out)
    print(json.dumps(rep.metrics()))
    return 0


def cmd_experiment(args) -> int:
    cfg = train_config(args, args.task)
    seeds = tuple(args.seeds) if args.seeds else tuple(range(args.runs))
    run_cfg = metrics.RunConfig(args.task, cfg, seeds, _data_opts(args), args.out)
    try:
        report = metrics.run_experiment(run_cfg, task_factory(args.task, run_cfg.data))
    except metrics.RunFailed as e:
        _write_json(args.out, {"schema_version": metrics.REPORT_SCHEMA_VERSION, "config": run_cfg.to_dict(),
                               "failed_seed": e.seed, "error": str(e)})
        print(str(e), file=sys.stderr)
        return 1
    _write_json(args.out, report)
    print(json.dumps(report["mean"]))
    return 0


def cmd_featurize(args) -> int:
    counters = tuple(args.counters.split(",")) if args.counters else None
    n = features.featurize_csv(args.inp, args.out, counters, jobs=args.jobs)
    print(f"featurized {n} samples -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = dio.SyntheticSpec.from_text(Path(args.spec).read_text()) if args.spec else dio.default_synthetic_spec()
    ds = dio.generate_synthetic(spec, args.n, seed=args.seed)
    dio.write_labeled_csv(args.out, ds.x, ds.noisy_y)
    print(f"wrote {len(ds.y)} samples -> {args.out}")
    return 0


def cmd_report(args) -> int:
    report = json.loads(Path(args.inp).read_text())
    metrics.check_report(report)
    lines = [f"task {report['config']['task']}  runs {report['n_runs']}  digest {report['config_digest']}"]
    lines.append("seed  " + "  ".join(f"{k:>17}" for k in metrics.METRIC_KEYS))
    for run in report["runs"]:
        lines.append(f"{run['seed']:>4}  " + "  ".join(f"{run[k]:>17.4f}" for k in metrics.METRIC_KEYS))
    lines.append("mean  " + "  ".join(f"{report['mean'][k]:>17.4f}" for k in metrics.METRIC_KEYS))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=TASKS, default="synthetic")
    p.add_argument("--train", help=f"KDD training file (default ${ENV_TRAIN})")
    p.add_argument("--test", help=f"KDD test file (default ${ENV_TEST})")
    p.add_argument("--subsample", type=float, help="keep this fraction of normal/dos training records")
    p.add_argument("--spec", help="synthetic spec file (key = value)")
    p.add_argument("--noise-rate", dest="noise_rate", type=float)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TrainConfig file (key = value)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one TrainConfig field")
    p.add_argument("--ablation")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scarcegan", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="write the loss history CSV here")
    p.add_argument("--manifest", help="write the task manifest here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task's test set")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="train and evaluate several seeded runs")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("featurize", help="third-order statistics from daily counter series")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counters", help="comma-separated canonical counter order")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("synth", help="generate a synthetic five-class dataset")
    p.add_argument("--spec")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="validate and tabulate an experiment report")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
