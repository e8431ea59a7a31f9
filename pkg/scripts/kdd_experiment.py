"""KDD rare-class and imbalance experiments against the vanilla baseline.

Needs the 10% training file and the labeled test file:

    export SCARCEGAN_KDD_TRAIN=/data/kddcup.data_10_percent.gz
    export SCARCEGAN_KDD_TEST=/data/corrected.gz
    python scripts/kdd_experiment.py --task kdd-r2l --runs 5 --subsample 0.5
"""

import argparse
import json
import time
from pathlib import Path

from scarcegan import cli, data, metrics
from scarcegan.trainer import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--task", choices=cli.TASKS[1:], default="kdd-r2l")
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--subsample", type=float, default=1.0)
    ap.add_argument("--baseline", default="vanilla_ssgan", help="ablation to compare against ('' to skip)")
    ap.add_argument("--out", default="runs/kdd")
    args = ap.parse_args()

    train_path, _ = cli.kdd_paths(None, None)
    counts = data.load_kdd(train_path, dedup=True).counts()
    print("deduplicated train counts:", counts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = {"subsample": args.subsample}
    for ablation in ["full"] + ([args.baseline] if args.baseline else []):
        cfg = TrainConfig(**cli.TASK_DEFAULTS[args.task], ablation=ablation)
        run = metrics.RunConfig(args.task, cfg, tuple(range(args.runs)), opts)
        t0 = time.perf_counter()
        report = metrics.run_experiment(run, cli.task_factory(args.task, opts))
        per_run = (time.perf_counter() - t0) / args.runs
        (out / f"{args.task}_{ablation}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        m = report["mean"]
        print(f"{ablation:<14} P {m['precision']:.3f}  R {m['recall']:.3f}  F1 {m['f1']:.3f}  {per_run:.0f}s/run")


if __name__ == "__main__":
    main()
