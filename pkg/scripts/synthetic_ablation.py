"""Compare ablations on the synthetic five-class dataset (mean over seeded runs).

    python scripts/synthetic_ablation.py --runs 5 --noise 0.3 --out runs/ablation.json
"""

import argparse
import json
from pathlib import Path

from scarcegan import cli, metrics
from scarcegan.trainer import ABLATIONS, TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--steps", type=int, default=cli.TASK_DEFAULTS["synthetic"]["steps"])
    ap.add_argument("--ablations", nargs="+", default=list(ABLATIONS), choices=ABLATIONS)
    ap.add_argument("--out")
    args = ap.parse_args()

    factory = cli.task_factory("synthetic", {"noise_rate": args.noise})
    results = {}
    print(f"{'ablation':<18}" + "".join(f"{k:>18}" for k in metrics.METRIC_KEYS))
    for ablation in args.ablations:
        cfg = TrainConfig(**{**cli.TASK_DEFAULTS["synthetic"], "steps": args.steps}, ablation=ablation)
        report = metrics.run_experiment(metrics.RunConfig("synthetic", cfg, tuple(range(args.runs))), factory)
        results[ablation] = report
        print(f"{ablation:<18}" + "".join(f"{report['mean'][k]:>18.4f}" for k in metrics.METRIC_KEYS), flush=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
