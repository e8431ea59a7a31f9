"""Positive-vs-rest metrics, seeded multi-run experiments and the JSON report."""

from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import R, SUP_CLASSES, U, Discriminator
from .trainer import TrainConfig, train

REPORT_SCHEMA_VERSION = 1
METRIC_KEYS = ("precision", "recall", "f1", "verbosity", "unknown_occupancy")


def classify_probs(probs) -> np.ndarray:
    """Argmax over the supervised columns; ties go to the earliest class in D<N<H<R<U."""
    p = np.asarray(probs, dtype=np.float64)
    return np.argmax(p, axis=1)  # np.argmax returns the first maximal index


def classify(disc: Discriminator, x) -> np.ndarray:
    return classify_probs(disc.forward(np.asarray(x, dtype=np.float64), head="supervised").sup)


def confusion(y_true, y_pred, n_classes: int = len(SUP_CLASSES)) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    verbosity: float
    unknown_occupancy: float
    confusion: list[list[int]]
    precision_undefined: bool = False
    seed: int | None = None
    config_digest: str = ""

    @classmethod
    def from_confusion(cls, cm, positive: int = R, unknown: int = U, **kw) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        total = int(cm.sum())
        if total == 0:
            raise ValueError("cannot evaluate an empty test set")
        tp = int(cm[positive, positive])
        pred_pos = int(cm[:, positive].sum())
        actual_pos = int(cm[positive].sum())
        undefined = pred_pos == 0
        precision = 0.0 if undefined else tp / pred_pos
        recall = tp / actual_pos if actual_pos else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision, recall, f1, pred_pos / total, int(cm[:, unknown].sum()) / total,
                   cm.tolist(), undefined, **kw)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}


def evaluate(disc: Discriminator, x, y, **kw) -> MetricsReport:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty test set")
    return MetricsReport.from_confusion(confusion(y, classify(disc, x)), **kw)


def config_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


def environment_stamp() -> dict:
    return {"python": sys.version.split()[0], "numpy": np.__version__, "platform": platform.platform()}


class RunFailed(RuntimeError):
    def __init__(self, seed: int, cause: BaseException):
        super().__init__(f"run with seed {seed} failed: {type(cause).__name__}: {cause}")
        self.seed = seed


@dataclass
class RunConfig:
    task: str = "synthetic"
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data: dict = field(default_factory=dict)
    out: str = ""

    def to_dict(self) -> dict:
        return {"task": self.task, "train": self.train.to_dict(), "seeds": list(self.seeds),
                "data": dict(self.data), "out": self.out}


def run_experiment(cfg: RunConfig, task_for_seed) -> dict:
    """Train and evaluate one model per seed; ``task_for_seed(seed)`` returns a data-io Task.

    The returned report holds per-run metrics and their arithmetic means.
    """
    digest = config_digest(cfg.to_dict())
    runs = []
    for seed in cfg.seeds:
        try:
            task = task_for_seed(seed)
            tcfg = cfg.train.replace(seed=seed, batch_size=task.batch_size)
            state = train(tcfg, task.prior, task.unlabeled)
            rep = evaluate(state.disc, task.test_x, task.test_y, seed=seed, config_digest=digest)
        except Exception as e:  # surfaced with the seed attached
            raise RunFailed(seed, e) from e
        runs.append(asdict(rep))
    return build_report(cfg, runs, digest)


def build_report(cfg: RunConfig, runs: list[dict], digest: str | None = None) -> dict:
    mean = {k: float(np.mean([r[k] for r in runs])) for k in METRIC_KEYS}
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_digest": digest or config_digest(cfg.to_dict()),
        "environment": environment_stamp(),
        "n_runs": len(runs),
        "runs": runs,
        "mean": mean,
    }


def check_report(report: dict, tol: float = 1e-9) -> None:
    """Raise ValueError if any metric is not re-derivable from its confusion matrix or means disagree."""
    for run in report["runs"]:
        again = MetricsReport.from_confusion(run["confusion"]).metrics()
        for k, v in again.items():
            if abs(v - run[k]) > tol:
                raise ValueError(f"seed {run.get('seed')}: {k} {run[k]} != {v} from confusion")
    for k, v in report["mean"].items():
        m = float(np.mean([r[k] for r in report["runs"]]))
        if abs(m - v) > tol:
            raise ValueError(f"mean {k} {v} != {m}")
