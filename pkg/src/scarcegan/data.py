"""Datasets: KDDCUP99 loading/encoding, rare-class and imbalance tasks, synthetic five-class data."""

from __future__ import annotations

import csv
import dataclasses
import gzip
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import D, H, N, R, SUP_CLASSES, U
from .trainer import LabeledPrior, parse_kv

log = logging.getLogger(__name__)

KDD_COLUMNS = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes", "land",
    "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in", "num_compromised",
    "root_shell", "su_attempted", "num_root", "num_file_creations", "num_shells",
    "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate", "srv_rerror_rate",
    "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
)
SYMBOLIC = ("protocol_type", "service", "flag")
SYMBOLIC_IDX = tuple(KDD_COLUMNS.index(c) for c in SYMBOLIC)
NUMERIC_IDX = tuple(i for i in range(len(KDD_COLUMNS)) if i not in SYMBOLIC_IDX)

# attack name -> category; covers the training file and the labeled test file
_CATEGORY_MEMBERS = {
    "normal": ("normal",),
    "dos": ("back", "land", "neptune", "pod", "smurf", "teardrop",
            "apache2", "mailbomb", "processtable", "udpstorm"),
    "probe": ("ipsweep", "nmap", "portsweep", "satan", "mscan", "saint"),
    "r2l": ("ftp_write", "guess_passwd", "imap", "multihop", "phf", "spy", "warezclient",
            "warezmaster", "named", "sendmail", "snmpgetattack", "snmpguess", "worm",
            "xlock", "xsnoop"),
    "u2r": ("buffer_overflow", "loadmodule", "perl", "rootkit", "httptunnel", "ps",
            "sqlattack", "xterm"),
}
ATTACK_CATEGORY = {name: cat for cat, names in _CATEGORY_MEMBERS.items() for name in names}
CATEGORIES = tuple(_CATEGORY_MEMBERS)


@dataclass
class KddData:
    """Parsed KDD records. ``ids`` are 1-based line numbers in the source file."""

    numeric: np.ndarray
    symbolic: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    @property
    def categories(self) -> np.ndarray:
        return np.array([ATTACK_CATEGORY[l] for l in self.labels], dtype=object)

    def __len__(self) -> int:
        return len(self.labels)

    def counts(self) -> dict[str, int]:
        c = Counter(self.categories.tolist()) if len(self) else Counter()
        return {cat: c.get(cat, 0) for cat in CATEGORIES}

    def take(self, idx) -> "KddData":
        return KddData(self.numeric[idx], self.symbolic[idx], self.labels[idx], self.ids[idx])


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt", newline="")
    return open(path, newline="")


def load_kdd(path, dedup: bool = False) -> KddData:
    """Read a KDDCUP99 file (optionally gzipped): 41 attributes then a period-terminated label.

    ``dedup`` keeps only the first occurrence of each distinct record.
    """
    numeric, symbolic, labels, ids = [], [], [], []
    seen = set()
    with _open_text(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 42:
                raise ValueError(f"{path}:{lineno}: expected 42 fields, got {len(parts)}")
            label = parts[41]
            if not label.endswith("."):
                raise ValueError(f"{path}:{lineno}: label {label!r} is not period-terminated")
            label = label[:-1]
            if label not in ATTACK_CATEGORY:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}")
            if dedup:
                if line in seen:
                    continue
                seen.add(line)
            try:
                numeric.append([float(parts[i]) for i in NUMERIC_IDX])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            symbolic.append([parts[i] for i in SYMBOLIC_IDX])
            labels.append(label)
            ids.append(lineno)
    data = KddData(
        np.asarray(numeric, dtype=np.float64).reshape(-1, len(NUMERIC_IDX)),
        np.asarray(symbolic, dtype=object).reshape(-1, len(SYMBOLIC_IDX)),
        np.asarray(labels, dtype=object),
        np.asarray(ids, dtype=np.int64),
    )
    log.info("loaded %s: %d records %s", path, len(data), data.counts())
    return data


def subsample(data: KddData, fraction: float, seed: int = 0, thin=("normal", "dos")) -> KddData:
    """Keep a uniform ``fraction`` of the majority categories in ``thin``; keep every other record."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("subsample fraction must lie in (0, 1]")
    if fraction == 1.0:
        return data
    rng = np.random.default_rng(seed)
    cats = data.categories
    keep = ~np.isin(cats, thin) | (rng.random(len(data)) < fraction)
    return data.take(np.nonzero(keep)[0])


@dataclass
class EncoderMeta:
    vocabularies: dict[str, list[str]]
    mins: list[float]
    maxs: list[float]
    log_columns: list[int]

    @property
    def width(self) -> int:
        return len(self.mins) + sum(len(v) + 1 for v in self.vocabularies.values())

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderMeta":
        return cls(**json.loads(text))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def feature_names(self) -> list[str]:
        names = [KDD_COLUMNS[i] for i in NUMERIC_IDX]
        for col in SYMBOLIC:
            names += [f"{col}={v}" for v in self.vocabularies[col]] + [f"{col}=<unseen>"]
        return names


@dataclass
class EncodedDataset:
    x: np.ndarray
    labels: np.ndarray
    categories: np.ndarray
    ids: np.ndarray
    meta: EncoderMeta


def fit_encoder(data: KddData, log_scale: bool = True) -> EncoderMeta:
    vocab = {col: sorted(set(data.symbolic[:, j].tolist())) for j, col in enumerate(SYMBOLIC)}
    num = data.numeric
    log_cols = [j for j in range(num.shape[1]) if log_scale and len(num) and num[:, j].min() >= 0 and num[:, j].max() > 1]
    num = _log_columns(num, log_cols)
    mins = num.min(axis=0) if len(num) else np.zeros(num.shape[1])
    maxs = num.max(axis=0) if len(num) else np.ones(num.shape[1])
    return EncoderMeta(vocab, mins.tolist(), maxs.tolist(), log_cols)


def _log_columns(num: np.ndarray, cols) -> np.ndarray:
    if not cols:
        return num
    num = num.copy()
    num[:, cols] = np.log1p(np.maximum(num[:, cols], 0.0))
    return num


def encode(data: KddData, meta: EncoderMeta | None = None, log_scale: bool = True) -> EncodedDataset:
    """One-hot symbolic columns (plus an unseen bucket each) and min-max scaled numerics.

    Without ``meta`` the encoder is fitted on ``data`` (training path). With it,
    vocabularies and scales are frozen; test numerics are clipped to [0, 1].
    """
    fitted = meta is None
    if fitted:
        meta = fit_encoder(data, log_scale)
    num = _log_columns(data.numeric, meta.log_columns)
    lo, hi = np.asarray(meta.mins), np.asarray(meta.maxs)
    rng = np.where(hi > lo, hi - lo, 1.0)
    num = (num - lo) / rng
    num[:, hi <= lo] = 0.0
    if not fitted:
        num = np.clip(num, 0.0, 1.0)
    blocks = [num]
    for j, col in enumerate(SYMBOLIC):
        vocab = meta.vocabularies[col]
        index = {v: i for i, v in enumerate(vocab)}
        onehot = np.zeros((len(data), len(vocab) + 1))
        cols = [index.get(v, len(vocab)) for v in data.symbolic[:, j]]
        onehot[np.arange(len(data)), cols] = 1.0
        blocks.append(onehot)
    x = np.hstack(blocks) if len(data) else np.zeros((0, meta.width))
    return EncodedDataset(x, data.labels.copy(), data.categories, data.ids.copy(), meta)


# -- tasks ------------------------------------------------------------------


@dataclass
class TaskSpec:
    positive: tuple[str, ...] = ("r2l",)
    negatives: tuple[tuple[str, ...], ...] = (("normal",),)
    n_pos_prior: int = 900
    n_neg_prior: int = 30000
    n_pos_unlabeled: int | None = None  # None -> every remaining positive
    n_neg_unlabeled: int | None = None
    batch_size: int = 64
    name: str = "kdd-r2l"


@dataclass
class Task:
    name: str
    prior: LabeledPrior
    unlabeled: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    batch_size: int
    class_names: tuple[str, ...] = SUP_CLASSES
    manifest: dict = field(default_factory=dict)
    ids: dict[str, np.ndarray] = field(default_factory=dict)


NEGATIVE_SLOTS = (D, N, H)


def _split_counts(n_avail: int, n_prior: int, n_unl: int | None, what: str) -> tuple[int, int]:
    if n_prior > n_avail:
        raise ValueError(f"{what}: {n_prior} labeled requested, only {n_avail} available")
    rest = n_avail - n_prior
    n_unl = rest if n_unl is None else n_unl
    if n_unl > rest:
        raise ValueError(f"{what}: {n_unl} unlabeled requested, only {rest} left after the prior")
    return n_prior, n_unl


def build_task(train: EncodedDataset, test: EncodedDataset | None, spec: TaskSpec, seed: int = 0) -> Task:
    """Split ``train`` into a labeled prior and an unlabeled pool; label ``test`` in the 5-class space.

    Negative category groups map to D, N, H in order (one group -> single negative class D).
    """
    if not 1 <= len(spec.negatives) <= 3:
        raise ValueError("between one and three negative groups are supported")
    rng = np.random.default_rng(seed)
    cats = train.categories
    slots = {R: np.isin(cats, spec.positive)}
    for slot, group in zip(NEGATIVE_SLOTS, spec.negatives):
        slots[slot] = np.isin(cats, group)
    n_neg_groups = len(spec.negatives)
    prior, unl_idx, prior_ids = {}, [], []
    manifest = {"task": spec.name, "seed": seed, "positive": "+".join(spec.positive),
                "negatives": "|".join("+".join(g) for g in spec.negatives), "batch_size": spec.batch_size}
    for slot, mask in slots.items():
        idx = rng.permutation(np.nonzero(mask)[0])
        if slot == R:
            n_p, n_u = _split_counts(len(idx), spec.n_pos_prior, spec.n_pos_unlabeled, f"positive {spec.positive}")
        else:
            # labeled/unlabeled negative budgets are shared across groups in proportion to their size
            share = len(idx) / max(sum(int(slots[s].sum()) for s in NEGATIVE_SLOTS[:n_neg_groups]), 1)
            n_prior = int(round(spec.n_neg_prior * share)) if n_neg_groups > 1 else spec.n_neg_prior
            n_unl = None if spec.n_neg_unlabeled is None else (
                int(round(spec.n_neg_unlabeled * share)) if n_neg_groups > 1 else spec.n_neg_unlabeled)
            n_p, n_u = _split_counts(len(idx), n_prior, n_unl, f"negative {SUP_CLASSES[slot]}")
        prior[slot] = train.x[idx[:n_p]]
        prior_ids.append(train.ids[idx[:n_p]])
        unl_idx.append(idx[n_p:n_p + n_u])
        manifest[f"prior_{SUP_CLASSES[slot]}"] = n_p
        manifest[f"unlabeled_{SUP_CLASSES[slot]}"] = n_u
    unl_idx = rng.permutation(np.concatenate(unl_idx))
    if test is not None:
        tcats = test.categories
        keep = np.isin(tcats, spec.positive)
        test_y = np.full(len(test.x), -1)
        test_y[keep] = R
        for slot, group in zip(NEGATIVE_SLOTS, spec.negatives):
            m = np.isin(tcats, group)
            test_y[m] = slot
            keep |= m
        test_x, test_y, test_ids = test.x[keep], test_y[keep], test.ids[keep]
    else:
        test_x, test_y, test_ids = np.zeros((0, train.x.shape[1])), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    manifest["unlabeled_total"] = len(unl_idx)
    manifest["test_total"] = len(test_y)
    manifest["encoder_checksum"] = train.meta.checksum()
    return Task(
        spec.name, LabeledPrior(prior), train.x[unl_idx], test_x, test_y.astype(np.int64),
        spec.batch_size, manifest=manifest,
        ids={"prior": np.concatenate(prior_ids), "unlabeled": train.ids[unl_idx], "test": test_ids},
    )


def rare_class_spec(positive: str = "r2l") -> TaskSpec:
    return TaskSpec(positive=(positive,), negatives=(("normal",),), name=f"kdd-{positive}")


def build_rare_class_task(train: EncodedDataset, test: EncodedDataset | None, positive: str = "r2l",
                          seed: int = 0, **overrides) -> Task:
    """Positive rare category against the normal class only; 900/30k labeled, the rest unlabeled."""
    spec = dataclasses.replace(rare_class_spec(positive), **overrides)
    return build_task(train, test, spec, seed)


# prior fractions of the rare-class recipe (900 of 999 positives, 30k of ~97k negatives)
POS_PRIOR_FRACTION = 900 / 999
NEG_PRIOR_FRACTION = 30000 / 97278


def imbalance_spec(train: EncodedDataset) -> TaskSpec:
    cats = train.categories
    n_pos = int(np.sum(cats == "normal"))
    n_neg = int(np.sum(cats != "normal"))
    return TaskSpec(
        positive=("normal",),
        negatives=(("dos",), ("probe",), ("r2l", "u2r")),
        n_pos_prior=int(round(POS_PRIOR_FRACTION * n_pos)),
        n_neg_prior=int(round(NEG_PRIOR_FRACTION * n_neg)),
        batch_size=64,
        name="kdd-imbalance",
    )


def build_imbalance_task(train: EncodedDataset, test: EncodedDataset | None, seed: int = 0) -> Task:
    """``normal`` is the positive class; every intrusion category is negative (DoS / Probe / R2L+U2R)."""
    return build_task(train, test, imbalance_spec(train), seed)


def manifest_text(manifest: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in manifest.items())


# -- synthetic data ---------------------------------------------------------

SYNTH_CLASSES = SUP_CLASSES  # U here is an unseen negative component, never in the labeled prior


@dataclass
class SyntheticSpec:
    """Per-class diagonal Gaussians. Dimension roles describe how D, N and H relate."""

    dims: int
    proportions: dict[str, float]
    means: dict[str, list[float]]
    stds: dict[str, list[float]]
    noise_rate: float = 0.3
    overlapping_dims: tuple[int, ...] = ()
    partial_dims: tuple[int, ...] = ()
    separated_dims: tuple[int, ...] = ()

    def __post_init__(self):
        for c in self.proportions:
            if c not in SYNTH_CLASSES:
                raise ValueError(f"unknown class {c!r}")
            if len(self.means[c]) != self.dims or len(self.stds[c]) != self.dims:
                raise ValueError(f"class {c}: means/stds must have {self.dims} entries")
            if min(self.stds[c]) <= 0:
                raise ValueError(f"class {c}: stds must be positive")
        if abs(sum(self.proportions.values()) - 1.0) > 1e-9:
            raise ValueError("class proportions must sum to 1")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")

    def to_text(self) -> str:
        lines = [f"dims = {self.dims}", f"noise_rate = {self.noise_rate}"]
        for key in ("overlapping_dims", "partial_dims", "separated_dims"):
            lines.append(f"{key} = {','.join(map(str, getattr(self, key)))}")
        for c in self.proportions:
            lines.append(f"proportion.{c} = {self.proportions[c]!r}")
            lines.append(f"mean.{c} = {','.join(repr(float(v)) for v in self.means[c])}")
            lines.append(f"std.{c} = {','.join(repr(float(v)) for v in self.stds[c])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        kv = parse_kv(text)
        floats = lambda s: [float(v) for v in s.split(",") if v.strip()]
        ints = lambda s: tuple(int(v) for v in s.split(",") if v.strip())
        props, means, stds = {}, {}, {}
        for k, v in kv.items():
            if k.startswith("proportion."):
                props[k.split(".", 1)[1]] = float(v)
            elif k.startswith("mean."):
                means[k.split(".", 1)[1]] = floats(v)
            elif k.startswith("std."):
                stds[k.split(".", 1)[1]] = floats(v)
        return cls(
            int(kv["dims"]), props, means, stds, float(kv.get("noise_rate", 0.3)),
            ints(kv.get("overlapping_dims", "")), ints(kv.get("partial_dims", "")),
            ints(kv.get("separated_dims", "")),
        )


def default_synthetic_spec(noise_rate: float = 0.3) -> SyntheticSpec:
    """Eight dimensions; positives (R) sit inside the negatives' joint support.

    dim 0: D/N/H overlap completely; dim 1: D/N/H separated by >= 8 std;
    dim 2: partial overlap; dims 3-4: R sits 1.5 std above H, inside its tail;
    dims 5-7: shared background. R otherwise copies H, so its density is nested
    in H's support. U is a negative mode never seen in the prior, between N and
    H on dim 1.
    """
    means = {
        "D": [0.50, 0.10, 0.30, 0.30, 0.30, 0.40, 0.50, 0.60],
        "N": [0.50, 0.50, 0.45, 0.35, 0.35, 0.50, 0.50, 0.50],
        "H": [0.50, 0.90, 0.60, 0.50, 0.50, 0.60, 0.50, 0.40],
        "R": [0.50, 0.90, 0.60, 0.65, 0.65, 0.60, 0.50, 0.40],
        "U": [0.50, 0.70, 0.50, 0.40, 0.40, 0.50, 0.50, 0.50],
    }
    stds = {
        "D": [0.10, 0.05, 0.10, 0.10, 0.10, 0.10, 0.10, 0.10],
        "N": [0.10, 0.05, 0.10, 0.10, 0.10, 0.10, 0.10, 0.10],
        "H": [0.10, 0.05, 0.10, 0.10, 0.10, 0.10, 0.10, 0.10],
        "R": [0.10, 0.06, 0.08, 0.06, 0.06, 0.10, 0.10, 0.10],
        "U": [0.10, 0.06, 0.10, 0.08, 0.08, 0.10, 0.10, 0.10],
    }
    props = {"D": 0.45, "N": 0.30, "H": 0.15, "R": 0.02, "U": 0.08}
    return SyntheticSpec(8, props, means, stds, noise_rate, (0,), (2,), (1,))


@dataclass
class SyntheticData:
    x: np.ndarray
    y: np.ndarray  # generating component, index into SUP_CLASSES
    noisy_y: np.ndarray  # label after negative-subclass noise


def generate_synthetic(spec: SyntheticSpec, n: int, seed: int = 0, classes: dict[str, int] | None = None) -> SyntheticData:
    """Draw ``n`` samples (or exact per-class counts via ``classes``) with ground-truth labels.

    With ``noise_rate`` > 0 each D/N/H label is replaced, with that probability,
    by one of the other two negative subclasses in ``noisy_y``.
    """
    rng = np.random.default_rng(seed)
    names = list(spec.proportions)
    if classes is None:
        counts = rng.multinomial(n, [spec.proportions[c] for c in names])
        classes = dict(zip(names, counts.tolist()))
    xs, ys = [], []
    for c, k in classes.items():
        mu = np.asarray(spec.means[c])
        sd = np.asarray(spec.stds[c])
        xs.append(mu + sd * rng.standard_normal((k, spec.dims)))
        ys.append(np.full(k, SYNTH_CLASSES.index(c)))
    x = np.concatenate(xs) if xs else np.zeros((0, spec.dims))
    y = np.concatenate(ys).astype(np.int64) if ys else np.zeros(0, dtype=np.int64)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    noisy = y.copy()
    if spec.noise_rate > 0:
        neg = np.isin(y, NEGATIVE_SLOTS)
        flip = neg & (rng.random(len(y)) < spec.noise_rate)
        shift = rng.integers(1, 3, size=len(y))
        noisy[flip] = (y[flip] + shift[flip]) % 3
    return SyntheticData(x, y, noisy)


def build_synthetic_task(spec: SyntheticSpec, seed: int = 0, n_prior_neg: int = 200, n_prior_pos: int = 150,
                         n_unlabeled: int = 20000, n_test_neg: int = 150, n_test_pos: int = 52,
                         batch_size: int = 32) -> Task:
    """Weak prior (noisy D/N/H labels, clean R) + unlabeled pool + clean test set including unseen U negatives."""
    s_prior, s_unl, s_test = np.random.SeedSequence(seed).spawn(3)
    prior_counts = {"D": n_prior_neg, "N": n_prior_neg, "H": n_prior_neg, "R": n_prior_pos}
    pr = generate_synthetic(spec, 0, s_prior, prior_counts)
    prior = LabeledPrior({c: pr.x[pr.noisy_y == c] for c in (D, N, H, R)})
    unl = generate_synthetic(spec, n_unlabeled, s_unl)
    test_counts = {c: n_test_neg for c in ("D", "N", "H", "U") if c in spec.proportions}
    test_counts["R"] = n_test_pos
    te = generate_synthetic(dataclasses.replace(spec, noise_rate=0.0), 0, s_test, test_counts)
    manifest = {"task": "synthetic", "seed": seed, "noise_rate": spec.noise_rate,
                "prior_per_negative": n_prior_neg, "prior_R": n_prior_pos,
                "unlabeled_total": n_unlabeled, "test_total": len(te.y), "batch_size": batch_size}
    return Task("synthetic", prior, unl.x, te.x, te.y, batch_size, manifest=manifest)


def write_labeled_csv(path, x: np.ndarray, y: np.ndarray, names=None, label_names=SUP_CLASSES) -> None:
    names = names or [f"x{i}" for i in range(x.shape[1])]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", *names])
        for row, lab in zip(x, y):
            w.writerow([label_names[lab], *(repr(float(v)) for v in row)])


def read_labeled_csv(path, label_names=SUP_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        rows = list(reader)
    y = np.array([label_names.index(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return x, y
