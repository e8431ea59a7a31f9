"""Discriminator and generator objectives.

Every loss takes head probabilities (or tapped features) and, with
``with_grad=True``, also returns the gradient with respect to that input, so
the trainer can push it back through ``Discriminator.backward``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import D, F, H, K, N, R, U, UNK

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NEGATIVE_CLASSES = (D, N, H)


@dataclass(frozen=True)
class LeewayConfig:
    """Weight ``alpha`` on the known-label term; ``1 - alpha`` goes to the forced-Unknown term."""

    alpha: float = 0.65

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def leeway(self) -> float:
        return 1.0 - self.alpha


@dataclass(frozen=True)
class GenLossConfig:
    epsilon: float = 0.75
    w_pull_away: float = 1.0
    w_low_density: float = 1.0
    w_feature_matching: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a (rows, classes) probability matrix, got shape {p.shape}")
    return p


def cce(probs, targets, with_grad: bool = False):
    """Mean negative log-probability of each row's target column.

    ``targets`` is an int array of column indices, or a single int applied to
    every row. Probabilities are floored at 1e-12 before the log; the floored
    entries receive zero gradient.
    """
    p = _check_probs(probs)
    n, c = p.shape
    t = np.broadcast_to(np.asarray(targets), (n,)).astype(np.int64)
    if n == 0:
        raise ValueError("cce needs at least one row")
    if np.any((t < 0) | (t >= c)):
        raise IndexError(f"target index out of range for {c} classes")
    rows = np.arange(n)
    picked = p[rows, t]
    clamped = np.maximum(picked, PROB_FLOOR)
    value = float(-np.mean(np.log(clamped)))
    if not with_grad:
        return value
    grad = np.zeros_like(p)
    grad[rows, t] = np.where(picked > PROB_FLOOR, -1.0 / (n * clamped), 0.0)
    return value, grad


def soft_positive_recall(sup_probs, positive_rows, with_grad: bool = False):
    """Mean P(R) over the positive rows: a differentiable stand-in for positive-class recall."""
    p = _check_probs(sup_probs)
    mask = np.asarray(positive_rows, dtype=bool)
    k = int(mask.sum())
    if k == 0:
        raise ValueError("positive mask selects no rows")
    value = float(p[mask, R].mean())
    if not with_grad:
        return value
    grad = np.zeros_like(p)
    grad[mask, R] = 1.0 / k
    return value, grad


def hard_positive_recall(sup_probs, positive_rows) -> float:
    p = _check_probs(sup_probs)
    mask = np.asarray(positive_rows, dtype=bool)
    if not mask.any():
        raise ValueError("positive mask selects no rows")
    return float(np.mean(np.argmax(p[mask], axis=1) == R))


def loss_sup_positive(sup_probs, positive_rows, reward_weight: float = 1.0, with_grad: bool = False):
    """CCE of positive rows against R minus ``reward_weight`` times the soft recall reward."""
    p = _check_probs(sup_probs)
    mask = np.asarray(positive_rows, dtype=bool)
    if not mask.any():
        raise ValueError("positive mask selects no rows")
    ce = cce(p[mask], R, with_grad=with_grad)
    rec = soft_positive_recall(p, mask, with_grad=with_grad)
    if not with_grad:
        return ce - reward_weight * rec
    grad = -reward_weight * rec[1]
    grad[mask] += ce[1]
    return ce[0] - reward_weight * rec[0], grad


def loss_sup_negative(sup_probs, labels, cfg: LeewayConfig = LeewayConfig(), with_grad: bool = False):
    """alpha * CCE(true known-negative class) + (1 - alpha) * CCE(forced U)."""
    p = _check_probs(sup_probs)
    y = np.asarray(labels).astype(np.int64)
    if y.shape != (p.shape[0],):
        raise ValueError(f"{y.shape[0] if y.ndim else 1} labels for {p.shape[0]} rows")
    if not np.all(np.isin(y, NEGATIVE_CLASSES)):
        raise ValueError("negative loss accepts only D, N or H labels")
    a = cfg.alpha
    known = cce(p, y, with_grad=with_grad)
    if a == 1.0:
        return known
    unk = cce(p, U, with_grad=with_grad)
    if not with_grad:
        return a * known + (1 - a) * unk
    return a * known[0] + (1 - a) * unk[0], a * known[1] + (1 - a) * unk[1]


def loss_unsup_real(unsup_probs, cfg: LeewayConfig = LeewayConfig(), with_grad: bool = False):
    """Unlabeled real rows: alpha * CCE(K) + (1 - alpha) * CCE(U)."""
    p = _check_probs(unsup_probs)
    if p.shape[1] != 3:
        raise ValueError("unsupervised head has exactly 3 columns (K, U, F)")
    a = cfg.alpha
    known = cce(p, K, with_grad=with_grad)
    if a == 1.0:
        return known
    unk = cce(p, UNK, with_grad=with_grad)
    if not with_grad:
        return a * known + (1 - a) * unk
    return a * known[0] + (1 - a) * unk[0], a * known[1] + (1 - a) * unk[1]


def loss_unsup_fake(unsup_probs, with_grad: bool = False):
    p = _check_probs(unsup_probs)
    if p.shape[1] != 3:
        raise ValueError("unsupervised head has exactly 3 columns (K, U, F)")
    return cce(p, F, with_grad=with_grad)


def loss_unsup_total(real_loss: float, fake_loss: float) -> float:
    return 0.5 * (real_loss + fake_loss)


def gen_pull_away(features, with_grad: bool = False):
    """Mean squared cosine similarity over ordered pairs of distinct feature rows.

    Rows with zero norm are dropped (with a warning) and get zero gradient.
    """
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1)
    keep = norms > 0
    if not keep.all():
        log.warning("pull-away term: excluding %d zero-norm feature rows", int((~keep).sum()))
    m = int(keep.sum())
    if m < 2:
        if f.shape[0] < 2:
            raise ValueError("pull-away term needs a batch of at least 2 rows")
        return (0.0, np.zeros_like(f)) if with_grad else 0.0
    fk = f[keep]
    nk = norms[keep][:, None]
    unit = fk / nk
    sim = unit @ unit.T
    pairs = m * (m - 1)
    off = sim * sim
    value = float((off.sum() - np.trace(off)) / pairs)
    if not with_grad:
        return value
    d_sim = 2.0 * sim / pairs
    np.fill_diagonal(d_sim, 0.0)
    d_unit = 2.0 * d_sim @ unit
    d_fk = (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / nk
    grad = np.zeros_like(f)
    grad[keep] = d_fk
    return value, grad


def confidence(sup_probs) -> np.ndarray:
    """Max supervised-class probability per row: the p(x) of the low-density term."""
    return _check_probs(sup_probs).max(axis=1)


def gen_low_density(sup_probs, cfg: GenLossConfig = GenLossConfig(), with_grad: bool = False):
    """Mean over rows of log p(x) * [p(x) > epsilon], p(x) the max class probability.

    The value is <= 0. It is added as written to the minimized generator
    objective, so its gradient pushes confident generated samples below epsilon.
    """
    p = _check_probs(sup_probs)
    n = p.shape[0]
    top = np.argmax(p, axis=1)
    conf = p[np.arange(n), top]
    on = conf > cfg.epsilon
    value = float(np.sum(np.log(conf[on])) / n) if n else 0.0
    if not with_grad:
        return value
    grad = np.zeros_like(p)
    rows = np.nonzero(on)[0]
    grad[rows, top[rows]] = 1.0 / (n * conf[rows])
    return value, grad


def gen_feature_matching(f_fake, f_real, with_grad: bool = False):
    """Squared distance between column means of fake and real tapped features."""
    a = np.asarray(f_fake, dtype=np.float64)
    b = np.asarray(f_real, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a.mean(axis=0) - b.mean(axis=0)
    value = float(diff @ diff)
    if not with_grad:
        return value
    return value, np.broadcast_to(2.0 * diff / a.shape[0], a.shape).copy()


def gen_total_loss(pull_away: float, low_density: float, feature_matching: float,
                   cfg: GenLossConfig = GenLossConfig()) -> float:
    return (cfg.w_pull_away * pull_away + cfg.w_low_density * low_density
            + cfg.w_feature_matching * feature_matching)
