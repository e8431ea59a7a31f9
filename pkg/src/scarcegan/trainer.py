"""ScarceGAN training loop.

One ``train_step`` runs four phases in a fixed order:

1. ``sup``        discriminator update on the labeled batch (positive + leeway-negative losses)
2. ``unsup_real`` discriminator update on an unlabeled real batch (K/U split)
3. ``unsup_fake`` discriminator update on a fresh generated batch (target F)
4. ``gen``        generator update against the frozen discriminator
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from .model import D, H, K, N, R, SUP_CLASSES, Discriminator, Generator, build_models, model_arrays, model_header
from .nn import Adam, LRSchedule, adam_arrays, adam_from_arrays, read_arrays, write_arrays

log = logging.getLogger(__name__)

ABLATIONS = ("full", "vanilla_ssgan", "two_class", "no_bad_generator", "no_leeway")
PHASES = ("sup", "unsup_real", "unsup_fake", "gen")


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    epochs: int = 0  # > 0 overrides steps with epochs * ceil(n_unlabeled / batch_size)
    seed: int = 0
    alpha: float = 0.65
    alpha_schedule: str = "constant"  # "constant" | "linear"
    alpha_end: float = 0.65
    epsilon: float = 0.75
    w_pull_away: float = 1.0
    w_low_density: float = 1.0
    w_feature_matching: float = 1.0
    reward_weight: float = 1.0
    lr: float = 1e-3
    lr_decay_rate: float = 0.96
    lr_decay_steps: int = 1000
    beta1: float = 0.5
    beta2: float = 0.9
    ablation: str = "full"
    disc_widths: tuple[int, ...] = (128, 64, 32)
    feature_tap: int = -1
    gen_hidden: int = 64
    noise_dim: int = 0  # 0 -> data width

    def __post_init__(self):
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.alpha_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown alpha_schedule {self.alpha_schedule!r}")
        L.LeewayConfig(self.alpha)
        L.LeewayConfig(self.alpha_end)
        if self.batch_size % self.n_sup_classes:
            raise ValueError(
                f"batch_size {self.batch_size} is not divisible by {self.n_sup_classes} supervised classes"
            )

    @property
    def n_sup_classes(self) -> int:
        return 2 if self.ablation == "two_class" else 4

    @property
    def uses_leeway(self) -> bool:
        return self.ablation not in ("no_leeway", "vanilla_ssgan")

    @property
    def uses_complement_generator(self) -> bool:
        return self.ablation not in ("no_bad_generator", "vanilla_ssgan")

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr, self.lr_decay_rate, self.lr_decay_steps)

    def gen_loss_config(self) -> L.GenLossConfig:
        return L.GenLossConfig(self.epsilon, self.w_pull_away, self.w_low_density, self.w_feature_matching)

    def alpha_at(self, step: int, total: int) -> float:
        if not self.uses_leeway:
            return 1.0
        if self.alpha_schedule == "constant" or total <= 1:
            return self.alpha
        frac = min(step / (total - 1), 1.0)
        return self.alpha + (self.alpha_end - self.alpha) * frac

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["disc_widths"] = list(self.disc_widths)
        return d

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(value: str, typ):
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    if typ in (str, "str"):
        return value
    # tuple[int, ...]
    return tuple(int(v) for v in value.replace(" ", "").split(",") if v)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_kv(kv: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for k, v in kv.items():
        if k not in types:
            raise KeyError(f"unknown TrainConfig key {k!r}")
        updates[k] = _coerce(v, types[k])
    return dataclasses.replace(base, **updates)


def load_config(path) -> TrainConfig:
    return config_from_kv(parse_kv(Path(path).read_text()))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class LabeledPrior:
    """Labeled feature matrices keyed by supervised class index (D, N, H, R)."""

    samples: dict[int, np.ndarray]

    def __post_init__(self):
        if not self.samples:
            raise ValueError("labeled prior is empty")
        for c, x in self.samples.items():
            if c not in (D, N, H, R):
                raise ValueError(f"prior class {SUP_CLASSES[c] if 0 <= c < 5 else c} is not a labeled class")
            if len(x) == 0:
                raise ValueError(f"prior class {SUP_CLASSES[c]} has no samples")
        if R not in self.samples:
            raise ValueError("prior has no positive (R) samples")

    @property
    def classes(self) -> list[int]:
        return sorted(self.samples)

    @property
    def width(self) -> int:
        return next(iter(self.samples.values())).shape[1]

    def collapsed(self) -> "LabeledPrior":
        """Merge D/N/H into a single negative class stored under D."""
        neg = [self.samples[c] for c in (D, N, H) if c in self.samples]
        return LabeledPrior({D: np.concatenate(neg), R: self.samples[R]})

    @classmethod
    def from_arrays(cls, x: np.ndarray, y: np.ndarray) -> "LabeledPrior":
        return cls({int(c): x[y == c] for c in np.unique(y)})


def compose_supervised_batch(prior: LabeledPrior, batch_size: int, rng: np.random.Generator):
    """Equal rows per prior class, shuffled. Undersupplied classes are drawn with replacement
    after every available sample has been used once."""
    classes = prior.classes
    if batch_size % len(classes):
        raise ValueError(f"batch_size {batch_size} not divisible by {len(classes)} prior classes")
    per = batch_size // len(classes)
    xs, ys = [], []
    for c in classes:
        pool = prior.samples[c]
        n = len(pool)
        if n >= per:
            idx = rng.choice(n, size=per, replace=False)
        else:
            idx = np.concatenate([rng.permutation(n), rng.integers(0, n, size=per - n)])
        xs.append(pool[idx])
        ys.append(np.full(per, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(batch_size)
    return x[order], y[order]


@dataclass
class TrainState:
    disc: Discriminator
    gen: Generator
    opt_d: Adam
    opt_g: Adam
    rng: np.random.Generator
    step: int = 0
    total_steps: int = 0
    history: list[tuple[int, str, str, float]] = field(default_factory=list)
    order: np.ndarray | None = None  # unlabeled visiting order for the current epoch
    cursor: int = 0

    def losses(self, term: str) -> np.ndarray:
        return np.array([v for _, _, t, v in self.history if t == term])


def init_state(cfg: TrainConfig, width: int) -> TrainState:
    ss = np.random.SeedSequence(cfg.seed)
    d_ss, g_ss, r_ss = ss.spawn(3)
    d_seed = int(d_ss.generate_state(1)[0])
    g_seed = int(g_ss.generate_state(1)[0])
    disc = Discriminator(width, cfg.disc_widths, cfg.feature_tap, seed=d_seed)
    gen = Generator(cfg.noise_dim or width, width, cfg.gen_hidden, seed=g_seed)
    return TrainState(
        disc, gen,
        Adam(cfg.beta1, cfg.beta2), Adam(cfg.beta1, cfg.beta2),
        np.random.default_rng(r_ss),
    )


def _next_unlabeled(state: TrainState, unlabeled: np.ndarray, batch_size: int) -> np.ndarray:
    n = len(unlabeled)
    idx = []
    while len(idx) < batch_size:
        if state.order is None or state.cursor >= len(state.order):
            state.order = state.rng.permutation(n)
            state.cursor = 0
        take = min(batch_size - len(idx), len(state.order) - state.cursor)
        idx.extend(state.order[state.cursor:state.cursor + take].tolist())
        state.cursor += take
    return unlabeled[np.asarray(idx, dtype=np.int64)]


def _record(state: TrainState, phase: str, term: str, value: float) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss term {term!r} ({value}) at step {state.step}, phase {phase}")
    state.history.append((state.step, phase, term, float(value)))


def supervised_loss(sup: np.ndarray, y: np.ndarray, cfg: TrainConfig, alpha: float):
    """Value, gradient w.r.t. supervised probs, and per-term values for one labeled batch."""
    if cfg.ablation == "vanilla_ssgan":
        v, g = L.cce(sup, y, with_grad=True)
        return v, g, {"L_sup_cce": v}
    pos = y == R
    neg = ~pos
    grad = np.zeros_like(sup)
    lp, gp = L.loss_sup_positive(sup, pos, cfg.reward_weight, with_grad=True)
    grad += gp
    ln, gn = L.loss_sup_negative(sup[neg], y[neg], L.LeewayConfig(alpha), with_grad=True)
    grad[neg] += gn
    return lp + ln, grad, {"L_sup_pos": lp, "L_sup_neg": ln}


def generator_loss(disc: Discriminator, fake: np.ndarray, real: np.ndarray, cfg: TrainConfig):
    """Generator objective on ``fake``; returns value, gradient w.r.t. ``fake``, per-term values,
    and the discriminator gradients (computed but never applied)."""
    if not cfg.uses_complement_generator:
        out = disc.forward(fake, head="unsupervised")
        v, g = L.cce(out.unsup, K, with_grad=True)
        d_grads, dx = disc.backward(d_unsup=g)
        return v, dx, {"L_gen_cce": v}, d_grads
    gcfg = cfg.gen_loss_config()
    f_real = disc.forward(real, head="supervised").features.copy()
    out = disc.forward(fake, head="supervised")
    pa, g_pa = L.gen_pull_away(out.features, with_grad=True)
    ld, g_ld = L.gen_low_density(out.sup, gcfg, with_grad=True)
    fm, g_fm = L.gen_feature_matching(out.features, f_real, with_grad=True)
    total = L.gen_total_loss(pa, ld, fm, gcfg)
    d_feat = gcfg.w_pull_away * g_pa + gcfg.w_feature_matching * g_fm
    d_grads, dx = disc.backward(d_sup=gcfg.w_low_density * g_ld, d_feat=d_feat)
    return total, dx, {"pull_away": pa, "low_density": ld, "feature_matching": fm, "L_gen": total}, d_grads


def train_step(state: TrainState, prior: LabeledPrior, unlabeled: np.ndarray, cfg: TrainConfig) -> dict[str, float]:
    """Run one four-phase update; returns this step's loss terms."""
    disc, gen = state.disc, state.gen
    lr = cfg.schedule().rate(state.step)
    alpha = cfg.alpha_at(state.step, state.total_steps)
    terms = {}
    bs = cfg.batch_size

    # 1. supervised discriminator
    xs, ys = compose_supervised_batch(prior, bs, state.rng)
    out = disc.forward(xs, head="supervised")
    v, g, parts = supervised_loss(out.sup, ys, cfg, alpha)
    grads, _ = disc.backward(d_sup=g)
    if cfg.ablation != "vanilla_ssgan":
        _record(state, "sup", "recall_soft", L.soft_positive_recall(out.sup, ys == R))
        _record(state, "sup", "recall_hard", L.hard_positive_recall(out.sup, ys == R))
    for k, val in parts.items():
        _record(state, "sup", k, val)
    _record(state, "sup", "L_sup", v)
    disc_params = disc.params()
    state.opt_d.step(disc_params, grads, lr)
    terms.update(parts, L_sup=v)

    # 2. unsupervised discriminator, real batch first
    xu = _next_unlabeled(state, unlabeled, bs)
    out = disc.forward(xu, head="unsupervised")
    v_real, g = L.loss_unsup_real(out.unsup, L.LeewayConfig(alpha), with_grad=True)
    grads, _ = disc.backward(d_unsup=0.5 * g)
    _record(state, "unsup_real", "L_us_real", v_real)
    state.opt_d.step(disc_params, grads, lr)

    # 3. then a fresh fake batch
    fake = gen.forward(_noise(state, gen, bs), train=True)
    out = disc.forward(fake, head="unsupervised")
    v_fake, g = L.loss_unsup_fake(out.unsup, with_grad=True)
    grads, _ = disc.backward(d_unsup=0.5 * g)
    _record(state, "unsup_fake", "L_us_fake", v_fake)
    _record(state, "unsup_fake", "L_us", L.loss_unsup_total(v_real, v_fake))
    state.opt_d.step(disc_params, grads, lr)
    terms.update(L_us_real=v_real, L_us_fake=v_fake, L_us=L.loss_unsup_total(v_real, v_fake))

    # 4. generator, discriminator frozen
    fake = gen.forward(_noise(state, gen, bs), train=True)
    v_gen, dx, parts, _ = generator_loss(disc, fake, xu, cfg)
    g_grads, _ = gen.backward(dx)
    for k, val in parts.items():
        _record(state, "gen", k, val)
    state.opt_g.step(gen.params(), g_grads, lr)
    terms.update(parts)

    state.step += 1
    return terms


def _noise(state: TrainState, gen: Generator, n: int) -> np.ndarray:
    return state.rng.standard_normal((n, gen.noise_dim))


def total_steps(cfg: TrainConfig, n_unlabeled: int) -> int:
    if cfg.epochs > 0:
        return cfg.epochs * math.ceil(n_unlabeled / cfg.batch_size)
    return cfg.steps


def prepare_prior(prior: LabeledPrior, cfg: TrainConfig) -> LabeledPrior:
    if cfg.ablation == "two_class" and len(prior.classes) > 2:
        return prior.collapsed()
    return prior


def train(cfg: TrainConfig, prior: LabeledPrior, unlabeled: np.ndarray, state: TrainState | None = None,
          callback: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Train for the configured step budget (or resume ``state`` up to it)."""
    unlabeled = np.asarray(unlabeled, dtype=np.float64)
    if len(unlabeled) == 0:
        raise ValueError("unlabeled set is empty")
    prior = prepare_prior(prior, cfg)
    if cfg.batch_size % len(prior.classes):
        raise ValueError(f"batch_size {cfg.batch_size} not divisible by {len(prior.classes)} prior classes")
    if prior.width != unlabeled.shape[1]:
        raise ValueError(f"prior width {prior.width} != unlabeled width {unlabeled.shape[1]}")
    if state is None:
        state = init_state(cfg, unlabeled.shape[1])
    state.total_steps = total_steps(cfg, len(unlabeled))
    while state.step < state.total_steps:
        terms = train_step(state, prior, unlabeled, cfg)
        if callback is not None:
            callback(state, terms)
        if state.step % 500 == 0:
            log.debug("step %d %s", state.step, {k: round(v, 4) for k, v in terms.items()})
    return state


# -- persistence ------------------------------------------------------------


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(st: dict) -> np.random.Generator:
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    arrays = model_arrays(state.disc, state.gen)
    arrays.update(adam_arrays(state.opt_d, "optD"))
    arrays.update(adam_arrays(state.opt_g, "optG"))
    if state.order is not None:
        arrays["unlabeled_order"] = state.order.astype(np.float64)
    extra = {
        "config": cfg.to_dict(),
        "step": state.step,
        "total_steps": state.total_steps,
        "cursor": state.cursor,
        "rng": _rng_state_json(state.rng),
        "history": state.history,
    }
    with open(path, "wb") as f:
        write_arrays(f, arrays, model_header(state.disc, state.gen, extra))


def load_state(path) -> tuple[TrainState, TrainConfig]:
    with open(path, "rb") as f:
        header, arrays = read_arrays(f)
    hdr = json.loads(header)
    disc, gen = build_models(hdr, arrays)
    cfg_d = hdr["config"]
    cfg_d["disc_widths"] = tuple(cfg_d["disc_widths"])
    cfg = TrainConfig(**cfg_d)
    state = TrainState(
        disc, gen,
        adam_from_arrays(arrays, "optD", cfg.beta1, cfg.beta2, 1e-8),
        adam_from_arrays(arrays, "optG", cfg.beta1, cfg.beta2, 1e-8),
        _rng_from_json(hdr["rng"]),
        step=hdr["step"],
        total_steps=hdr["total_steps"],
        history=[tuple(h) for h in hdr["history"]],
        order=arrays["unlabeled_order"].astype(np.int64) if "unlabeled_order" in arrays else None,
        cursor=hdr["cursor"],
    )
    return state, cfg


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "phase", "term", "value"])
    for step, phase, term, value in history:
        w.writerow([step, phase, term, repr(value)])
    return buf.getvalue()
