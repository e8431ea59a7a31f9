import json

import numpy as np
import pytest

from scarcegan import trainer as T
from scarcegan.losses import cce
from scarcegan.model import D, H, N, R
from scarcegan.trainer import (
    LabeledPrior, TrainConfig, compose_supervised_batch, dump_config, history_csv, init_state, load_config,
    load_state, save_state, train, train_step,
)
from scarcegan.nn import arrays_to_bytes
from scarcegan.model import model_arrays

WIDTH = 6
SEPARABLE_FIXTURE = "separable_lsup.json"


def separable_data(seed=0, per_class=60, n_unlabeled=400):
    """Four well-separated Gaussian blobs (D, N, H, R) in [0, 1]^6."""
    rng = np.random.default_rng(seed)
    centers = {D: 0.15, N: 0.4, H: 0.65, R: 0.9}
    prior = {c: np.clip(m + 0.03 * rng.standard_normal((per_class, WIDTH)), 0, 1) for c, m in centers.items()}
    labels = rng.integers(0, 4, n_unlabeled)
    unl = np.clip(np.array([centers[c] for c in labels])[:, None] + 0.03 * rng.standard_normal((n_unlabeled, WIDTH)), 0, 1)
    return LabeledPrior(prior), unl


def small_cfg(**kw):
    base = dict(batch_size=16, steps=20, disc_widths=(8, 8), gen_hidden=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# -- config -------------------------------------------------------------------------


def test_batch_divisibility():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=30)
    TrainConfig(batch_size=30, ablation="two_class")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=31, ablation="two_class")
    with pytest.raises(ValueError):
        TrainConfig(ablation="bogus")


def test_defaults_follow_training_setup():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.alpha) == (32, 0.5, 0.9, 0.75, 0.65)
    assert cfg.disc_widths == (128, 64, 32)


def test_config_file_round_trip(tmp_path):
    cfg = small_cfg(alpha=0.6, ablation="no_bad_generator", disc_widths=(5, 4, 3))
    p = tmp_path / "cfg.txt"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    with pytest.raises(KeyError):
        T.config_from_kv({"nope": "1"})


def test_alpha_schedules():
    assert TrainConfig(ablation="no_leeway").alpha_at(0, 10) == 1.0
    lin = TrainConfig(alpha=0.7, alpha_end=0.6, alpha_schedule="linear")
    assert lin.alpha_at(0, 11) == pytest.approx(0.7) and lin.alpha_at(10, 11) == pytest.approx(0.6)


# -- batch composition ----------------------------------------------------------------------


def test_batch_32_has_8_per_class(rng):
    prior, _ = separable_data()
    x, y = compose_supervised_batch(prior, 32, rng)
    assert x.shape == (32, WIDTH)
    assert all(np.sum(y == c) == 8 for c in (D, N, H, R))
    assert not np.all(y[:8] == y[0])  # shuffled


def test_two_class_batch(rng):
    prior, _ = separable_data()
    x, y = compose_supervised_batch(prior.collapsed(), 32, rng)
    assert np.sum(y == D) == 16 and np.sum(y == R) == 16


def test_undersupplied_class_uses_every_sample(rng):
    prior, _ = separable_data()
    tiny = prior.samples[R][:3]
    x, y = compose_supervised_batch(LabeledPrior({**prior.samples, R: tiny}), 32, rng)
    rows = {tuple(r) for r in x[y == R]}
    assert np.sum(y == R) == 8
    assert rows == {tuple(r) for r in tiny}


def test_prior_validation():
    with pytest.raises(ValueError, match="R"):
        LabeledPrior({D: np.zeros((2, 3)), R: np.zeros((0, 3))})
    with pytest.raises(ValueError):
        LabeledPrior({D: np.zeros((2, 3))})
    with pytest.raises(ValueError):
        LabeledPrior({4: np.zeros((2, 3)), R: np.zeros((2, 3))})


# -- step semantics ------------------------------------------------------------------------


def test_phase_order_in_history():
    prior, unl = separable_data()
    state = train(small_cfg(steps=3), prior, unl)
    for s in range(3):
        phases = [p for step, p, _, _ in state.history if step == s]
        order = [p for i, p in enumerate(phases) if i == 0 or phases[i - 1] != p]
        assert order == list(T.PHASES)


def test_generator_step_leaves_discriminator_unchanged(monkeypatch):
    prior, unl = separable_data()
    cfg = small_cfg()
    state = init_state(cfg, WIDTH)
    snapshots = []
    real_step = state.opt_d.step

    def spy(params, grads, lr):
        real_step(params, grads, lr)
        snapshots.append({k: v.copy() for k, v in params.items()})

    monkeypatch.setattr(state.opt_d, "step", spy)
    g_before = {k: v.copy() for k, v in state.gen.params().items()}
    train_step(state, prior, unl, cfg)
    assert len(snapshots) == 3
    for k, v in state.disc.params().items():
        assert v.tobytes() == snapshots[-1][k].tobytes()
    assert any(not np.array_equal(v, g_before[k]) for k, v in state.gen.params().items())


def test_equal_class_batches_over_a_run(monkeypatch):
    prior, unl = separable_data()
    seen = []
    real = T.compose_supervised_batch

    def spy(p, bs, rng):
        x, y = real(p, bs, rng)
        seen.append(np.bincount(y, minlength=5))
        return x, y

    monkeypatch.setattr(T, "compose_supervised_batch", spy)
    train(small_cfg(steps=15), prior, unl)
    assert len(seen) == 15
    assert all(list(c[:4]) == [4, 4, 4, 4] and c[4] == 0 for c in seen)


def test_no_leeway_negative_loss_is_plain_cce(monkeypatch):
    prior, unl = separable_data()
    checked = []
    real = T.supervised_loss

    def spy(sup, y, cfg, alpha):
        out = real(sup, y, cfg, alpha)
        neg = y != R
        assert out[2]["L_sup_neg"] == cce(sup[neg], y[neg])
        checked.append(alpha)
        return out

    monkeypatch.setattr(T, "supervised_loss", spy)
    train(small_cfg(steps=5, ablation="no_leeway"), prior, unl)
    assert checked == [1.0] * 5


def test_alpha_one_full_equals_no_leeway():
    prior, unl = separable_data()
    a = train(small_cfg(alpha=1.0, alpha_end=1.0), prior, unl)
    b = train(small_cfg(ablation="no_leeway"), prior, unl)
    assert a.history == b.history
    for k, v in a.disc.params().items():
        assert v.tobytes() == b.disc.params()[k].tobytes()


@pytest.mark.parametrize("ablation", T.ABLATIONS)
def test_every_ablation_runs(ablation):
    prior, unl = separable_data()
    state = train(small_cfg(steps=4, ablation=ablation), prior, unl)
    terms = {t for _, _, t, _ in state.history}
    if ablation == "vanilla_ssgan":
        assert "L_sup_cce" in terms and "L_gen_cce" in terms
    elif ablation == "no_bad_generator":
        assert "L_gen_cce" in terms and "L_sup_neg" in terms
    else:
        assert {"pull_away", "low_density", "feature_matching"} <= terms


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_term():
    prior, unl = separable_data()
    with pytest.raises(FloatingPointError, match="L_sup"):
        train(small_cfg(reward_weight=float("inf")), prior, unl)


def test_empty_unlabeled_rejected():
    prior, _ = separable_data()
    with pytest.raises(ValueError):
        train(small_cfg(), prior, np.zeros((0, WIDTH)))


def test_separable_supervised_loss_halves_within_200_steps(fixtures_dir):
    prior, unl = separable_data()
    state = train(TrainConfig(batch_size=32, steps=200, seed=0), prior, unl)
    lsup = state.losses("L_sup")
    first, last = lsup[:10].mean(), lsup[-10:].mean()
    assert last <= 0.5 * first
    ref = json.loads((fixtures_dir / SEPARABLE_FIXTURE).read_text())
    assert first == pytest.approx(ref["first10_mean"], rel=1e-6)
    assert last == pytest.approx(ref["last10_mean"], rel=1e-6, abs=1e-9)


# -- determinism and persistence ---------------------------------------------------------------------


def test_same_seed_identical_checkpoints():
    prior, unl = separable_data()
    a = train(small_cfg(), prior, unl)
    b = train(small_cfg(), prior, unl)
    assert arrays_to_bytes(model_arrays(a.disc, a.gen)) == arrays_to_bytes(model_arrays(b.disc, b.gen))
    assert a.history == b.history


def test_zero_steps_is_initialization():
    prior, unl = separable_data()
    cfg = small_cfg(steps=0)
    state = train(cfg, prior, unl)
    fresh = init_state(cfg, WIDTH)
    assert arrays_to_bytes(model_arrays(state.disc, state.gen)) == arrays_to_bytes(model_arrays(fresh.disc, fresh.gen))
    assert state.history == []


def test_resume_replays_exactly(tmp_path):
    prior, unl = separable_data(n_unlabeled=50)  # several epoch boundaries within 20 steps
    cfg = small_cfg(steps=20)
    full = train(cfg, prior, unl)
    half = train(cfg.replace(steps=9), prior, unl)
    path = tmp_path / "ckpt.sgnn"
    save_state(path, half, cfg.replace(steps=9))
    resumed, cfg2 = load_state(path)
    assert cfg2 == cfg.replace(steps=9)
    resumed = train(cfg, prior, unl, state=resumed)
    assert resumed.history == full.history
    assert arrays_to_bytes(model_arrays(resumed.disc, resumed.gen)) == arrays_to_bytes(model_arrays(full.disc, full.gen))
    for opt_a, opt_b in ((resumed.opt_d, full.opt_d), (resumed.opt_g, full.opt_g)):
        assert opt_a.step_count == opt_b.step_count
        for k in opt_b.m:
            assert opt_a.m[k].tobytes() == opt_b.m[k].tobytes()


def test_checkpoint_file_round_trip_bit_exact(tmp_path):
    prior, unl = separable_data()
    state = train(small_cfg(steps=5), prior, unl)
    p1, p2 = tmp_path / "a", tmp_path / "b"
    save_state(p1, state, small_cfg(steps=5))
    again, cfg = load_state(p1)
    save_state(p2, again, cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_history_csv():
    text = history_csv([(0, "sup", "L_sup", 1.5), (0, "gen", "L_gen", -0.25)])
    assert text.splitlines() == ["step,phase,term,value", "0,sup,L_sup,1.5", "0,gen,L_gen,-0.25"]
