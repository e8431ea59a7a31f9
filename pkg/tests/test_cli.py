import csv
import hashlib
import json

import numpy as np
import pytest

from scarcegan import cli


def md5(p):
    return hashlib.md5(p.read_bytes()).hexdigest()


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["synth", "--n", "300", "--seed", "4", "--out", str(a)]) == 0
    assert cli.main(["synth", "--n", "300", "--seed", "4", "--out", str(b)]) == 0
    assert md5(a) == md5(b)
    assert len(a.read_text().splitlines()) == 301


def test_featurize(tmp_path):
    src = tmp_path / "series.csv"
    rng = np.random.default_rng(0)
    with open(src, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "counter_name", "day_index", "value"])
        for d, v in enumerate(rng.uniform(0, 3, 21)):
            w.writerow(["s1", "loss", d, v])
    out = tmp_path / "f.csv"
    assert cli.main(["featurize", "--in", str(src), "--out", str(out), "--counters", "loss"]) == 0
    assert len(out.read_text().splitlines()) == 2


def test_train_eval_experiment_report(tmp_path, capsys):
    fast = ["--set", "steps=10", "--set", "disc_widths=8,8", "--set", "gen_hidden=8"]
    ckpt = tmp_path / "m.sgnn"
    assert cli.main(["train", "--out", str(ckpt), "--history", str(tmp_path / "h.csv"),
                     "--manifest", str(tmp_path / "m.txt"), *fast]) == 0
    assert ckpt.exists() and (tmp_path / "h.csv").read_text().startswith("step")
    ev = tmp_path / "eval.json"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--out", str(ev)]) == 0
    assert set(json.loads(ev.read_text())) >= {"precision", "recall", "confusion"}

    rep = tmp_path / "rep.json"
    assert cli.main(["experiment", "--runs", "2", "--out", str(rep), *fast]) == 0
    report = json.loads(rep.read_text())
    assert report["n_runs"] == 2 and report["config"]["seeds"] == [0, 1]
    capsys.readouterr()
    assert cli.main(["report", "--in", str(rep), "--out", str(tmp_path / "t.txt")]) == 0
    assert "mean" in capsys.readouterr().out


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as e:
        cli.main(["synth", "--n", "3", "--out", "x.csv", "--bogus"])
    assert e.value.code != 0


def test_bad_override_is_an_error(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "m"), "--set", "nonsense"]) == 2


def test_kdd_without_data(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.ENV_TRAIN, raising=False)
    monkeypatch.delenv(cli.ENV_TEST, raising=False)
    assert cli.main(["experiment", "--task", "kdd-r2l", "--out", str(tmp_path / "r.json")]) == 2
    assert cli.ENV_TRAIN in capsys.readouterr().err
