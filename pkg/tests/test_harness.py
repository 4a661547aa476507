import dataclasses
import json
import math

import numpy as np
import pytest

import config
import harness
from errors import ArgumentError, ConfigError, FormatError
from harness import (
    compare,
    config_from_dict,
    evaluate,
    load_checkpoint,
    load_config,
    lr_at,
    read_metrics,
    train,
)


def tiny(out_dir, kind="bn", window=None, seed=0, epochs=2, **extra):
    data = {
        "name": f"{kind}-tiny",
        "dataset": {"kind": "synthetic-gaussian", "train_subset": 32, "eval_subset": 16,
                    "num_classes": 3, "image_shape": [2, 4, 4]},
        "model": "tiny-cnn",
        "normalizer": {"kind": kind, "window": window, "burn_in_epochs": 0.5},
        "batch_size": 4,
        "epochs": epochs,
        "lr": 0.05,
        "seed": seed,
        "out_dir": str(out_dir),
        "progress": False,
    }
    data.update(extra)
    return config_from_dict(data)


def test_lr_examples():
    assert lr_at("cosine", 0.1, 4, 0, 100) == pytest.approx(0.0125)
    assert lr_at("cosine", 0.1, 32, 100, 100) == 0.0
    assert lr_at("cosine", 0.1, 32, 50, 100) == pytest.approx(0.05)
    assert lr_at("step", 0.1, 32, 5, 100, milestones=(10, 20)) == pytest.approx(0.1)
    assert lr_at("step", 0.1, 32, 25, 100, milestones=(10, 20)) == pytest.approx(0.001)
    with pytest.raises(ArgumentError):
        lr_at("linear", 0.1, 32, 0, 100)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"epochs": 1, "batchsize": 4})
    with pytest.raises(ConfigError):
        config_from_dict({"normalizer": {"kind": "cbn", "k": 4}})
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_defaults_and_guards(tmp_path):
    with pytest.raises(ArgumentError):
        config_from_dict({"epochs": 0})
    with pytest.raises(ArgumentError):
        config_from_dict({"normalizer": {"kind": "layer"}})
    assert config_from_dict({"batch_size": 2, "normalizer": {"kind": "cbn"}}).window == 8
    assert config_from_dict({"batch_size": 4, "normalizer": {"kind": "cbn", "window": 2}}).window == 2
    assert config_from_dict({"batch_size": 2, "normalizer": {"kind": "bn", "window": 8}}).window == 1
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"name": "x", "milestones": [3, 6]}))
    assert load_config(path).milestones == (3, 6)


def test_shipped_configs_load():
    from pathlib import Path

    for path in sorted(Path(__file__).resolve().parent.parent.glob("configs/*.json")):
        load_config(path)


def test_train_writes_metrics(tmp_path):
    result = train(tiny(tmp_path / "run", kind="cbn", window=3))
    rows = read_metrics(result.metrics_path)
    assert [r["split"] for r in rows] == ["train", "eval", "train", "eval"]
    assert [int(r["iteration"]) for r in rows] == [8, 8, 16, 16]
    assert rows[0]["window"] == "3"
    assert "wall_time" not in rows[0]
    assert result.completed
    saved = json.loads((tmp_path / "run" / config.CONFIG_FILENAME).read_text())
    assert saved["normalizer"]["window"] == 3


def test_same_seed_same_bytes(tmp_path):
    a = train(tiny(tmp_path / "a", kind="cbn", window=4, seed=3))
    b = train(tiny(tmp_path / "b", kind="cbn", window=4, seed=3))
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cbn_window_one_reproduces_bn(tmp_path, seed):
    bn = train(tiny(tmp_path / "bn", kind="bn", seed=seed))
    cbn = train(tiny(tmp_path / "cbn", kind="cbn", window=1, seed=seed))
    assert bn.metrics_path.read_bytes() == cbn.metrics_path.read_bytes()


@pytest.mark.parametrize("stop", [5, 8, 11])
def test_resume_continues_identically(tmp_path, stop):
    cfg = dict(kind="cbn", window=3, seed=2, epochs=3, augment={"flip": True, "crop": True})
    full = train(tiny(tmp_path / "full", **cfg))
    part_cfg = tiny(tmp_path / "part", **cfg)
    partial = train(part_cfg, max_steps=stop)
    assert not partial.completed
    resumed = train(part_cfg, resume=partial.checkpoint_path)
    assert resumed.completed
    assert resumed.metrics_path.read_bytes() == full.metrics_path.read_bytes()


def test_checkpoint_magic(tmp_path):
    path = tmp_path / "not_a_checkpoint.pkl"
    path.write_bytes(b"PICKLE!!" + bytes(16))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    result = train(tiny(tmp_path / "run", epochs=1))
    payload = load_checkpoint(result.checkpoint_path)
    assert payload["epoch"] == 1 and payload["step"] == 8


def test_evaluate_is_pure(tmp_path):
    from datasets import load_dataset

    cfg = tiny(tmp_path / "run", kind="cbn", window=2, epochs=1)
    result = train(cfg)
    _, eval_set = load_dataset(cfg.dataset)
    state = result.graph.norm_states[1]
    before = (state.running_mean.copy(), state.t, len(state.records))
    first = evaluate(result.graph, eval_set)
    assert evaluate(result.graph, eval_set, batch_size=5) == pytest.approx(first)
    assert np.array_equal(state.running_mean, before[0])
    assert (state.t, len(state.records)) == before[1:]


def test_diagnostic_columns(tmp_path):
    cfg = tiny(tmp_path / "run", kind="cbn", window=3, diagnostics={"grad_ratio": True, "probe_replay": True},
               normalizer={"kind": "cbn", "window": 3, "burn_in_epochs": 0})
    result = train(cfg)
    rows = read_metrics(result.metrics_path)
    evals = [r for r in rows if r["split"] == "eval"]
    for row in evals:
        assert math.isfinite(float(row["diag_ratio_mu_l1"]))
        assert float(row["diag_comp_err_mu"]) < float(row["diag_stale_err_mu"])
        assert math.isfinite(float(row["diag_comp_err_nu"]))
    assert rows[0]["diag_ratio_mu_l1"] == ""
    assert len(result.ratio_report.rows) == 2


def test_wall_time_opt_in(tmp_path):
    result = train(tiny(tmp_path / "run", epochs=1, log_wall_time=True))
    assert float(read_metrics(result.metrics_path)[0]["wall_time"]) >= 0.0


def test_compare(tmp_path):
    dirs = []
    for seed in range(3):
        train(tiny(tmp_path / f"s{seed}", seed=seed))
        dirs.append(tmp_path / f"s{seed}")
    summary = compare(dirs, out_path=tmp_path / "summary.csv")
    assert [(r.method, r.epoch, r.runs) for r in summary] == [("bn-tiny", 1, 3), ("bn-tiny", 2, 3)]
    final = [float(read_metrics(d / config.METRICS_FILENAME)[-1]["accuracy"]) for d in dirs]
    assert summary[-1].accuracy_mean == pytest.approx(np.mean(final))
    assert summary[-1].accuracy_std == pytest.approx(np.std(final, ddof=1))
    assert (tmp_path / "summary.csv").read_text().startswith("method,epoch,runs")

    same = compare([dirs[0], dirs[0]])
    assert all(r.accuracy_std == 0.0 and r.loss_std == 0.0 for r in same)


def test_compare_errors(tmp_path):
    train(tiny(tmp_path / "two", epochs=2))
    train(tiny(tmp_path / "one", epochs=1))
    with pytest.raises(ArgumentError):
        compare([tmp_path / "two", tmp_path / "one"])
    with pytest.raises(ArgumentError):
        compare([tmp_path / "two"])


@pytest.mark.parametrize("target,calls,after", [
    ("backward", 6, False),
    ("sgd_step", 3, True),
    ("evaluate", 1, False),
])
def test_interrupted_run_resumes_identically(tmp_path, monkeypatch, target, calls, after):
    cfg = dict(kind="cbn", window=3, seed=2, augment={"flip": True, "crop": True},
               diagnostics={"probe_replay": True})
    full = train(tiny(tmp_path / "full", **cfg))
    part_cfg = tiny(tmp_path / "part", **cfg)
    original = getattr(harness, target)
    seen = []

    def interrupting(*args, **kwargs):
        seen.append(target)
        if len(seen) == calls and not after:
            raise KeyboardInterrupt
        out = original(*args, **kwargs)
        if len(seen) == calls:
            raise KeyboardInterrupt
        return out

    with monkeypatch.context() as m:
        m.setattr(harness, target, interrupting)
        with pytest.raises(KeyboardInterrupt):
            train(part_cfg)
    checkpoint = tmp_path / "part" / config.CHECKPOINT_FILENAME
    payload = load_checkpoint(checkpoint)
    assert payload["graph"].norm_states[1].t == payload["step"]
    resumed = train(part_cfg, resume=checkpoint)
    assert resumed.completed
    assert resumed.metrics_path.read_bytes() == full.metrics_path.read_bytes()


def test_resume_rejects_changed_config(tmp_path):
    cfg = tiny(tmp_path / "run", kind="cbn", window=3)
    partial = train(cfg, max_steps=3)
    with pytest.raises(ConfigError):
        train(tiny(tmp_path / "run", kind="cbn", window=2), resume=partial.checkpoint_path)
    with pytest.raises(ConfigError):
        train(tiny(tmp_path / "run", kind="cbn", window=3, seed=1), resume=partial.checkpoint_path)
    saved = json.loads((tmp_path / "run" / config.CONFIG_FILENAME).read_text())
    assert saved["normalizer"]["window"] == 3

    moved = train(dataclasses.replace(cfg, out_dir=str(tmp_path / "moved")), resume=partial.checkpoint_path)
    assert moved.completed
