import dataclasses
import json
import os

import numpy as np
import pytest

from gritvq.codebook import apply_transform, batch_assign, build_cache, codebook_from_json, kmeans
from gritvq.errors import ConfigError
from gritvq.harness import (
    FINAL_METRICS,
    ExperimentConfig,
    MethodConfig,
    SyntheticTask,
    bench_rank_doubling,
    bench_transform_scaling,
    collapse_preset,
    compare_methods,
    evaluate,
    gen_gmm,
    metrics_csv,
    run_experiment,
    task_data,
)
from gritvq.training import METRIC_COLUMNS, TrainConfig


def small_cfg(steps=50, seed=0, **method):
    task = SyntheticTask(components=4, scale=0.05, d=4, n_train=500, n_eval=200, seed=7)
    m = MethodConfig(**{"transform": "LinearLowRank", "rank": 2, **method})
    return ExperimentConfig(task=task, method=m, train=TrainConfig(steps=steps, seed=seed, batch=16),
                            K=8, log_every=10)


# -- tasks ---------------------------------------------------------------------


def test_gmm_degenerate():
    task = SyntheticTask(components=1, means=[[0.0] * 4], scale=0.0, d=4, n_train=20)
    X = gen_gmm(task, np.random.default_rng(0))
    assert np.array_equal(X, np.zeros((20, 4)))


def test_gmm_two_components():
    task = SyntheticTask(components=2, means=[[5.0, 0.0], [-5.0, 0.0]], scale=1.0, d=2)
    X = gen_gmm(task, np.random.default_rng(1), n=10_000)
    right, left = X[X[:, 0] > 0], X[X[:, 0] <= 0]
    assert np.linalg.norm(right.mean(0) - [5.0, 0.0]) < 0.1
    assert np.linalg.norm(left.mean(0) - [-5.0, 0.0]) < 0.1


def test_gmm_seeded():
    task = SyntheticTask(d=3, n_train=100, n_eval=10, seed=5)
    a, b = task_data(task), task_data(task)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = task_data(dataclasses.replace(task, seed=6))
    assert not np.array_equal(a[0], c[0])


def test_task_validation():
    with pytest.raises(ConfigError):
        SyntheticTask(components=2, weights=[0.5, 0.4])
    with pytest.raises(ConfigError):
        SyntheticTask(components=2, d=2, means=[[0.0, 0.0], [0.05, 0.0]], scale=0.05,
                      well_separated=True)
    with pytest.raises(ConfigError):
        SyntheticTask(kind="Images")
    SyntheticTask(components=2, weights=[0.25, 0.75])


def test_preset_is_well_separated():
    task = collapse_preset().task
    m = task.mixture_means()
    gaps = np.linalg.norm(m[:, None] - m[None], axis=2)[np.triu_indices(8, 1)]
    assert gaps.min() >= 2 * task.scale
    assert abs(task.mixture_weights().sum() - 1.0) <= 1e-12


# -- configs -------------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    cfg = collapse_preset("STE", seed=3, steps=77)
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert ExperimentConfig.load(p) == cfg


@pytest.mark.parametrize("where", [None, "task", "method", "train"])
def test_config_unknown_keys(where):
    doc = json.loads(small_cfg().to_json())
    (doc if where is None else doc[where])["bogus"] = 1
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_config_bad_values():
    doc = json.loads(small_cfg().to_json())
    doc["train"]["protocol"] = "Sideways"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
    with pytest.raises(ConfigError):
        dataclasses.replace(small_cfg(), init="random")


# -- runs ----------------------------------------------------------------------


def test_zero_steps():
    res = run_experiment(small_cfg(steps=0), persist=False)
    assert res.metrics == []
    assert res.state.step == 0
    assert set(res.final) == set(FINAL_METRICS)


def test_series_length():
    res = run_experiment(small_cfg(steps=50), persist=False)
    assert res.series("step") == [10, 20, 30, 40, 50]
    assert list(res.metrics[0]) == list(METRIC_COLUMNS)


def test_seed_determinism():
    a = run_experiment(small_cfg(seed=1), persist=False)
    b = run_experiment(small_cfg(seed=1), persist=False)
    c = run_experiment(small_cfg(seed=2), persist=False)
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
    assert a.final == b.final
    assert metrics_csv(a.metrics) != metrics_csv(c.metrics)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_reaches_kmeans_floor(seed):
    task = SyntheticTask(components=8, scale=0.1, d=8, n_train=5000, n_eval=2000, seed=seed)
    cfg = ExperimentConfig(
        task=task,
        method=MethodConfig(name="GRIT", transform="Identity", row_normalize=False),
        train=TrainConfig(protocol="JointDirect", steps=2000, seed=seed),
        K=8, init="kmeans")
    res = run_experiment(cfg, persist=False)
    _, ev = task_data(task)
    floor = min(kmeans(ev, 8, np.random.default_rng(s))[2][-1] for s in range(10)) / ev.size
    assert res.final["quant_mse"] <= 1.1 * floor


def test_persisted_codebook_reproduces_assignments(tmp_path):
    cfg = dataclasses.replace(small_cfg(steps=30), out_path=str(tmp_path / "run"))
    res = run_experiment(cfg)
    for name in ("config.json", "codebook.json", "metrics.csv", "metrics.jsonl", "result.json"):
        assert os.path.exists(os.path.join(res.out_dir, name))
    with open(os.path.join(res.out_dir, "codebook.json")) as fh:
        E, spec = codebook_from_json(json.load(fh))
    _, ev = task_data(cfg.task)
    live = batch_assign(build_cache(apply_transform(res.state.transform, res.state.E)), ev).index
    loaded = batch_assign(build_cache(apply_transform(spec, E)), ev).index
    assert np.array_equal(live, loaded)
    with open(os.path.join(res.out_dir, "metrics.csv")) as fh:
        assert fh.read() == metrics_csv(res.metrics)


def test_linear_ae_run():
    task = SyntheticTask(kind="LinearAE", components=4, D=8, d=3, n_train=400, n_eval=100, seed=2)
    cfg = ExperimentConfig(task=task, method=MethodConfig(transform="LinearLowRank", rank=2),
                           train=TrainConfig(steps=40, batch=16), K=6, log_every=20)
    res = run_experiment(cfg, persist=False)
    assert res.state.encoder.shape == (3, 8) and res.state.decoder.shape == (8, 3)
    assert np.isfinite(res.final["recon_mse"])
    assert res.final == evaluate(res.state, task_data(task)[1])


# -- comparison ------------------------------------------------------------------


def test_compare_self_is_zero(tmp_path):
    cfg = small_cfg(steps=20)
    rows = compare_methods([cfg, cfg], seeds=2, names=["a", "b"], out_dir=str(tmp_path))
    assert len(rows) == 2 * len(FINAL_METRICS)
    for r in rows:
        assert r["paired_diff_mean"] == 0.0 and r["paired_diffs"] == [0.0, 0.0]
    assert (tmp_path / "comparison.csv").exists() and (tmp_path / "comparison.json").exists()


def test_compare_row_count():
    a = small_cfg(steps=10)
    b = dataclasses.replace(a, method=MethodConfig(name="STE", transform="Identity"))
    c = dataclasses.replace(a, method=MethodConfig(name="EMAVQ", transform="Identity"),
                            train=dataclasses.replace(a.train, protocol="JointEMA"))
    rows = compare_methods([a, b, c], seeds=2)
    assert len(rows) == 3 * len(FINAL_METRICS)


def test_compare_mismatched_tasks():
    a = small_cfg()
    b = dataclasses.replace(a, task=dataclasses.replace(a.task, seed=99))
    with pytest.raises(ConfigError):
        compare_methods([a, b], seeds=1)


# -- benchmarks ------------------------------------------------------------------


def test_bench_rows():
    rows = bench_transform_scaling([64, 128], d=8, r=4, repeats=2, budget=2e4)
    assert [r["K"] for r in rows] == [64, 128]
    assert np.isnan(rows[0]["ratio"]) and rows[1]["ratio"] > 0
    assert all(r["spread"] >= 0 for r in rows)
    with pytest.raises(ValueError):
        bench_transform_scaling([128, 64])


def test_rank_doubling_ratio():
    assert bench_rank_doubling(K=2048, d=32, r=8, repeats=5) < 2.2
