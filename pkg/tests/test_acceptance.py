"""Acceptance criteria, one test per criterion.

Each test appends a ``CRITERION n: PASS|FAIL ...`` line that the terminal
summary prints in order. Run directly with ``python3 tests/test_acceptance.py``.
"""

import dataclasses
import functools
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gritvq.codebook import (
    TRANSFORM_KINDS,
    apply_transform,
    batch_assign,
    build_cache,
    mixer_dense,
    pairwise_distortion,
)
from gritvq.gradcheck import (
    FDConfig,
    check_pipeline_gradients,
    check_transform_gradients,
    contraction_experiment,
    fd_gradient,
    jacobian_eigs_trial,
    random_transform,
)
from gritvq.harness import (
    bench_transform_scaling,
    build_state,
    collapse_preset,
    evaluate,
    run_experiment,
    task_data,
)
from gritvq.quantizer import transform_backward
from gritvq.radius import FAMILIES, RadiusSpec
from gritvq.training import TrainConfig, init_state, train_step

SEEDS = range(5)
STEPS = 5000


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@functools.lru_cache(maxsize=None)
def collapse_run(method, seed, cache_T=8):
    cfg = collapse_preset(method, seed=seed, steps=STEPS, cache_T=cache_T)
    train_X, eval_X = task_data(cfg.task)
    state0, _ = build_state(cfg, train_X)
    t = time.perf_counter()
    res = run_experiment(cfg, persist=False)
    return {
        "initial": evaluate(state0, eval_X),
        "E0": state0.E.copy(),
        "res": res,
        "seconds": time.perf_counter() - t,
    }


def test_criterion_01_encoder_gradients():
    t = time.perf_counter()
    worst, worst_at, max_skip = 0.0, None, 0.0
    bad = []
    for fam in FAMILIES:
        for kind in TRANSFORM_KINDS:
            rep = check_pipeline_gradients(fam, kind, trials=200, cfg=FDConfig())
            if rep["max_rel_err"] > worst:
                worst, worst_at = rep["max_rel_err"], (fam, kind)
            max_skip = max(max_skip, rep["skip_rate"])
            if rep["max_rel_err"] > 1e-6 or rep["trials"] < 200:
                bad.append((fam, kind, rep["max_rel_err"], rep["trials"]))
    elapsed = time.perf_counter() - t
    ok = not bad and elapsed <= 300
    record(1, ok, f"max rel err {worst:.2e} at {worst_at}, max skip {max_skip:.1%}, "
                  f"{len(FAMILIES)}x{len(TRANSFORM_KINDS)} pairs in {elapsed:.0f}s")
    assert ok, bad


def test_criterion_02_transform_gradients():
    reps = {k: check_transform_gradients(k, trials=100, cfg=FDConfig(h=1e-6), K=8, d=4, rank=2)
            for k in ("LinearLowRank", "LowRankNormalized", "AttentionTopK")}
    fd_worst = max(max(r["max_rel_err"].values()) for r in reps.values())
    fd_ok = all(r["trials"] >= 100 for r in reps.values()) and fd_worst <= 1e-5

    # materialisable instances: row normalisation off, M = A Bᵀ
    rng = np.random.default_rng(2)
    err_W = err_M = err_fd = err_lit_sym = 0.0
    lit_nonsym = np.inf
    for _ in range(50):
        E = rng.standard_normal((8, 4))
        spec = random_transform("LinearLowRank", E, rng, rank=2, row_normalize=False)
        G = rng.standard_normal((8, 4))
        M = mixer_dense(spec, E)
        W = spec.W
        gr = transform_backward(G, E, spec)
        gM = G @ W.T @ E.T
        err_W = max(err_W, np.max(np.abs(gr["W"] - E.T @ M.T @ G)))
        err_M = max(err_M, np.max(np.abs(gr["A"] - gM @ spec.B)),
                    np.max(np.abs(gr["B"] - gM.T @ spec.A)))
        # the mixer gradient against FD of <G, M E W> in M
        num = fd_gradient(lambda P: float(np.sum(G * (P @ E @ W))), M, 1e-3)
        err_fd = max(err_fd, np.max(np.abs(num - gM)) / np.max(np.abs(gM)))
        lit_nonsym = min(lit_nonsym, np.max(np.abs(G @ W @ E.T - gM)))
        Ws = 0.5 * (W + W.T)
        err_lit_sym = max(err_lit_sym, np.max(np.abs(G @ Ws @ E.T - G @ Ws.T @ E.T)))
    closed_ok = err_W <= 1e-10 and err_M <= 1e-10 and err_fd <= 1e-8 and err_lit_sym <= 1e-12
    ok = fd_ok and closed_ok
    record(2, ok, f"FD max rel err {fd_worst:.2e} (100 trials per kind); "
                  f"|grad_W - EᵀMᵀG| {err_W:.1e}, |grad_M - GWᵀEᵀ| {err_M:.1e}, "
                  f"FD in M {err_fd:.1e}; GWEᵀ agrees only for symmetric W "
                  f"(min gap {lit_nonsym:.2f} otherwise)")
    assert ok


def test_criterion_03_jacobian_spectrum():
    rng = np.random.default_rng(3)
    worst = 0.0
    for fam in FAMILIES:
        for _ in range(100):
            eig, want, rho_p = jacobian_eigs_trial(fam, rng)
            worst = max(worst, np.max(np.abs(eig - want)))
            d = eig.shape[0]
            spec_pred = np.sort_complex(np.array([1.0] * (d - 1) + [1.0 - rho_p], dtype=complex))
            worst = max(worst, np.max(np.abs(eig - spec_pred)))
    ok = worst <= 1e-8
    record(3, ok, f"max eigenvalue error {worst:.1e} over 100 contexts x {len(FAMILIES)} families")
    assert ok


def test_criterion_04_gap_contraction():
    reps = [contraction_experiment(RadiusSpec(), trials=50, seed=4),
            contraction_experiment(RadiusSpec("Power", alpha=0.5), trials=50, seed=5),
            contraction_experiment(RadiusSpec("Huber", delta_h=0.5), trials=50, seed=6)]
    ok = all(r["trials"] >= 50 and 1.8 <= r["slope_mean"] <= 2.2 for r in reps)
    detail = ", ".join(f"{r['family']} {r['slope_mean']:.3f}" for r in reps)
    record(4, ok, f"mean log-log residual slope: {detail}")
    assert ok


def _small_state(kind, protocol, K=16, d=4, seed=0):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((K, d))
    spec = random_transform(kind, E, rng, rank=2, noise=0.1)
    cfg = TrainConfig(protocol=protocol, batch=4, seed=seed)
    return init_state(E, spec, RadiusSpec(), cfg, method="GRIT"), cfg


def test_criterion_05_coupling():
    rng = np.random.default_rng(5)
    min_change, used_ll, moved_unused = np.inf, [], 0
    for seed in range(20):
        state, cfg = _small_state("LinearLowRank", "FrozenE", seed=seed)
        before = apply_transform(state.transform, state.E)
        batch = before[:2].repeat(2, axis=0) + 1e-3 * rng.standard_normal((4, 4))
        state, _ = train_step(state, batch, cfg)
        used_ll.append(int(np.count_nonzero(state.window[0])))
        after = apply_transform(state.transform, state.E)
        min_change = min(min_change, np.min(np.linalg.norm(after - before, axis=1)))

        state, cfg = _small_state("Identity", "JointDirect", seed=seed)
        E0 = state.E.copy()
        state, _ = train_step(state, batch, cfg)
        unused = state.window[0] == 0
        moved_unused += int(np.any(state.E[unused] != E0[unused]))
    ok = min_change > 0 and max(used_ll) < 16 and moved_unused == 0
    record(5, ok, f"LinearLowRank min row change {min_change:.2e} with <= {max(used_ll)}/16 "
                  f"codes selected; Identity+JointDirect unselected rows changed in "
                  f"{moved_unused}/20 instances")
    assert ok


def test_criterion_06_distortion_sandwich():
    rng = np.random.default_rng(6)
    violations = 0
    mismatch = 0.0
    for _ in range(50):
        K, d = 8, 4
        A, B = rng.standard_normal((2, K, 2))
        M = A @ B.T
        E = rng.standard_normal((K, d))
        W = rng.standard_normal((d, d))
        out = pairwise_distortion(M, E, W)
        # dense oracle: singular values straight from an SVD of each factor
        sE = np.linalg.svd(E, compute_uv=False)
        sW = np.linalg.svd(W, compute_uv=False)
        U = np.linalg.svd(E, full_matrices=False)[0]
        Ep = M @ E @ W
        for i in range(K):
            for j in range(i + 1, K):
                dm = M[i] - M[j]
                dist = np.linalg.norm(Ep[i] - Ep[j])
                hi = np.linalg.norm(dm) * sE[0] * sW[0]
                lo = np.linalg.norm(U.T @ dm) * sE[-1] * sW[-1]
                tol = 1e-10 * (1 + dist)
                violations += int(not (lo - tol <= dist <= hi + tol))
                mismatch = max(mismatch, abs(dist - out["dist"][i, j]),
                               abs(hi - out["upper"][i, j]), abs(lo - out["lower_proj"][i, j]))
    ok = violations == 0 and mismatch <= 1e-10
    record(6, ok, f"{violations} violations over 50 instances x 28 pairs; "
                  f"library vs dense oracle max diff {mismatch:.1e}")
    assert ok


def test_criterion_07_gauge():
    rng = np.random.default_rng(7)
    worst_norm, worst_sigma, steps = 0.0, -np.inf, 0
    tau = 1.2
    for kind in ("LinearLowRank", "LowRankNormalized", "AttentionTopK"):
        for protocol in ("FrozenE", "JointDirect", "JointEMA"):
            E = rng.standard_normal((16, 4))
            spec = random_transform(kind, E, rng, rank=2, noise=0.3)
            cfg = TrainConfig(protocol=protocol, tau_w=tau, lr_W=5e-2, cache_T=4, batch=16,
                              t_scan=50)
            state = init_state(E, spec, RadiusSpec(), cfg)
            centres = rng.standard_normal((3, 4))
            for _ in range(150):
                X = centres[rng.integers(3, size=16)] + 0.1 * rng.standard_normal((16, 4))
                state, _ = train_step(state, X, cfg)
                steps += 1
                worst_norm = max(worst_norm,
                                 np.max(np.abs(np.linalg.norm(state.cache.Eprime, axis=1) - 1)))
                sigma = np.linalg.svd(state.transform.W, compute_uv=False)[0]
                worst_sigma = max(worst_sigma, sigma - tau)
    ok = worst_norm <= 1e-10 and worst_sigma <= 1e-6
    record(7, ok, f"{steps} steps: max |row norm - 1| {worst_norm:.1e}, "
                  f"max sigma_max(W) - tau_W {worst_sigma:.1e}")
    assert ok


def test_criterion_08_nn_oracle():
    rng = np.random.default_rng(8)
    C = rng.standard_normal((1024, 32))
    Z = rng.standard_normal((10_000, 32))
    got = batch_assign(build_cache(C), Z)
    mism, gap_err = 0, 0.0
    for i in range(Z.shape[0]):
        dist = np.sqrt(np.sum((C - Z[i]) ** 2, axis=1))
        j = int(np.argmin(dist))
        mism += int(j != got.index[i])
        gap_err = max(gap_err, abs(dist[j] - got.gap[i]))
    ok = mism == 0 and gap_err <= 1e-10
    record(8, ok, f"{mism} index mismatches over 10^4 queries, max gap diff {gap_err:.1e}")
    assert ok


def test_criterion_09_utilization_vs_ste():
    t = time.perf_counter()
    wins, g_mse, s_mse, per_seed = 0, [], [], []
    for seed in SEEDS:
        g = collapse_run("GRIT", seed)["res"].final
        s = collapse_run("STE", seed)["res"].final
        wins += int(g["utilization"] >= s["utilization"])
        g_mse.append(g["quant_mse"])
        s_mse.append(s["quant_mse"])
        per_seed.append(f"{g['utilization']:.3f}/{s['utilization']:.3f}")
    elapsed = time.perf_counter() - t
    ratio = np.mean(g_mse) / np.mean(s_mse)
    ok = wins >= 4 and ratio <= 1.05 and elapsed <= 600
    record(9, ok, f"GRIT>=STE utilization in {wins}/5 seeds (GRIT/STE {', '.join(per_seed)}); "
                  f"MSE ratio {ratio:.3f}; {elapsed:.0f}s")
    assert ok


def test_criterion_10_caching_interval():
    worst_util, worst_mse = 0.0, 0.0
    for seed in SEEDS:
        finals = [collapse_run("GRIT", seed, T)["res"].final for T in (1, 8, 16)]
        u = [f["utilization"] for f in finals]
        m = [f["quant_mse"] for f in finals]
        worst_util = max(worst_util, max(u) - min(u))
        worst_mse = max(worst_mse, max(m) / min(m) - 1)
    ok = worst_util <= 0.05 and worst_mse <= 0.05
    record(10, ok, f"T in (1,8,16): max utilization spread {100 * worst_util:.1f} points, "
                   f"max MSE spread {100 * worst_mse:.1f}%")
    assert ok


def test_criterion_11_complexity_scaling():
    Ks = [256, 512, 1024, 2048, 4096]
    rows = bench_transform_scaling(Ks, d=32, r=32, repeats=5)
    ratios = [r["ratio"] for r in rows[1:]]
    ok = all(1.6 <= x <= 2.6 for x in ratios)
    record(11, ok, "K-doubling time ratios " + ", ".join(f"{x:.2f}" for x in ratios))
    assert ok


def test_criterion_12_frozen_codebook_stability():
    identical, worst_drop, lines = True, 0.0, []
    for seed in SEEDS:
        run = collapse_run("GRIT", seed)
        res = run["res"]
        identical &= bool(np.array_equal(res.state.E, run["E0"]))
        u0 = run["initial"]["utilization"]
        series = res.series("utilization") + [res.final["utilization"]]
        drop = u0 - min(series)
        worst_drop = max(worst_drop, drop)
        lines.append(f"{u0:.3f}->{min(series):.3f}")
    ok = identical and worst_drop <= 0.10
    record(12, ok, f"E bit-identical: {identical}; utilization initial->min per seed "
                   f"{', '.join(lines)}; worst drop {100 * worst_drop:.1f} points")
    assert ok


def test_criterion_13_determinism(tmp_path):
    cfg = collapse_preset("GRIT", seed=3, steps=1000)
    blobs = []
    for name in ("a", "b"):
        res = run_experiment(dataclasses.replace(cfg, out_path=str(tmp_path / name)),
                             keep_state=False)
        with open(tmp_path / name / "metrics.csv", "rb") as fh:
            blobs.append(fh.read())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    record(13, ok, f"metrics.csv byte-identical across two runs ({len(blobs[0])} bytes)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
