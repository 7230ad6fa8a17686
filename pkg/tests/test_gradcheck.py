import json

import numpy as np
import pytest

from gritvq.errors import DomainError
from gritvq.gradcheck import (
    FDConfig,
    FDError,
    check_pipeline_gradients,
    check_transform_gradients,
    contraction_experiment,
    contraction_trial,
    fd_gradient,
    linear_ae_trial,
    rel_err,
    report_json,
)
from gritvq.radius import FAMILIES, RadiusSpec


def test_fd_examples():
    assert np.allclose(fd_gradient(lambda x: float(x @ x), [1.0, 2.0]), [2.0, 4.0], atol=1e-8)
    assert np.array_equal(fd_gradient(lambda x: 3.0, np.ones(4)), np.zeros(4))
    g = fd_gradient(lambda x: np.sin(x[0]) * x[1], [0.3, 2.0])
    assert np.allclose(g, [2 * np.cos(0.3), np.sin(0.3)], atol=1e-8)


def test_fd_nan_reports_index():
    def f(x):
        return np.nan if x[2] > 0.5 else float(np.sum(x))

    with pytest.raises(FDError) as info:
        fd_gradient(f, [0.0, 0.0, 0.5 - 1e-9])
    assert info.value.index == 2


def test_fd_bad_step():
    with pytest.raises(DomainError):
        fd_gradient(lambda x: 0.0, [1.0], h=0.0)
    with pytest.raises(DomainError):
        FDConfig(h=-1.0)


def test_fd_second_order_in_h():
    # f = exp(x) at 0.4: central error ~ h²/6 f''' so halving h quarters it
    f = lambda x: float(np.exp(x[0]))
    true = np.exp(0.4)
    e1 = abs(fd_gradient(f, [0.4], 1e-2)[0] - true)
    e2 = abs(fd_gradient(f, [0.4], 5e-3)[0] - true)
    assert 3.5 < e1 / e2 < 4.5


def test_rel_err():
    assert rel_err([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rel_err([0.0], [0.0]) == 0.0
    assert rel_err([1.1], [1.0]) == pytest.approx(0.1 / 1.1)


def test_euclidean_identity_report():
    rep = check_pipeline_gradients("Euclidean", "Identity", trials=200)
    assert rep["trials"] >= 200
    assert rep["max_rel_err"] <= 1e-6
    assert rep["skip_rate"] < 0.2
    assert json.loads(report_json(rep)) == rep


def test_constant_radius_is_ste_limit():
    # rho' = 0 above the clip threshold
    spec = RadiusSpec("Clipped", tau=1e-6)
    rep = check_pipeline_gradients("Clipped", "Identity", trials=24,
                                   cfg=FDConfig(dims=(2, 8), Ks=(4,)), radius=spec)
    assert rep["max_rel_err"] <= 1e-6


@pytest.mark.parametrize("family", FAMILIES)
def test_skip_rate_default(family):
    rep = check_pipeline_gradients(family, "LinearLowRank", trials=24,
                                   cfg=FDConfig(dims=(2, 8), Ks=(4, 64), seed=5))
    assert rep["skip_rate"] < 0.2
    assert rep["max_rel_err"] <= 1e-6


def test_ratio_form_pipeline():
    rep = check_pipeline_gradients("Huber", "LinearLowRank", trials=24,
                                   cfg=FDConfig(dims=(2, 8), Ks=(4,)), form="RatioForm")
    assert rep["max_rel_err"] <= 1e-6


def test_transform_gradients_small():
    rep = check_transform_gradients("LinearLowRank", trials=20, cfg=FDConfig(h=1e-6, seed=2))
    assert rep["trials"] == 20
    assert all(v <= 1e-5 for v in rep["max_rel_err"].values())


def test_contraction_euclidean_slope():
    rep = contraction_experiment(RadiusSpec(), trials=50, seed=1)
    assert rep["rho_prime_mean"] == pytest.approx(1.0)
    assert 1.8 <= rep["slope_mean"] <= 2.2


def test_contraction_half_slope_point():
    rng = np.random.default_rng(0)
    zhat = np.zeros(8)
    zhat[0] = 1.0
    slopes = []
    etas = np.array([1e-2, 5e-3, 2.5e-3, 1.25e-3])
    for _ in range(50):
        z = zhat + rng.standard_normal(8)
        z = zhat + (z - zhat) / np.linalg.norm(z - zhat)  # gap exactly 1
        res, rp = contraction_trial(RadiusSpec("Power", alpha=0.5), etas, rng, z=z, zhat=zhat)
        assert rp == pytest.approx(0.5)
        slopes.append(np.polyfit(np.log(etas), np.log(res), 1)[0])
    assert 1.8 <= np.mean(slopes) <= 2.2


def test_contraction_zero_step():
    res, _ = contraction_trial(RadiusSpec(), [0.0], np.random.default_rng(0))
    assert res[0] == 0.0


def test_contraction_needs_decreasing_etas():
    with pytest.raises(DomainError):
        contraction_experiment(RadiusSpec(), etas=(1e-3, 1e-2))


def test_linear_ae_gradients():
    rng = np.random.default_rng(3)
    cfg = FDConfig()
    errs = [e for e in (linear_ae_trial(rng, cfg) for _ in range(40)) if e is not None]
    assert len(errs) >= 20
    assert max(max(e.values()) for e in errs) <= 1e-6
