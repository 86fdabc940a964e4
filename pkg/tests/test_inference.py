import json
import math

import numpy as np
import pytest

from vbsens import inference
from vbsens.dataset import Dataset
from vbsens.estimator import estimate_att
from vbsens.inference import (
    BootstrapConfig,
    BootstrapError,
    ReplicateSet,
    bootstrap_ci,
    draw_replicates,
    find_lambda_star,
    find_r2_star,
    nearest_rank,
    parse_grid,
    sweep_report,
    union_ci,
)
from vbsens.msm import msm_extrema
from vbsens.vbm import CorrelationBoundSpec, WORST_CASE
from vbsens.weights import WeightFitError, external_weights, weights_from_propensities

from conftest import logit_dataset


def bias_dataset(copies=8):
    """Controls replicate the worked (Y, w) example; a few treated units."""
    yc = np.tile([1.0, 2.0, 3.0, 4.0], copies)
    wc = np.tile([0.5, 1.5, 0.5, 1.5], copies)
    yt = np.array([3.0, 4.0, 5.0, 6.0])
    y = np.concatenate([yc, yt])
    z = np.r_[np.zeros(yc.size, int), np.ones(yt.size, int)]
    d = Dataset(y, z, np.arange(y.size, dtype=float)[:, None], ("id",))
    return d, external_weights(wc)


def test_nearest_rank():
    v = np.arange(1, 101, dtype=float)
    assert nearest_rank(v, 0.025) == 3.0
    assert nearest_rank(v, 0.975) == 98.0
    assert nearest_rank([5.0], 0.5) == 5.0


def test_identical_replicates_give_point_bounds():
    stub = ReplicateSet(
        tau=np.array([1.0, 1.0]),
        treated_mean=np.array([2.0, 2.0]),
        var_y=np.array([1.25, 1.25]),
        var_w=np.array([0.25, 0.25]),
        cor_wy=np.array([math.sqrt(0.2)] * 2),
        control_y=[np.array([1.0, 2.0, 3.0, 4.0])] * 2,
        control_w=[np.array([0.5, 1.5, 0.5, 1.5])] * 2,
    )
    assert stub.vbm_ci(0.5) == pytest.approx((0.5, 1.5))
    assert union_ci([0.5, 0.5], [1.5, 1.5], 0.05) == (0.5, 1.5)


def test_zero_r2_equals_percentile(synth):
    reps = draw_replicates(synth, "ipw", cfg=BootstrapConfig(B=300, seed=4))
    assert reps.vbm_ci(0.0) == reps.percentile_ci()


def test_same_seed_same_replicates(synth):
    a = draw_replicates(synth, "ipw", cfg=BootstrapConfig(B=60, seed=9))
    b = draw_replicates(synth, "ipw", cfg=BootstrapConfig(B=60, seed=9, parallelism=4))
    c = draw_replicates(synth, "ipw", cfg=BootstrapConfig(B=60, seed=10))
    np.testing.assert_array_equal(a.tau, b.tau)
    assert not np.array_equal(a.tau, c.tau)


def test_external_weights_travel_with_units():
    d, w = bias_dataset()
    reps = draw_replicates(d, "external", weights=w, cfg=BootstrapConfig(B=50, seed=1))
    for y, wt in zip(reps.control_y, reps.control_w):
        # in the worked data Y odd <-> w = 0.5
        np.testing.assert_array_equal(wt[y % 2 == 1] < 1, True)


def test_too_many_failures_abort(synth, monkeypatch):
    def boom(*a, **k):
        raise WeightFitError("forced")

    monkeypatch.setattr(inference, "fit_weights", boom)
    with pytest.raises(BootstrapError, match="failed"):
        draw_replicates(synth, "ipw", cfg=BootstrapConfig(B=20))


def test_bootstrap_ci_contains_point_interval(synth):
    out = bootstrap_ci(synth, "ipw", None, 0.2, cfg=BootstrapConfig(B=200, seed=2))
    assert out.ci[0] < out.point[0] < out.point[1] < out.ci[1]


def test_sweep_widths_on_worked_data():
    d, w = bias_dataset()
    rep = sweep_report(d, "external", None, WORST_CASE, BootstrapConfig(B=100), [0, 0.25, 0.5], weights=w)
    widths = [hi - lo for _, lo, hi, _, _ in rep.rows]
    assert widths == pytest.approx([0.0, 2 * math.sqrt(0.8 / 3 * 0.3125), 1.0], abs=1e-12)


def test_sweep_zero_grid_matches_bootstrap_ci(synth):
    cfg = BootstrapConfig(B=100, seed=3)
    rep = sweep_report(synth, "ipw", None, WORST_CASE, cfg, [0.0])
    single = bootstrap_ci(synth, "ipw", None, 0.0, cfg=cfg)
    assert len(rep.rows) == 1
    assert rep.rows[0][1:] == (*single.point, *single.ci)


def test_report_json_is_versioned(synth):
    rep = sweep_report(synth, "ipw", None, CorrelationBoundSpec.parse("relk:0.5"), BootstrapConfig(B=50), [0, 0.1])
    doc = json.loads(rep.to_json())
    assert doc["schema_version"] == 1
    assert doc["meta"]["rho_spec"] == "relk:0.5"
    assert "note" in doc["meta"]


def test_r2_star_zero_when_estimate_is_zero():
    d, w = bias_dataset()
    shift = estimate_att(d, w).estimate
    y = d.outcomes - shift * d.treatment
    d0 = Dataset(y, d.treatment, d.covariates, d.covariate_names)
    assert find_r2_star(d0, "external", weights=w, use_point_bounds=True).value == 0.0
    assert find_r2_star(d0, "external", weights=w, cfg=BootstrapConfig(B=100)).value == 0.0


def test_r2_star_saturates_for_huge_effect():
    rng = np.random.default_rng(0)
    n = 400
    x = rng.standard_normal(n)
    z = (np.arange(n) % 2).astype(int)
    y = rng.standard_normal(n) + 100.0 * z
    d = Dataset(y, z, x[:, None], ("x",))
    w = external_weights(1 + 0.01 * rng.uniform(-1, 1, n // 2))
    star = find_r2_star(d, "external", weights=w, use_point_bounds=True)
    assert star.saturated and star.value == pytest.approx(0.999)


def test_r2_star_brackets_point_crossing(synth):
    star = find_r2_star(synth, "ipw", use_point_bounds=True)
    assert 0 < star.value < 0.999 and not star.saturated


def test_lambda_star_toy_saturates(toy):
    w = weights_from_propensities([0.1, 0.2])
    star = find_lambda_star(toy, "external", weights=w, use_point_bounds=True)
    assert star.saturated


def test_lambda_star_three_points():
    d = Dataset([0.0, 1.0, 2.0, 1.4], [0, 0, 0, 1], np.zeros((4, 1)), ("x",))
    w = external_weights(np.ones(3))
    star = find_lambda_star(d, "external", weights=w, use_point_bounds=True)
    grid = np.arange(1.0, 5.0, 1e-4)
    first = next(l for l in grid if msm_extrema([0.0, 1.0, 2.0], np.ones(3), l).max_weighted_mean >= 1.4)
    assert star.value == pytest.approx(first, abs=1e-3)


def test_lambda_star_one_when_estimate_zero():
    d = Dataset([0.0, 2.0, 1.0], [0, 0, 1], np.zeros((3, 1)), ("x",))
    star = find_lambda_star(d, "external", weights=external_weights([1.0, 1.0]), use_point_bounds=True)
    assert star.value == 1.0


def test_parse_grid():
    assert len(parse_grid("0:0.9:0.05")) == 19
    assert parse_grid("0,0.25,0.5") == [0.0, 0.25, 0.5]
    with pytest.raises(ValueError):
        parse_grid("0:1:0")


def test_config_validation():
    for bad in (dict(B=1), dict(alpha=0.0), dict(parallelism=0), dict(seed=-1)):
        with pytest.raises(ValueError):
            BootstrapConfig(**bad)


@pytest.mark.slow
def test_vbm_interval_covers_true_att_at_oracle_r2():
    from vbsens.simulate import CoverageDgpConfig, generate_coverage_sample

    dgp = CoverageDgpConfig(n=1000, sigma_v2=1.0, seed=21)
    hits = []
    for r in range(500):
        s = generate_coverage_sample(dgp, r)
        reps = draw_replicates(s.dataset, "ipw", cfg=BootstrapConfig(B=100, seed=r))
        lo, hi = reps.vbm_ci(s.true_r2)
        hits.append(lo <= s.true_att <= hi)
    assert np.mean(hits) >= 0.93
