import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vbsens import benchmark as bm
from vbsens.benchmark import (
    TABLE_COLUMNS,
    benchmark_covariate,
    benchmark_r2,
    benchmark_table,
    mri,
    write_table_csv,
)
from vbsens.estimator import estimate_att
from vbsens.inference import BootstrapConfig, draw_replicates
from vbsens.msm import width_threshold
from vbsens.weights import WeightFitError, fit_logistic_ipw

from conftest import logit_dataset


def test_benchmarked_r2_example():
    raw = 1 - 0.15 / 0.25
    assert raw == pytest.approx(0.4)
    assert benchmark_r2(raw) == pytest.approx(0.2857, abs=1e-4)


@given(st.floats(-5, 1e6), st.floats(-5, 1e6))
def test_map_monotone_in_unit_interval(a, b):
    lo, hi = sorted((a, b))
    assert 0 <= benchmark_r2(lo) <= benchmark_r2(hi) < 1


def test_mri():
    assert mri(0.57, 0.19) == (pytest.approx(3.0), False)
    assert mri(0.3, 0.3) == (1.0, False)
    assert mri(0.3, 0.0) == (math.inf, True)


def test_active_covariate_dominates():
    d = logit_dataset(n=2000, coef=(1.2, 0.0), seed=8)
    w = fit_logistic_ipw(d)
    rows = benchmark_table(d, w, "ipw")
    assert [r.covariate for r in rows] == ["x1", "x2"]
    assert rows[0].r2_benchmarked > 10 * rows[1].r2_benchmarked


def test_noise_covariate_is_nearly_degenerate():
    d = logit_dataset(n=2000, coef=(1.2, 0.0), seed=8)
    w = fit_logistic_ipw(d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        row = benchmark_covariate(d, w, "x2", "ipw")
    est = estimate_att(d, w).estimate
    assert row.r2_benchmarked < 0.01
    assert row.vbm_interval[1] - row.vbm_interval[0] < 0.1 * abs(est)


def test_threshold_column_matches(synth):
    w = fit_logistic_ipw(synth)
    yc = synth.outcomes[synth.treatment == 0]
    for row in benchmark_table(synth, w, "ipw"):
        assert row.r2_threshold == pytest.approx(width_threshold(yc, w, row.psi), rel=1e-12)


def test_mri_and_cis_attached(synth):
    w = fit_logistic_ipw(synth)
    reps = draw_replicates(synth, "ipw", cfg=BootstrapConfig(B=60), weights=w)
    rows = benchmark_table(synth, w, "ipw", r2_star=0.3, replicates=reps)
    for r in rows:
        if r.r2_benchmarked > 0:
            assert r.mri == pytest.approx(0.3 / r.r2_benchmarked)
        assert r.vbm_ci[0] <= r.vbm_interval[0] and r.vbm_ci[1] >= r.vbm_interval[1]
        assert r.msm_ci is not None


def test_failed_row_is_reported(synth, monkeypatch):
    real = bm.leave_one_out_weights

    def flaky(d, j, *a, **k):
        if j == 1:
            raise WeightFitError("forced failure")
        return real(d, j, *a, **k)

    monkeypatch.setattr(bm, "leave_one_out_weights", flaky)
    rows = benchmark_table(synth, fit_logistic_ipw(synth), "ipw")
    assert len(rows) == 3
    assert [r.ok for r in rows] == [True, False, True]
    assert "forced" in rows[1].error


def test_group_row(synth):
    rows = benchmark_table(synth, fit_logistic_ipw(synth), "ipw", groups={"x1+x2": ["x1", "x2"]})
    assert rows[-1].covariate == "x1+x2"
    assert rows[-1].ok


def test_clamped_row_warns():
    # a pure-noise column: dropping it can leave slightly more variable weights
    d = logit_dataset(n=2000, coef=(1.2, 0.0), seed=8)
    w = fit_logistic_ipw(d)
    with pytest.warns(UserWarning, match="clamped"):
        row = benchmark_covariate(d, w, "x2", "ipw")
    assert row.r2_loo_raw < 0
    assert row.clamped and row.r2_benchmarked == 0.0


def test_csv_columns(tmp_path, synth):
    rows = benchmark_table(synth, fit_logistic_ipw(synth), "ipw")
    write_table_csv(rows, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0].split(",") == list(TABLE_COLUMNS)
    assert len(lines) == 4
