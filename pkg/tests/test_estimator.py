import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbsens.estimator import estimate_att, hajek_mean, sample_bounds
from vbsens.weights import weights_from_propensities

from conftest import TOY_CONTROL_WEIGHTS, logit_dataset


def test_toy_att(toy):
    w = weights_from_propensities([0.1, 0.2])
    est = estimate_att(toy, w)
    assert est.estimate == pytest.approx(14.6, abs=0.05)
    assert est.treated_mean == 15.0


def test_toy_sample_bounds(toy):
    assert sample_bounds(toy).att_sample_bounds == (10.0, 25.0)


def test_uniform_weights_give_difference_in_means(synth):
    est = estimate_att(synth, np.ones(synth.n_control))
    z = synth.treatment
    diff = synth.outcomes[z == 1].mean() - synth.outcomes[z == 0].mean()
    assert est.estimate == pytest.approx(diff, rel=1e-12)


def test_implied_interval(toy):
    lo, hi = sample_bounds(toy, p_A=0.0).implied_external_mean_interval
    assert (lo, hi) == (-10.0, 5.0)
    from vbsens.dataset import Dataset

    d = Dataset([0.0, 10.0, 3.0], [0, 0, 1], np.zeros((3, 1)), ("x",))
    assert sample_bounds(d, p_A=0.5).implied_external_mean_interval == pytest.approx((-10.0, 20.0))


def test_p_a_one_rejected(toy):
    with pytest.raises(ValueError):
        sample_bounds(toy, p_A=1.0)


def test_misaligned(toy):
    with pytest.raises(ValueError):
        estimate_att(toy, np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_scale_invariance(c):
    d = logit_dataset(n=60, seed=3)
    w = np.random.default_rng(1).uniform(0.2, 3.0, d.n_control)
    assert estimate_att(d, c * w).estimate == pytest.approx(estimate_att(d, w).estimate, rel=1e-9, abs=1e-9)


def test_hajek_mean_matches_average():
    assert hajek_mean([1.0, 3.0], TOY_CONTROL_WEIGHTS) == pytest.approx((1 / 9 + 3 / 4) / (1 / 9 + 1 / 4))
