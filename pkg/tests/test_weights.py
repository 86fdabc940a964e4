import numpy as np
import pytest
from scipy.special import expit

from vbsens.dataset import Dataset
from vbsens.moments import pop_var
from vbsens.weights import (
    DegenerateWeightsError,
    InfeasibleBalanceError,
    SeparationError,
    WeightSet,
    external_weights,
    fit_entropy_balancing,
    fit_logistic_ipw,
    leave_one_out_weights,
    read_weights_csv,
    weights_from_propensities,
    write_weights_csv,
)

from conftest import logit_dataset


def newton_logit(X, z, tol=1e-12):
    """Plain Newton-Raphson on the unpenalized logistic likelihood."""
    b = np.zeros(X.shape[1])
    for _ in range(100):
        p = expit(X @ b)
        g = X.T @ (z - p)
        H = (X.T * (p * (1 - p))) @ X
        step = np.linalg.solve(H, g)
        b += step
        if np.max(np.abs(step)) < tol:
            break
    return b, H


def test_toy_propensities():
    w = weights_from_propensities([0.1, 0.2])
    ratio = np.array([1 / 9, 1 / 4])
    np.testing.assert_allclose(w.weights, ratio / ratio.mean(), rtol=1e-14)
    assert w.weights.mean() == pytest.approx(1.0)


def test_null_model_gives_unit_weights():
    # treatment independent of x by construction: exactly half treated in each x stratum
    x = np.repeat([0.0, 1.0, 2.0], 4)
    z = np.tile([0, 1, 0, 1], 3)
    d = Dataset(np.arange(12.0), z, x[:, None], ("x",))
    w = fit_logistic_ipw(d)
    np.testing.assert_allclose(w.weights, 1.0, atol=1e-8)


def test_logistic_recovers_coefficients():
    gamma = np.array([-0.5, 1.0, -0.7])
    rng = np.random.default_rng(11)
    n = 100_000
    x = rng.standard_normal((n, 2))
    X = np.column_stack([np.ones(n), x])
    z = (rng.random(n) < expit(X @ gamma)).astype(int)
    d = Dataset(rng.standard_normal(n), z, x, ("a", "b"))
    w = fit_logistic_ipw(d)

    b_ref, H = newton_logit(X, z)
    se = np.sqrt(np.diag(np.linalg.inv(H)))
    assert np.all(np.abs(b_ref - gamma) < 3 * se)

    odds_ref = np.exp(X @ b_ref)[z == 0]
    np.testing.assert_allclose(w.weights, odds_ref / odds_ref.mean(), rtol=1e-6)
    assert w.converged


def test_separation_detected():
    x = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
    z = (x > 0).astype(int)
    d = Dataset(x.copy(), z, x[:, None], ("x",))
    with pytest.raises(SeparationError):
        fit_logistic_ipw(d)


def test_entropy_balancing_exact_balance():
    d = logit_dataset(n=200, seed=5)
    w = fit_entropy_balancing(d)
    xc = d.covariates[d.treatment == 0]
    target = d.covariates[d.treatment == 1].mean(axis=0)
    imbalance = (w.weights @ xc / w.weights.sum() - target) / xc.std(axis=0)
    assert np.max(np.abs(imbalance)) < 1e-8
    assert w.converged


def test_entropy_balancing_already_balanced():
    x = np.array([0.0, 1.0, 2.0, 0.0, 1.0, 2.0])
    z = np.array([0, 0, 0, 1, 1, 1])
    d = Dataset(np.arange(6.0), z, x[:, None], ("x",))
    np.testing.assert_allclose(fit_entropy_balancing(d).weights, 1.0, atol=1e-12)


def test_entropy_balancing_infeasible_names_covariate():
    x = np.column_stack([[0.0, 0.0, 0.0, 1.0, 1.0], [0.1, 0.4, 0.2, 0.3, 0.2]])
    z = np.array([0, 0, 0, 1, 1])
    d = Dataset(np.arange(5.0), z, x, ("age", "inc"))
    with pytest.raises(InfeasibleBalanceError) as exc:
        fit_entropy_balancing(d)
    assert exc.value.covariate == "age"


def test_loo_requires_two_covariates(toy):
    with pytest.raises(ValueError):
        leave_one_out_weights(toy, 0, "ipw")


def test_loo_noise_covariate_keeps_variance():
    d = logit_dataset(n=3000, coef=(1.0, 0.0), seed=2)
    w = fit_logistic_ipw(d)
    w_loo = leave_one_out_weights(d, "x2", "ipw")
    assert pop_var(w_loo.weights) == pytest.approx(pop_var(w.weights), rel=0.05)


def test_loo_only_confounder_leaves_uniform():
    d = logit_dataset(n=3000, coef=(1.0, 0.0), seed=2)
    w_loo = leave_one_out_weights(d, "x1", "ipw")
    assert pop_var(w_loo.weights) < 0.01


def test_loo_group():
    d = logit_dataset(n=500, coef=(1.0, 0.5, 0.3), seed=4)
    w = leave_one_out_weights(d, ["x1", "x2"], "ebal")
    assert w.covariates_used == ("x3",)


def test_weightset_rejects_nonpositive():
    with pytest.raises(DegenerateWeightsError):
        WeightSet(np.array([1.0, 0.0, 2.0]))


def test_weights_csv_round_trip(tmp_path):
    w = external_weights([0.3, 1.7, 2.2])
    write_weights_csv(w, tmp_path / "w.csv")
    back = read_weights_csv(tmp_path / "w.csv", n_control=3)
    np.testing.assert_array_equal(back.weights, w.weights)
    with pytest.raises(ValueError):
        read_weights_csv(tmp_path / "w.csv", n_control=4)
