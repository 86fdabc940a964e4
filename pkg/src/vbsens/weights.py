"""Control-unit weights targeting the ATT.

Two estimators are provided, both returning weights on the control units
normalized to mean 1 over the control group:

* ``fit_logistic_ipw``: odds P(Z=1|x)/P(Z=0|x) from a logistic regression
  fitted by iteratively reweighted least squares (Newton on the
  log-likelihood).
* ``fit_entropy_balancing``: exponential tilting of the control units so
  their weighted covariate means equal the treated means, obtained by Newton
  iterations on the convex dual.

Covariates are centred and scaled internally before fitting. Odds and
tilting weights are invariant to that reparameterization, and it keeps the
Newton systems well conditioned.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, logsumexp

from .dataset import Dataset

METHODS = ("logistic_ipw", "entropy_balancing", "external")
_ALIASES = {"ipw": "logistic_ipw", "ebal": "entropy_balancing"}

WEIGHT_FLOOR = 1e-12
MAX_LINEAR_PREDICTOR = 30.0


class WeightFitError(RuntimeError):
    """A weight fit failed (non-convergence, separation, infeasible balance)."""


class SeparationError(WeightFitError):
    pass


class InfeasibleBalanceError(WeightFitError):
    def __init__(self, message: str, covariate: str | None = None):
        super().__init__(message)
        self.covariate = covariate


class DegenerateWeightsError(WeightFitError):
    pass


def canonical_method(method: str) -> str:
    m = _ALIASES.get(method, method)
    if m not in METHODS:
        raise ValueError(f"unknown weighting method {method!r}")
    return m


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-10
    ridge: float = 1e-8
    # entropy balancing: also balance second moments of each column
    balance_second_moments: bool = False

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class WeightSet:
    """Control-unit weights, mean 1 over the control group, in control-row order."""

    weights: NDArray[np.float64]
    method: str = "external"
    covariates_used: tuple[str, ...] = ()
    converged: bool = True
    iterations: int = 0
    coef: NDArray[np.float64] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise DegenerateWeightsError("weights must be finite and strictly positive")
        w = w / w.mean()
        if w.min() < WEIGHT_FLOOR:
            raise DegenerateWeightsError(
                f"normalized weight {w.min():.3g} below floor {WEIGHT_FLOOR}"
            )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "method", canonical_method(self.method))
        object.__setattr__(self, "covariates_used", tuple(self.covariates_used))

    def __len__(self) -> int:
        return self.weights.size


def external_weights(values: ArrayLike) -> WeightSet:
    """Wrap user-supplied (e.g. synthetic true) weights; rescaled to mean 1."""
    return WeightSet(np.asarray(values, dtype=float), method="external")


def weights_from_propensities(p: ArrayLike) -> WeightSet:
    """ATT odds weights p/(1-p) from known control-unit propensities."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    return WeightSet(p / (1 - p), method="external")


def _standardize(x: NDArray, ref: NDArray) -> NDArray:
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd


def _names(d: Dataset, idx: Sequence[int]) -> tuple[str, ...]:
    return tuple(d.covariate_names[j] for j in idx)


def fit_logistic_ipw(
    d: Dataset, cols: Sequence[str | int] | None = None, cfg: FitConfig = FitConfig()
) -> WeightSet:
    """Logistic propensity model fitted by IRLS; returns control odds weights.

    ``converged`` is True iff the largest component of the mean score falls
    below ``cfg.gradient_tolerance``. A coefficient norm that keeps growing
    without the score vanishing is reported as perfect separation.
    """
    idx = d.resolve_columns(cols)
    x = _standardize(d.covariates[:, idx], d.covariates[:, idx])
    X = np.column_stack([np.ones(d.n), x])
    z = d.treatment.astype(float)
    n, k = X.shape

    def loglik(b: NDArray) -> float:
        eta = X @ b
        # log L = sum z*eta - log(1+e^eta)
        return float(np.dot(z, eta) - np.logaddexp(0.0, eta).sum())

    beta = np.zeros(k)
    zbar = z.mean()
    beta[0] = np.log(zbar / (1 - zbar))
    ll = loglik(beta)
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        p = expit(X @ beta)
        grad = X.T @ (z - p) / n
        if np.max(np.abs(grad)) < cfg.gradient_tolerance:
            converged = True
            it -= 1
            break
        wts = p * (1 - p)
        H = (X.T * wts) @ X / n + cfg.ridge * np.eye(k)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise WeightFitError("singular logistic Hessian; design is rank deficient") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.linalg.norm(beta[1:]) > 1e3 or not np.all(np.isfinite(beta)):
            raise SeparationError(
                "logistic coefficients diverge (perfect or quasi-complete separation)"
            )
    else:
        p = expit(X @ beta)
        grad = X.T @ (z - p) / n
        converged = bool(np.max(np.abs(grad)) < cfg.gradient_tolerance)

    eta = X @ beta
    # the score also vanishes along a separating direction; catch it by the fitted values
    if np.max(np.abs(eta)) > MAX_LINEAR_PREDICTOR:
        raise SeparationError(
            "fitted propensities are numerically 0 or 1 (perfect or quasi-complete separation)"
        )
    ctrl = d.treatment == 0
    odds = np.exp(eta[ctrl])
    return WeightSet(
        odds,
        method="logistic_ipw",
        covariates_used=_names(d, idx),
        converged=converged,
        iterations=it,
        coef=beta,
    )


def logistic_score(d: Dataset, cols: Sequence[str | int] | None, coef: ArrayLike) -> NDArray:
    """Mean score of the (internally standardized) logistic model at ``coef``."""
    idx = d.resolve_columns(cols)
    x = _standardize(d.covariates[:, idx], d.covariates[:, idx])
    X = np.column_stack([np.ones(d.n), x])
    p = expit(X @ np.asarray(coef))
    return X.T @ (d.treatment - p) / d.n


def fit_entropy_balancing(
    d: Dataset, cols: Sequence[str | int] | None = None, cfg: FitConfig = FitConfig()
) -> WeightSet:
    """Entropy balancing weights on the control units.

    Solves ``min_l log sum_i exp(l' (x_i - m))`` over controls, where ``m`` is
    the treated mean of the balance features. The gradient of this dual is
    the weighted imbalance, so convergence means exact first-moment balance.
    """
    idx = d.resolve_columns(cols)
    ctrl = d.treatment == 0
    raw = d.covariates[:, idx]
    feats = [raw]
    names = list(_names(d, idx))
    if cfg.balance_second_moments:
        feats.append(raw**2)
        names += [f"{s}^2" for s in names]
    F = np.column_stack(feats)
    Fc = F[ctrl]
    target = F[~ctrl].mean(axis=0)

    lo, hi = Fc.min(axis=0), Fc.max(axis=0)
    outside = (target < lo) | (target > hi)
    const = hi == lo
    if np.any(outside):
        j = int(np.flatnonzero(outside)[0])
        raise InfeasibleBalanceError(
            f"treated mean of {names[j]!r} lies outside the control range", names[j]
        )
    # a constant control column that already matches the target is balanced trivially
    keep = ~const
    sd = Fc.std(axis=0)
    D = (Fc[:, keep] - target[keep]) / sd[keep]
    k = D.shape[1]

    lam = np.zeros(k)
    converged = k == 0
    it = 0

    def dual(l: NDArray) -> float:
        return float(logsumexp(D @ l))

    f = dual(lam)
    for it in range(1, cfg.max_iterations + 1):
        if k == 0:
            it = 0
            break
        s = D @ lam
        q = np.exp(s - s.max())
        q /= q.sum()
        grad = D.T @ q
        if np.max(np.abs(grad)) < cfg.gradient_tolerance:
            converged = True
            it -= 1
            break
        Dc = D - grad
        H = (Dc.T * q) @ Dc + cfg.ridge * np.eye(k)
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise WeightFitError("singular balance Hessian; collinear covariates") from None
        t = 1.0
        slope = float(grad @ step)
        while True:
            cand = lam + t * step
            f_new = dual(cand)
            if f_new <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        lam, f = cand, f_new
        if np.linalg.norm(lam) > 1e4 or not np.isfinite(f):
            break

    if k:
        s = D @ lam
        q = np.exp(s - s.max())
        q /= q.sum()
        resid = D.T @ q
        converged = bool(np.max(np.abs(resid)) < cfg.gradient_tolerance)
        if not converged and (np.linalg.norm(lam) > 1e4 or it >= cfg.max_iterations):
            worst = int(np.argmax(np.abs(resid)))
            name = np.asarray(names, dtype=object)[keep][worst]
            raise InfeasibleBalanceError(
                f"entropy balancing dual diverged; worst-balanced covariate {name!r} "
                f"(standardized imbalance {resid[worst]:.3g})",
                str(name),
            )
        w = q
    else:
        w = np.ones(Fc.shape[0])
    return WeightSet(
        w,
        method="entropy_balancing",
        covariates_used=_names(d, idx),
        converged=converged,
        iterations=it,
        coef=lam,
    )


def fit_weights(
    d: Dataset,
    method: str,
    cols: Sequence[str | int] | None = None,
    cfg: FitConfig = FitConfig(),
) -> WeightSet:
    m = canonical_method(method)
    if m == "logistic_ipw":
        return fit_logistic_ipw(d, cols, cfg)
    if m == "entropy_balancing":
        return fit_entropy_balancing(d, cols, cfg)
    raise ValueError("external weights cannot be refitted")


def leave_one_out_weights(
    d: Dataset,
    j: int | str | Iterable[int | str],
    method: str,
    cfg: FitConfig = FitConfig(),
    cols: Sequence[str | int] | None = None,
) -> WeightSet:
    """Refit on ``cols`` (default: all) with covariate ``j`` removed.

    ``j`` may be a single name/index or a group of them, omitted jointly.
    """
    base = d.resolve_columns(cols)
    if isinstance(j, (int, np.integer, str)):
        j = [j]
    drop = set(d.resolve_columns(list(j)))
    if len(base) < 2:
        raise ValueError("leave-one-out needs at least 2 covariates")
    keep = [c for c in base if c not in drop]
    if not keep:
        raise ValueError("no covariates left after omission")
    return fit_weights(d, method, keep, cfg)


def write_weights_csv(w: WeightSet, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["weight"])
        for v in w.weights:
            out.writerow([repr(float(v))])


def read_weights_csv(path: str | Path, n_control: int | None = None) -> WeightSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty weight file")
    start = 0
    try:
        float(rows[0][0])
    except ValueError:
        start = 1
    vals = []
    for i, r in enumerate(rows[start:], start=1):
        if len(r) != 1:
            raise ValueError(f"{path}: row {i} must have exactly one column")
        vals.append(float(r[0]))
    if n_control is not None and len(vals) != n_control:
        raise ValueError(f"{path}: {len(vals)} weights for {n_control} control units")
    return external_weights(vals)
