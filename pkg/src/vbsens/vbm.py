"""Variance-based sensitivity model.

The model bounds the variance of the ideal weights ``w*`` relative to the
estimated weights ``w``::

    1 <= var(w*) / var(w) <= 1 / (1 - R^2)

with the weight error ``w* - w`` uncorrelated with ``w``. Under that set the
largest bias of the Hajek estimator has the closed form::

    max_bias = rho * sqrt(R^2 / (1 - R^2) * var(Y) * var(w))

where all moments are over the control group and ``rho`` defaults to the
worst case ``sqrt(1 - cor(w, Y)^2)``.

All moments use the population convention (divide by n). With it the bias
factorization and the weighted L2 identity hold exactly in finite samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dataset import Dataset
from .estimator import AttEstimate
from .moments import pop_cor, pop_var
from .weights import WeightSet

R2_MAX = 0.999


class ModelViolationError(ValueError):
    """Inputs fall outside the variance-based sensitivity model."""


def _as_array(w: WeightSet | ArrayLike) -> NDArray:
    return w.weights if isinstance(w, WeightSet) else np.asarray(w, dtype=float)


@dataclass(frozen=True)
class R2Param:
    value: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.value < 1.0:
            raise ValueError(f"R^2 must lie in [0, 1), got {self.value}")

    def __float__(self) -> float:
        return float(self.value)


def as_r2(r2: R2Param | float) -> R2Param:
    return r2 if isinstance(r2, R2Param) else R2Param(float(r2))


@dataclass(frozen=True)
class CorrelationBoundSpec:
    mode: str = "worst_case"
    k_rel: float | None = None
    fixed_rho: float | None = None

    def __post_init__(self) -> None:
        if self.mode == "worst_case":
            if self.k_rel is not None or self.fixed_rho is not None:
                raise ValueError("worst_case takes no parameters")
        elif self.mode == "relative_k":
            if self.k_rel is None or self.fixed_rho is not None:
                raise ValueError("relative_k needs k_rel only")
        elif self.mode == "fixed":
            if self.fixed_rho is None or self.k_rel is not None:
                raise ValueError("fixed needs fixed_rho only")
            if not 0.0 <= self.fixed_rho <= 1.0:
                raise ValueError("fixed_rho must lie in [0, 1]")
        else:
            raise ValueError(f"unknown correlation-bound mode {self.mode!r}")

    @classmethod
    def parse(cls, text: str) -> CorrelationBoundSpec:
        """Parse ``worst``, ``fixed:<rho>`` or ``relk:<k>``."""
        head, _, arg = text.partition(":")
        if head in ("worst", "worst_case") and not arg:
            return cls()
        if head == "fixed" and arg:
            return cls("fixed", fixed_rho=float(arg))
        if head in ("relk", "relative_k") and arg:
            return cls("relative_k", k_rel=float(arg))
        raise ValueError(f"bad correlation bound {text!r}; use worst | fixed:<v> | relk:<k>")

    def __str__(self) -> str:
        if self.mode == "fixed":
            return f"fixed:{self.fixed_rho!r}"
        if self.mode == "relative_k":
            return f"relk:{self.k_rel!r}"
        return "worst"


WORST_CASE = CorrelationBoundSpec()


@dataclass(frozen=True)
class BiasBound:
    correlation_bound: float
    imbalance_factor: float
    scaling_factor: float
    max_bias: float
    rho_used: float


def r2_from_weight_pair(w: WeightSet | ArrayLike, w_star: WeightSet | ArrayLike) -> R2Param:
    """``1 - var(w) / var(w*)`` over the control units.

    WeightSets arrive mean-1 normalized; bare arrays are used as given.
    """
    vw = pop_var(_as_array(w))
    vs = pop_var(_as_array(w_star))
    if vw <= 0.0:
        raise ModelViolationError("var(w) = 0: uniform estimated weights are outside the model")
    if vs < vw * (1 - 1e-12):
        raise ModelViolationError(f"var(w*) = {vs:.6g} < var(w) = {vw:.6g}")
    return R2Param(max(0.0, 1.0 - vw / vs))


def control_moments(y: ArrayLike, w: ArrayLike) -> tuple[float, float, float]:
    """(var(Y), var(w), cor(w, Y)) over the control units."""
    return pop_var(y), pop_var(w), pop_cor(w, y)


def rho_for(spec: CorrelationBoundSpec, cor_wy: float, r2: float) -> float:
    worst = math.sqrt(max(0.0, 1.0 - cor_wy * cor_wy))
    if spec.mode == "worst_case":
        return worst
    if spec.mode == "fixed":
        return min(float(spec.fixed_rho), worst)
    # relative_k: cor(w,Y)/sqrt(R^2) * (sqrt(1-R^2) - k), sign dropped, clamped
    k = float(spec.k_rel)
    if r2 <= 0.0:
        return worst
    raw = cor_wy / math.sqrt(r2) * (math.sqrt(1.0 - r2) - k)
    return min(abs(raw), worst)


def bias_bound_from_moments(
    var_y: float, var_w: float, cor_wy: float, r2: float, spec: CorrelationBoundSpec = WORST_CASE
) -> BiasBound:
    if var_w <= 0.0:
        raise ModelViolationError("var(w) = 0: uniform estimated weights are outside the model")
    if not 0.0 <= r2 < 1.0:
        raise ValueError(f"R^2 must lie in [0, 1), got {r2}")
    corr_bound = math.sqrt(max(0.0, 1.0 - cor_wy * cor_wy))
    imbalance = r2 / (1.0 - r2)
    scaling = var_y * var_w
    rho = rho_for(spec, cor_wy, r2)
    return BiasBound(corr_bound, imbalance, scaling, rho * math.sqrt(imbalance * scaling), rho)


def optimal_bias_bound(
    d: Dataset | ArrayLike,
    w: WeightSet | ArrayLike,
    r2: R2Param | float,
    spec: CorrelationBoundSpec = WORST_CASE,
) -> BiasBound:
    """Closed-form maximum bias of the weighted estimator at a fixed R^2.

    ``d`` may be a Dataset or directly the control outcomes. Zero outcome
    variance gives a zero bound (reweighting cannot move a constant).
    """
    yc = d.outcomes[d.treatment == 0] if isinstance(d, Dataset) else np.asarray(d, dtype=float)
    wv = _as_array(w)
    if wv.size != yc.size:
        raise ValueError(f"{wv.size} weights for {yc.size} control outcomes")
    var_y, var_w, cor_wy = control_moments(yc, wv)
    if spec.mode == "relative_k" and cor_wy != 0.0 and abs(spec.k_rel) > 1.0 / abs(cor_wy) + 1e-12:
        raise ValueError(f"|k_rel| = {abs(spec.k_rel)} exceeds 1/|cor(w,Y)| = {1 / abs(cor_wy):.6g}")
    return bias_bound_from_moments(var_y, var_w, cor_wy, float(as_r2(r2)), spec)


def adjusted_estimate_range(att: AttEstimate | float, b: BiasBound | float) -> tuple[float, float]:
    est = att.estimate if isinstance(att, AttEstimate) else float(att)
    mb = b.max_bias if isinstance(b, BiasBound) else float(b)
    return (est - mb, est + mb)


def weighted_l2_identity_check(w: WeightSet | ArrayLike, w_star: WeightSet | ArrayLike) -> float:
    """Residual of the weighted-L2 form of the model constraint.

    With errors ``l_i = w*_i / w_i`` and ``nu(w_i) = w_i^2 / E(w^2)`` the
    squared weighted norm ``mean(l^2 nu)`` must equal ``k / (1 - R^2)`` with
    ``k = 1 - R^2 / E(w^2)``. Both inputs are taken mean-1.
    """
    wv = _as_array(w)
    ws = _as_array(w_star)
    if np.any(wv == 0):
        raise ZeroDivisionError("weighted L2 norm undefined for zero weights")
    wv = wv / wv.mean()
    ws = ws / ws.mean()
    r2 = float(r2_from_weight_pair(wv, ws))
    ew2 = float(np.mean(wv * wv))
    lam = ws / wv
    nu = wv * wv / ew2
    lhs = float(np.mean(lam * lam * nu))
    k = 1.0 - r2 / ew2
    return abs(lhs - k / (1.0 - r2))


def extremal_weights(y: ArrayLike, w: ArrayLike, r2: float, sign: int = 1) -> NDArray:
    """Weights in the model attaining the worst-case bias.

    ``w + a * e`` where ``e`` is the part of the centred outcome orthogonal
    to the centred weights, scaled so ``var(a e) = var(w) R^2 / (1 - R^2)``.
    May contain non-positive entries when the bound is large.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    w = w / w.mean()
    wc = w - w.mean()
    yc = y - y.mean()
    e = yc - (np.dot(yc, wc) / np.dot(wc, wc)) * wc
    ve = pop_var(e)
    if ve == 0.0 or r2 == 0.0:
        return w.copy()
    a = math.sqrt(pop_var(w) * r2 / (1.0 - r2) / ve)
    # bias = estimate(w) - estimate(w~) = mean(Y w~) - mean(Y w): positive direction is +e
    return w + sign * a * e
