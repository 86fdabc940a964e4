"""Marginal sensitivity model: extremal Hajek means under a multiplicative box.

For weights ``w~_i`` in ``[w_i / L, L * w_i]`` the weighted mean
``sum(Y w~) / sum(w~)`` is linear-fractional, so its maximum is attained at
a vertex where every unit above some outcome threshold takes the upper
weight and every unit below takes the lower one (the reverse for the
minimum). Sorting once and scanning all ``n + 1`` thresholds with prefix
sums gives the exact global extrema in O(n log n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dataset import Dataset
from .moments import pop_cor, pop_var
from .weights import WeightSet


@dataclass(frozen=True)
class LambdaParam:
    value: float

    def __post_init__(self) -> None:
        if not self.value >= 1.0:
            raise ValueError(f"Lambda must be >= 1, got {self.value}")

    def __float__(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class MsmSolution:
    max_weighted_mean: float
    min_weighted_mean: float
    psi: float
    # True where the unit takes the upper weight L * w_i
    argmax_assignment: NDArray[np.bool_]
    argmin_assignment: NDArray[np.bool_]
    att_interval: tuple[float, float] | None = None


def _w(w: WeightSet | ArrayLike) -> NDArray:
    return w.weights if isinstance(w, WeightSet) else np.asarray(w, dtype=float)


def _scan(ys: NDArray, lo: NDArray, hi: NDArray) -> tuple[NDArray, NDArray]:
    """Weighted means for every threshold k: units [0, k) get ``lo``, [k, n) get ``hi``."""
    zero = np.zeros(1)
    lo_w = np.concatenate([zero, np.cumsum(lo)])
    lo_yw = np.concatenate([zero, np.cumsum(lo * ys)])
    hi_w = np.concatenate([zero, np.cumsum(hi[::-1])])[::-1]
    hi_yw = np.concatenate([zero, np.cumsum((hi * ys)[::-1])])[::-1]
    return (lo_yw + hi_yw), (lo_w + hi_w)


def msm_extrema(
    control_y: ArrayLike,
    w: WeightSet | ArrayLike,
    lam: LambdaParam | float,
    treated_mean: float | None = None,
) -> MsmSolution:
    """Exact max/min of the Hajek control mean over the Lambda box.

    Ties in the outcome are broken by original index; any tie-break gives the
    same objective value.
    """
    y = np.asarray(control_y, dtype=float)
    wv = _w(w)
    L = float(lam.value if isinstance(lam, LambdaParam) else LambdaParam(float(lam)).value)
    if y.size < 1 or wv.size != y.size:
        raise ValueError(f"{wv.size} weights for {y.size} control outcomes")
    if np.any(wv <= 0):
        raise ValueError("weights must be strictly positive")

    order = np.argsort(y, kind="stable")
    ys, ws = y[order], wv[order]
    small, big = ws / L, ws * L

    num, den = _scan(ys, small, big)
    means_hi = num / den
    kmax = int(np.argmax(means_hi))
    num, den = _scan(ys, big, small)
    means_lo = num / den
    kmin = int(np.argmin(means_lo))

    n = y.size
    up_max = np.zeros(n, dtype=bool)
    up_max[order[kmax:]] = True
    up_min = np.zeros(n, dtype=bool)
    up_min[order[:kmin]] = True

    vmax = _realized_mean(y, wv, L, up_max)
    vmin = _realized_mean(y, wv, L, up_min)
    att = None if treated_mean is None else (treated_mean - vmax, treated_mean - vmin)
    return MsmSolution(vmax, vmin, max(0.0, vmax - vmin), up_max, up_min, att)


def _realized_mean(y: NDArray, w: NDArray, L: float, upper: NDArray) -> float:
    wt = np.where(upper, w * L, w / L)
    return float(np.dot(y, wt) / wt.sum())


def msm_att_interval(d: Dataset, w: WeightSet | ArrayLike, lam: LambdaParam | float) -> MsmSolution:
    return msm_extrema(d.outcomes[d.treatment == 0], w, lam, treated_mean=d.treated_mean)


def width_threshold(d: Dataset | ArrayLike, w: WeightSet | ArrayLike, psi: float) -> float:
    """Largest R^2 at which the variance-based bounds are no wider than ``psi``.

    ``psi^2 / (4 (1 - cor(w,Y)^2) var(w) var(Y) + psi^2)`` over the controls.
    ``d`` may be a Dataset or the control outcomes directly.
    """
    yc = d.outcomes[d.treatment == 0] if isinstance(d, Dataset) else np.asarray(d, dtype=float)
    wv = _w(w)
    vy, vw = pop_var(yc), pop_var(wv)
    if vy <= 0.0 or vw <= 0.0:
        raise ValueError("threshold undefined: var(Y) or var(w) is zero over the controls")
    if psi < 0:
        raise ValueError("psi must be >= 0")
    if math.isinf(psi):
        return 1.0
    c = pop_cor(wv, yc)
    return threshold_from_moments(vy, vw, c, psi)


def threshold_from_moments(var_y: float, var_w: float, cor_wy: float, psi: float) -> float:
    psi2 = psi * psi
    den = 4.0 * (1.0 - cor_wy * cor_wy) * var_w * var_y + psi2
    if psi2 == 0.0:
        return 0.0
    return psi2 / den


def benchmark_lambda(w: WeightSet | ArrayLike, w_loo: WeightSet | ArrayLike) -> LambdaParam:
    """Largest multiplicative discrepancy ``max_i max(w_i/v_i, v_i/w_i)``."""
    a, b = _w(w), _w(w_loo)
    if a.shape != b.shape:
        raise ValueError("weight sets are not aligned")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("weights must be strictly positive")
    r = a / b
    return LambdaParam(float(max(r.max(), (1.0 / r).max(), 1.0)))
