"""Hajek-weighted ATT estimator and the sample-bounds diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .dataset import Dataset
from .weights import WeightSet


@dataclass(frozen=True)
class AttEstimate:
    estimate: float
    treated_mean: float
    weighted_control_mean: float


@dataclass(frozen=True)
class SampleBoundsDiagnostic:
    control_outcome_range: tuple[float, float]
    att_sample_bounds: tuple[float, float]
    p_A: float | None = None
    implied_external_mean_interval: tuple[float, float] | None = None


def hajek_mean(y: ArrayLike, w: ArrayLike) -> float:
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(np.dot(y, w) / w.sum())


def _weights(w: WeightSet | ArrayLike) -> np.ndarray:
    return w.weights if isinstance(w, WeightSet) else np.asarray(w, dtype=float)


def estimate_att(d: Dataset, w: WeightSet | ArrayLike) -> AttEstimate:
    """Treated mean minus the weighted control mean (ratio form).

    Weights are renormalized inside the ratio, so any positive rescaling of
    ``w`` gives the same estimate.
    """
    wv = _weights(w)
    yc = d.outcomes[d.treatment == 0]
    if wv.size != yc.size:
        raise ValueError(f"{wv.size} weights for {yc.size} control units")
    mt = d.treated_mean
    mc = hajek_mean(yc, wv)
    return AttEstimate(mt - mc, mt, mc)


def sample_bounds(d: Dataset, p_A: float | None = None) -> SampleBoundsDiagnostic:
    """Range of ATT values any Hajek-weighted control mean can produce.

    With ``p_A`` (the share of unobserved control-group outcomes inside the
    observed control range) the interval that the mean of the outcomes
    falling outside that range must lie in for the sample bounds to be valid
    is also returned.
    """
    yc = d.outcomes[d.treatment == 0]
    lo, hi = float(yc.min()), float(yc.max())
    mt = d.treated_mean
    bounds = (mt - hi, mt - lo)
    implied = None
    if p_A is not None:
        if not 0.0 <= p_A < 1.0:
            raise ValueError("p_A must satisfy 0 <= p_A < 1 (interval undefined at p_A = 1)")
        a = 1.0 / (1.0 - p_A)
        b = p_A / (1.0 - p_A)
        implied = (a * lo - b * hi, a * hi - b * lo)
    return SampleBoundsDiagnostic((lo, hi), bounds, p_A, implied)
