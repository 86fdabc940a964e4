"""Percentile-bootstrap confidence intervals for sensitivity bounds.

Each replicate resamples ``n`` units i.i.d. from the pooled sample, refits
the weights, and records what the bound functions need: the point
estimate and control-group moments for the variance-based bound, and the
control outcomes and weights for the marginal sensitivity model. One
replicate set is shared across every R^2 (or Lambda) value, so sweeps and
bisection searches are cheap and monotone.

The union interval takes the ``alpha/2`` percentile of the replicate lower
bounds and the ``1 - alpha/2`` percentile of the replicate upper bounds.
Percentiles are nearest-rank: ``sorted[ceil(q * B) - 1]``.

Replicate ``r`` draws from its own PCG64 stream keyed by ``(seed, r,
attempt)``, so results do not depend on scheduling or thread count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dataset import Dataset
from .estimator import estimate_att, hajek_mean
from .msm import msm_extrema
from .vbm import (
    R2_MAX,
    WORST_CASE,
    CorrelationBoundSpec,
    as_r2,
    bias_bound_from_moments,
    control_moments,
)
from .weights import FitConfig, WeightFitError, WeightSet, canonical_method, fit_weights

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 10
MAX_FAILURE_RATE = 0.05


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    alpha: float = 0.05
    seed: int = 0
    parallelism: int = 1

    def __post_init__(self) -> None:
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def replicate_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def nearest_rank(values: ArrayLike, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    k = min(max(math.ceil(q * v.size) - 1, 0), v.size - 1)
    return float(v[k])


def union_ci(lows: ArrayLike, highs: ArrayLike, alpha: float) -> tuple[float, float]:
    return nearest_rank(lows, alpha / 2), nearest_rank(highs, 1 - alpha / 2)


@dataclass
class ReplicateSet:
    """Per-replicate statistics, indexed by replicate number."""

    tau: NDArray[np.float64]
    treated_mean: NDArray[np.float64]
    var_y: NDArray[np.float64]
    var_w: NDArray[np.float64]
    cor_wy: NDArray[np.float64]
    control_y: list[NDArray[np.float64]] = field(repr=False)
    control_w: list[NDArray[np.float64]] = field(repr=False)
    failures: int = 0
    degenerate_redraws: int = 0
    fit_redraws: int = 0

    @property
    def B(self) -> int:
        return self.tau.size

    def vbm_bounds(self, r2: float, spec: CorrelationBoundSpec = WORST_CASE) -> tuple[NDArray, NDArray]:
        bias = np.array(
            [
                bias_bound_from_moments(vy, vw, c, r2, spec).max_bias
                for vy, vw, c in zip(self.var_y, self.var_w, self.cor_wy)
            ]
        )
        return self.tau - bias, self.tau + bias

    def vbm_ci(self, r2: float, spec: CorrelationBoundSpec = WORST_CASE, alpha: float = 0.05):
        return union_ci(*self.vbm_bounds(r2, spec), alpha)

    def msm_bounds(self, lam: float) -> tuple[NDArray, NDArray]:
        lo = np.empty(self.B)
        hi = np.empty(self.B)
        for b in range(self.B):
            s = msm_extrema(self.control_y[b], self.control_w[b], lam)
            lo[b] = self.treated_mean[b] - s.max_weighted_mean
            hi[b] = self.treated_mean[b] - s.min_weighted_mean
        return lo, hi

    def msm_ci(self, lam: float, alpha: float = 0.05) -> tuple[float, float]:
        return union_ci(*self.msm_bounds(lam), alpha)

    def percentile_ci(self, alpha: float = 0.05) -> tuple[float, float]:
        return union_ci(self.tau, self.tau, alpha)


def _replicate_fitter(
    d: Dataset, method: str, cols, fit_cfg: FitConfig, weights: WeightSet | None
) -> Callable[[Dataset, NDArray], NDArray]:
    if canonical_method(method) == "external":
        if weights is None:
            raise ValueError("external method needs the weights to resample")
        unit_w = np.full(d.n, np.nan)
        unit_w[d.treatment == 0] = weights.weights

        def fit(sample: Dataset, idx: NDArray) -> NDArray:
            return unit_w[idx][sample.treatment == 0]

        return fit

    def fit(sample: Dataset, idx: NDArray) -> NDArray:
        return fit_weights(sample, method, cols, fit_cfg).weights

    return fit


def draw_replicates(
    d: Dataset,
    method: str,
    cols: Sequence[str | int] | None = None,
    fit_cfg: FitConfig = FitConfig(),
    cfg: BootstrapConfig = BootstrapConfig(),
    weights: WeightSet | None = None,
) -> ReplicateSet:
    """Draw ``cfg.B`` bootstrap replicates and record their statistics.

    A draw with fewer than 2 control or no treated units, or whose weight fit
    fails, is redrawn (up to ``MAX_ATTEMPTS`` per replicate). Replicates that
    exhaust their attempts count as failures; more than 5% aborts.
    """
    fit = _replicate_fitter(d, method, cols, fit_cfg, weights)
    n = d.n

    def one(r: int):
        degenerate = redraws = 0
        for attempt in range(MAX_ATTEMPTS):
            idx = replicate_rng(cfg.seed, r, attempt).integers(0, n, size=n)
            z = d.treatment[idx]
            nt = int(z.sum())
            if nt < 1 or n - nt < 2:
                degenerate += 1
                continue
            sample = d.take(idx)
            try:
                w = fit(sample, idx)
                w = w / w.mean()
            except (WeightFitError, np.linalg.LinAlgError, FloatingPointError):
                redraws += 1
                continue
            yc = sample.outcomes[sample.treatment == 0]
            vy, vw, c = control_moments(yc, w)
            if vw <= 0.0:
                redraws += 1
                continue
            mt = sample.treated_mean
            return (mt - hajek_mean(yc, w), mt, vy, vw, c, yc, w), degenerate, redraws
        return None, degenerate, redraws

    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as ex:
            results = list(ex.map(one, range(cfg.B)))
    else:
        results = [one(r) for r in range(cfg.B)]

    ok = [res for res, _, _ in results if res is not None]
    failures = cfg.B - len(ok)
    degenerate = sum(r[1] for r in results)
    redraws = sum(r[2] for r in results)
    if failures > MAX_FAILURE_RATE * cfg.B:
        raise BootstrapError(f"{failures} of {cfg.B} bootstrap replicates failed to fit")
    if failures:
        log.warning("%d bootstrap replicates failed and were dropped", failures)
    if len(ok) < 2:
        raise BootstrapError("fewer than 2 usable bootstrap replicates")
    cols_ = list(zip(*ok))
    return ReplicateSet(
        tau=np.array(cols_[0]),
        treated_mean=np.array(cols_[1]),
        var_y=np.array(cols_[2]),
        var_w=np.array(cols_[3]),
        cor_wy=np.array(cols_[4]),
        control_y=list(cols_[5]),
        control_w=list(cols_[6]),
        failures=failures,
        degenerate_redraws=degenerate,
        fit_redraws=redraws,
    )


@dataclass(frozen=True)
class IntervalPair:
    point: tuple[float, float]
    ci: tuple[float, float]


def _point_fit(d: Dataset, method: str, cols, fit_cfg: FitConfig, weights: WeightSet | None):
    if weights is None:
        weights = fit_weights(d, method, cols, fit_cfg)
    est = estimate_att(d, weights)
    yc = d.outcomes[d.treatment == 0]
    return weights, est, control_moments(yc, weights.weights)


def bootstrap_ci(
    d: Dataset,
    method: str,
    cols: Sequence[str | int] | None,
    r2,
    spec: CorrelationBoundSpec = WORST_CASE,
    cfg: BootstrapConfig = BootstrapConfig(),
    fit_cfg: FitConfig = FitConfig(),
    weights: WeightSet | None = None,
    replicates: ReplicateSet | None = None,
) -> IntervalPair:
    """Full-sample point interval and union bootstrap CI at one R^2."""
    r2 = float(as_r2(r2))
    w, est, (vy, vw, c) = _point_fit(d, method, cols, fit_cfg, weights)
    mb = bias_bound_from_moments(vy, vw, c, r2, spec).max_bias
    reps = replicates or draw_replicates(d, method, cols, fit_cfg, cfg, w)
    return IntervalPair((est.estimate - mb, est.estimate + mb), reps.vbm_ci(r2, spec, cfg.alpha))


@dataclass(frozen=True)
class StarResult:
    value: float
    saturated: bool = False

    def __float__(self) -> float:
        return self.value


def _contains(iv: tuple[float, float], x: float) -> bool:
    return iv[0] <= x <= iv[1]


def bisect_star(
    interval: Callable[[float], tuple[float, float]],
    lo: float,
    hi: float,
    null_value: float = 0.0,
    tol: float = 1e-3,
) -> StarResult:
    """Smallest parameter in [lo, hi] whose interval contains ``null_value``.

    Assumes intervals widen with the parameter. Returns ``lo`` if the interval
    already contains the null there, and ``hi`` flagged saturated if it never
    does.
    """
    if _contains(interval(lo), null_value):
        return StarResult(lo)
    if not _contains(interval(hi), null_value):
        return StarResult(hi, saturated=True)
    a, b = lo, hi
    while b - a > tol:
        m = 0.5 * (a + b)
        if _contains(interval(m), null_value):
            b = m
        else:
            a = m
    return StarResult(b)


def find_r2_star(
    d: Dataset,
    method: str,
    cols: Sequence[str | int] | None = None,
    spec: CorrelationBoundSpec = WORST_CASE,
    cfg: BootstrapConfig = BootstrapConfig(),
    null_value: float = 0.0,
    fit_cfg: FitConfig = FitConfig(),
    weights: WeightSet | None = None,
    replicates: ReplicateSet | None = None,
    use_point_bounds: bool = False,
) -> StarResult:
    """Smallest R^2 on [0, 0.999] whose CI (or point interval) contains the null."""
    w, est, (vy, vw, c) = _point_fit(d, method, cols, fit_cfg, weights)
    if use_point_bounds:

        def interval(r2: float):
            mb = bias_bound_from_moments(vy, vw, c, r2, spec).max_bias
            return (est.estimate - mb, est.estimate + mb)

    else:
        reps = replicates or draw_replicates(d, method, cols, fit_cfg, cfg, w)

        def interval(r2: float):
            return reps.vbm_ci(r2, spec, cfg.alpha)

    return bisect_star(interval, 0.0, R2_MAX, null_value)


def find_lambda_star(
    d: Dataset,
    method: str,
    cols: Sequence[str | int] | None = None,
    cfg: BootstrapConfig = BootstrapConfig(),
    null_value: float = 0.0,
    lambda_max: float = 100.0,
    fit_cfg: FitConfig = FitConfig(),
    weights: WeightSet | None = None,
    replicates: ReplicateSet | None = None,
    use_point_bounds: bool = False,
) -> StarResult:
    """Smallest Lambda on [1, lambda_max] whose MSM interval contains the null.

    Sample boundedness can keep the interval away from the null for every
    Lambda; the result is then ``lambda_max`` flagged saturated.
    """
    w, est, _ = _point_fit(d, method, cols, fit_cfg, weights)
    yc = d.outcomes[d.treatment == 0]
    if use_point_bounds:

        def interval(lam: float):
            s = msm_extrema(yc, w, lam, treated_mean=d.treated_mean)
            return s.att_interval

    else:
        reps = replicates or draw_replicates(d, method, cols, fit_cfg, cfg, w)

        def interval(lam: float):
            return reps.msm_ci(lam, cfg.alpha)

    return bisect_star(interval, 1.0, float(lambda_max), null_value)


@dataclass
class SensitivityReport:
    rows: list[tuple[float, float, float, float, float]]
    estimate: float
    r2_star: float | None = None
    r2_star_saturated: bool = False
    benchmark_overlay: list[tuple[str, float]] | None = None
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("r2", "point_lo", "point_hi", "ci_lo", "ci_hi")
    SCHEMA_VERSION = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.SCHEMA_VERSION,
            "estimate": self.estimate,
            "rows": [dict(zip(self.CSV_COLUMNS, r)) for r in self.rows],
            "r2_star": self.r2_star,
            "r2_star_saturated": self.r2_star_saturated,
            "benchmark_overlay": (
                None
                if self.benchmark_overlay is None
                else [{"covariate": c, "r2": v} for c, v in self.benchmark_overlay]
            ),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(self.CSV_COLUMNS)
            for r in self.rows:
                out.writerow([repr(float(v)) for v in r])


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive within 1e-9) or a comma list."""
    if ":" in text:
        a, b, s = (float(t) for t in text.split(":"))
        if s <= 0:
            raise ValueError("grid step must be positive")
        k = int(math.floor((b - a) / s + 1e-9))
        return [round(a + i * s, 12) for i in range(k + 1)]
    return [float(t) for t in text.split(",") if t.strip()]


def sweep_report(
    d: Dataset,
    method: str,
    cols: Sequence[str | int] | None,
    spec: CorrelationBoundSpec,
    cfg: BootstrapConfig,
    r2_grid: Sequence[float],
    fit_cfg: FitConfig = FitConfig(),
    weights: WeightSet | None = None,
    benchmark_overlay: list[tuple[str, float]] | None = None,
    null_value: float = 0.0,
    replicates: ReplicateSet | None = None,
) -> SensitivityReport:
    grid = [float(g) for g in r2_grid]
    if any(not 0.0 <= g <= R2_MAX for g in grid):
        raise ValueError(f"R^2 grid values must lie in [0, {R2_MAX}]")
    if grid != sorted(grid):
        raise ValueError("R^2 grid must be sorted")
    w, est, (vy, vw, c) = _point_fit(d, method, cols, fit_cfg, weights)
    reps = replicates or draw_replicates(d, method, cols, fit_cfg, cfg, w)
    rows = []
    for g in grid:
        mb = bias_bound_from_moments(vy, vw, c, g, spec).max_bias
        lo, hi = reps.vbm_ci(g, spec, cfg.alpha)
        rows.append((g, est.estimate - mb, est.estimate + mb, lo, hi))
    star = find_r2_star(
        d, method, cols, spec, cfg, null_value, fit_cfg, weights=w, replicates=reps
    )
    meta = {
        "method": w.method,
        "covariates": list(w.covariates_used),
        "rho_spec": str(spec),
        "B": cfg.B,
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "replicate_failures": reps.failures,
        "degenerate_redraws": reps.degenerate_redraws,
        "fit_redraws": reps.fit_redraws,
        "percentile": "nearest-rank",
    }
    if spec.mode == "relative_k":
        meta["note"] = "k_rel held fixed across the R^2 grid; rho recomputed per R^2"
    return SensitivityReport(rows, est.estimate, star.value, star.saturated, benchmark_overlay, meta)
