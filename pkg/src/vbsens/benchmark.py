"""Leave-one-covariate-out benchmarking of sensitivity parameters.

Omitting covariate ``j`` and refitting gives weights ``w^-j``. The raw
variance shortfall ``R2_-j = 1 - var(w^-j) / var(w)`` is mapped to the
benchmarked ``R2_j = R2_-j / (1 + R2_-j)``, the R^2 of a confounder with the
same residual imbalance as ``j``. The same refit also benchmarks the
correlation term (``cor(w - w^-j, Y)``) and the MSM Lambda.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .estimator import estimate_att
from .inference import ReplicateSet
from .moments import pop_cor, pop_var
from .msm import benchmark_lambda, msm_extrema, width_threshold
from .vbm import CorrelationBoundSpec, adjusted_estimate_range, optimal_bias_bound
from .weights import FitConfig, WeightFitError, WeightSet, leave_one_out_weights

log = logging.getLogger(__name__)

Interval = tuple[float, float]


@dataclass(frozen=True)
class BenchmarkRow:
    covariate: str
    r2_loo_raw: float = math.nan
    r2_benchmarked: float = math.nan
    rho_benchmarked: float = math.nan
    lambda_benchmarked: float = math.nan
    mri: float | None = None
    vbm_interval: Interval | None = None
    vbm_interval_with_corr: Interval | None = None
    msm_interval: Interval | None = None
    vbm_ci: Interval | None = None
    vbm_ci_with_corr: Interval | None = None
    msm_ci: Interval | None = None
    psi: float = math.nan
    r2_threshold: float = math.nan
    clamped: bool = False
    mri_infinite: bool = False
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def benchmark_r2(r2_loo_raw: float) -> float:
    """Map the raw leave-one-out shortfall to the benchmarked R^2."""
    r = max(0.0, r2_loo_raw)
    return r / (1.0 + r)


def mri(r2_star: float, row: BenchmarkRow | float) -> tuple[float, bool]:
    """Minimum relative imbalance ``R2* / R2_j``.

    Returns ``(value, infinite_flag)``; a zero benchmark gives ``(inf, True)``.
    """
    r2b = row.r2_benchmarked if isinstance(row, BenchmarkRow) else float(row)
    if r2b <= 0.0:
        return math.inf, True
    return r2_star / r2b, False


def _label(d: Dataset, j) -> str:
    if isinstance(j, str):
        return j
    if isinstance(j, (int, np.integer)):
        return d.covariate_names[int(j)]
    return "+".join(_label(d, c) for c in j)


def benchmark_covariate(
    d: Dataset,
    w: WeightSet,
    j: int | str | Sequence[int | str],
    method: str,
    cfg: FitConfig = FitConfig(),
    cols: Sequence[str | int] | None = None,
    r2_star: float | None = None,
    replicates: ReplicateSet | None = None,
    alpha: float = 0.05,
) -> BenchmarkRow:
    """Benchmark one covariate (or a group of them, omitted jointly).

    Intervals are point bounds at the benchmarked parameters: worst-case VBM,
    VBM with ``rho = |rho_j|``, and MSM at ``Lambda_j``. If ``replicates``
    is given the matching bootstrap CIs are attached as well.
    """
    label = _label(d, j)
    vw = pop_var(w.weights)
    if vw <= 0.0:
        raise ValueError("var(w) = 0: benchmarking undefined for uniform weights")
    w_loo = leave_one_out_weights(d, j, method, cfg, cols)

    raw = 1.0 - pop_var(w_loo.weights) / vw
    clamped = raw < 0.0
    if clamped:
        warnings.warn(
            f"leave-one-out weights for {label!r} vary more than the full weights; "
            "benchmarked R^2 clamped to 0",
            stacklevel=2,
        )
    r2b = benchmark_r2(raw)

    yc = d.outcomes[d.treatment == 0]
    rho = pop_cor(w.weights - w_loo.weights, yc)
    lam = benchmark_lambda(w, w_loo).value

    est = estimate_att(d, w)
    worst = optimal_bias_bound(yc, w, r2b)
    relaxed = optimal_bias_bound(yc, w, r2b, CorrelationBoundSpec("fixed", fixed_rho=abs(rho)))
    sol = msm_extrema(yc, w, lam, treated_mean=d.treated_mean)
    try:
        thr = width_threshold(yc, w, sol.psi)
    except ValueError:
        thr = math.nan

    extra = {}
    if replicates is not None:
        extra = dict(
            vbm_ci=replicates.vbm_ci(r2b, alpha=alpha),
            vbm_ci_with_corr=replicates.vbm_ci(
                r2b, CorrelationBoundSpec("fixed", fixed_rho=abs(rho)), alpha
            ),
            msm_ci=replicates.msm_ci(lam, alpha),
        )

    m, inf = (None, False) if r2_star is None else mri(r2_star, r2b)
    return BenchmarkRow(
        covariate=label,
        r2_loo_raw=raw,
        r2_benchmarked=r2b,
        rho_benchmarked=rho,
        lambda_benchmarked=lam,
        mri=m,
        vbm_interval=adjusted_estimate_range(est, worst),
        vbm_interval_with_corr=adjusted_estimate_range(est, relaxed),
        msm_interval=sol.att_interval,
        psi=sol.psi,
        r2_threshold=thr,
        clamped=clamped,
        mri_infinite=inf,
        **extra,
    )


def benchmark_table(
    d: Dataset,
    w: WeightSet,
    method: str,
    cfg: FitConfig = FitConfig(),
    r2_star: float | None = None,
    cols: Sequence[str | int] | None = None,
    groups: dict[str, Sequence[str]] | None = None,
    replicates: ReplicateSet | None = None,
    alpha: float = 0.05,
) -> list[BenchmarkRow]:
    """One row per covariate in ``cols`` (column order), then one per group.

    A failed leave-one-out fit yields a row with ``error`` set; the other
    rows are still computed.
    """
    targets: list[tuple[str, object]] = [(d.covariate_names[j], j) for j in d.resolve_columns(cols)]
    for name, members in (groups or {}).items():
        targets.append((name, list(members)))
    rows = []
    for name, j in targets:
        try:
            row = benchmark_covariate(d, w, j, method, cfg, cols, r2_star, replicates, alpha)
            if isinstance(j, list):
                row = replace(row, covariate=name)
        except (WeightFitError, ValueError) as exc:
            log.warning("benchmark for %s failed: %s", name, exc)
            row = BenchmarkRow(covariate=name, error=str(exc))
        rows.append(row)
    return rows


TABLE_COLUMNS = (
    "covariate",
    "lambda",
    "msm_lo",
    "msm_hi",
    "r2",
    "rho",
    "vbm_lo",
    "vbm_hi",
    "vbm_corr_lo",
    "vbm_corr_hi",
    "r2_loo_raw",
    "mri",
    "psi",
    "r2_threshold",
    "msm_ci_lo",
    "msm_ci_hi",
    "vbm_ci_lo",
    "vbm_ci_hi",
    "vbm_corr_ci_lo",
    "vbm_corr_ci_hi",
    "error",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def row_record(r: BenchmarkRow) -> dict:
    def pair(iv):
        return (None, None) if iv is None else iv

    rec = dict(
        covariate=r.covariate,
        **{"lambda": r.lambda_benchmarked},
        r2=r.r2_benchmarked,
        rho=r.rho_benchmarked,
        r2_loo_raw=r.r2_loo_raw,
        mri=r.mri,
        psi=r.psi,
        r2_threshold=r.r2_threshold,
        error=r.error,
    )
    for key, iv in (
        ("msm", r.msm_interval),
        ("vbm", r.vbm_interval),
        ("vbm_corr", r.vbm_interval_with_corr),
        ("msm_ci", r.msm_ci),
        ("vbm_ci", r.vbm_ci),
        ("vbm_corr_ci", r.vbm_ci_with_corr),
    ):
        rec[f"{key}_lo"], rec[f"{key}_hi"] = pair(iv)
    return rec


def write_table_csv(rows: list[BenchmarkRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TABLE_COLUMNS)
        for r in rows:
            rec = row_record(r)
            out.writerow([_fmt(rec[c]) for c in TABLE_COLUMNS])
