"""Synthetic designs and Monte Carlo studies.

* A limited-outcome-overlap design: logit treatment in ``(X1, X2, U)`` and a
  linear outcome equal to the same index plus noise, so the outcome tracks
  the propensity closely when the noise variance is small. There is no
  treatment effect, so the true ATT is 0. ``U`` is withheld from the
  analyst.
* Coverage of the bootstrap intervals of both sensitivity models at their
  oracle parameters.
* Lognormal weight pairs: closed-form R^2 and growth of the realized
  worst-case ratio with n.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import expit

from .dataset import Dataset
from .inference import BootstrapConfig, BootstrapError, draw_replicates
from .moments import pop_var
from .weights import FitConfig, WeightFitError, fit_logistic_ipw

DEFAULT_SIGMA_V2 = (0.0, 0.1, 0.25, 1.0, 2.0, 2.5)
DEFAULT_N_GRID = (250, 1000)
MAX_SAMPLE_ATTEMPTS = 20


@dataclass(frozen=True)
class CoverageDgpConfig:
    n: int = 250
    gamma1: float = 2.5
    gamma2: float = 5.0
    beta: float = 1.0
    sigma_v2: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma_v2 < 0:
            raise ValueError("sigma_v2 must be >= 0")
        if self.n < 50:
            raise ValueError("n must be >= 50")


@dataclass(frozen=True)
class CoverageSample:
    dataset: Dataset
    true_att: float
    true_r2: float
    true_lambda: float
    true_r2_variance_ratio: float = math.nan
    attempts: int = 1


def _seed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def generate_coverage_sample(cfg: CoverageDgpConfig, *key: int) -> CoverageSample:
    """Draw one sample and its oracle sensitivity parameters.

    Oracle weights refit the logistic model with ``U`` included. Two oracle
    R^2 values are reported, both over the control group with mean-1
    weights:

    * ``true_r2`` solves ``R^2 / (1 - R^2) = var(w* - w) / var(w)``, the
      imbalance term that enters the bias decomposition. It is always in
      [0, 1) and is the one the coverage study uses.
    * ``true_r2_variance_ratio`` is ``1 - var(w) / var(w*)`` (negative when the
      realized refit varies less than the reduced fit). The two agree when
      the error ``w* - w`` is uncorrelated with ``w``.

    The oracle Lambda is the largest ratio between the two sets of fitted
    odds. Draws whose fits fail (e.g. separation) are redrawn.
    """
    fit_cfg = FitConfig()
    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        rng = _seed_rng(cfg.seed, *key, attempt)
        x1, x2, u = rng.standard_normal((3, cfg.n))
        eta = cfg.gamma1 * x1 + cfg.gamma2 * x2 + cfg.beta * u
        z = (rng.random(cfg.n) < expit(eta)).astype(np.int8)
        y = eta + math.sqrt(cfg.sigma_v2) * rng.standard_normal(cfg.n)
        nt = int(z.sum())
        if nt < 1 or cfg.n - nt < 2:
            continue
        d = Dataset(y, z, np.column_stack([x1, x2]), ("X1", "X2"))
        full = Dataset(y, z, np.column_stack([x1, x2, u]), ("X1", "X2", "U"))
        try:
            w = fit_logistic_ipw(d, None, fit_cfg)
            w_star = fit_logistic_ipw(full, None, fit_cfg)
        except WeightFitError:
            continue
        vw = pop_var(w.weights)
        if vw <= 0:
            continue
        ve = pop_var(w_star.weights - w.weights)
        r2 = min(ve / (vw + ve), 0.999)
        r2_ratio = 1.0 - vw / pop_var(w_star.weights)
        ctrl = z == 0
        odds = np.exp(_design(d) @ w.coef)[ctrl]
        odds_star = np.exp(_design(full) @ w_star.coef)[ctrl]
        ratio = odds_star / odds
        lam = float(max(ratio.max(), (1.0 / ratio).max(), 1.0))
        return CoverageSample(d, 0.0, r2, lam, r2_ratio, attempt + 1)
    raise RuntimeError(f"no usable sample after {MAX_SAMPLE_ATTEMPTS} draws")


def _design(d: Dataset) -> np.ndarray:
    x = d.covariates
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return np.column_stack([np.ones(d.n), (x - x.mean(axis=0)) / sd])


@dataclass(frozen=True)
class CoverageCell:
    sigma_v2: float
    n: int
    model: str
    coverage: float
    width: float
    reps: int
    failures: int = 0


@dataclass
class CoverageResult:
    cells: list[CoverageCell]
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("sigma_v2", "n", "model", "coverage", "width", "reps")

    def cell(self, sigma_v2: float, n: int, model: str) -> CoverageCell:
        for c in self.cells:
            if c.sigma_v2 == sigma_v2 and c.n == n and c.model == model:
                return c
        raise KeyError((sigma_v2, n, model))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(self.CSV_COLUMNS)
            for c in self.cells:
                out.writerow([repr(c.sigma_v2), c.n, c.model, repr(c.coverage), repr(c.width), c.reps])

    def to_dict(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells], "meta": self.meta}


def coverage_replicate(
    dgp: CoverageDgpConfig, boot: BootstrapConfig, *key: int
) -> tuple[tuple[float, float], tuple[float, float]]:
    """VBM and MSM bootstrap CIs at the oracle parameters for one sample."""
    s = generate_coverage_sample(dgp, *key)
    reps = draw_replicates(s.dataset, "logistic_ipw", None, FitConfig(), boot)
    return reps.vbm_ci(s.true_r2, alpha=boot.alpha), reps.msm_ci(s.true_lambda, boot.alpha)


def run_coverage_study(
    configs: Sequence[CoverageDgpConfig],
    replications: int,
    boot: BootstrapConfig = BootstrapConfig(B=200),
) -> CoverageResult:
    """Coverage of 0 (the true ATT) by both models' intervals, per config.

    Replicate ``r`` of config ``c`` uses substreams keyed by ``(c.seed, r)``
    for the sample and ``(boot.seed, c index, r)`` for its bootstrap.
    Replicates whose bootstrap aborts are excluded and counted.
    """
    if replications < 100:
        raise ValueError("replications must be >= 100")
    cells = []
    for ci, cfg in enumerate(configs):
        hits = {"vbm": [], "msm": []}
        widths = {"vbm": [], "msm": []}
        failures = 0
        for r in range(replications):
            bseed = int(np.random.SeedSequence(boot.seed, spawn_key=(ci, r)).generate_state(2, np.uint64)[0])
            b = BootstrapConfig(boot.B, boot.alpha, bseed, boot.parallelism)
            try:
                vbm_ci, msm_ci = coverage_replicate(cfg, b, r)
            except (BootstrapError, RuntimeError):
                failures += 1
                continue
            for model, iv in (("vbm", vbm_ci), ("msm", msm_ci)):
                hits[model].append(iv[0] <= 0.0 <= iv[1])
                widths[model].append(iv[1] - iv[0])
        for model in ("vbm", "msm"):
            k = len(hits[model])
            cells.append(
                CoverageCell(
                    cfg.sigma_v2,
                    cfg.n,
                    model,
                    float(np.mean(hits[model])) if k else math.nan,
                    float(np.mean(widths[model])) if k else math.nan,
                    k,
                    failures,
                )
            )
    meta = {
        "B": boot.B,
        "alpha": boot.alpha,
        "seed": boot.seed,
        "replications": replications,
        "oracle": "refit with U included; R^2 from var(w* - w)/var(w), Lambda from odds ratios",
        "calibration_note": "sample sizes and replication counts are calibration choices",
    }
    return CoverageResult(cells, meta)


def lognormal_r2_closed_form(gamma: ArrayLike, gamma_star: ArrayLike, beta: float) -> float:
    """R^2 for ``w = exp(g'X)``, ``w* = exp(g*'X + b U)`` with standard normal inputs.

    Uses the lognormal variance ``(e^s - 1) e^s`` for each weight, with
    ``s = g'g`` and ``s* = g*'g* + b^2``.
    """
    g = np.atleast_1d(np.asarray(gamma, dtype=float))
    gs = np.atleast_1d(np.asarray(gamma_star, dtype=float))
    if g.shape != gs.shape:
        raise ValueError("gamma and gamma_star must have the same length")
    a = float(g @ g)
    if a == 0.0:
        raise ValueError("gamma = 0 gives uniform weights (var(w) = 0)")
    b = float(gs @ gs) + beta * beta
    if math.isinf(b) or b > 700:
        return 1.0
    return 1.0 - (math.expm1(a) / math.expm1(b)) * math.exp(a - b)


def lognormal_r2_monte_carlo(
    gamma: ArrayLike, gamma_star: ArrayLike, beta: float, n: int, seed: int = 0
) -> float:
    """Variance-ratio R^2 of simulated (unnormalized) lognormal weights."""
    g = np.atleast_1d(np.asarray(gamma, dtype=float))
    gs = np.atleast_1d(np.asarray(gamma_star, dtype=float))
    rng = _seed_rng(seed)
    X = rng.standard_normal((n, g.size))
    u = rng.standard_normal(n)
    w = np.exp(X @ g)
    ws = np.exp(X @ gs + beta * u)
    return 1.0 - pop_var(w) / pop_var(ws)


@dataclass(frozen=True)
class LambdaGrowthRow:
    n: int
    mean_lambda: float
    reference: float
    r2_closed_form: float


def lambda_growth_demo(
    gamma: ArrayLike,
    gamma_star: ArrayLike,
    beta: float,
    n_grid: Iterable[int],
    reps: int = 200,
    seed: int = 0,
) -> list[LambdaGrowthRow]:
    """Mean realized worst-case ratio vs the ``exp(sqrt(2 nu^2 log n))`` reference.

    ``nu^2 = |g* - g|^2 + b^2``. The closed-form R^2 column has no n in it.
    """
    g = np.atleast_1d(np.asarray(gamma, dtype=float))
    gs = np.atleast_1d(np.asarray(gamma_star, dtype=float))
    ns = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_grid must be strictly increasing")
    diff = gs - g
    nu2 = float(diff @ diff) + beta * beta
    try:
        r2 = lognormal_r2_closed_form(g, gs, beta)
    except ValueError:
        r2 = math.nan
    rows = []
    for i, n in enumerate(ns):
        lam = np.empty(reps)
        for r in range(reps):
            rng = _seed_rng(seed, i, r)
            X = rng.standard_normal((n, g.size))
            u = rng.standard_normal(n)
            v = X @ diff + beta * u
            lam[r] = math.exp(float(np.max(np.abs(v))))
        rows.append(LambdaGrowthRow(n, float(lam.mean()), math.exp(math.sqrt(2 * nu2 * math.log(n))), r2))
    return rows
