"""Command-line interface.

    vbsens analyze   --input data.csv --outcome y --treatment z [--grid 0:0.9:0.05 | --r2 0.5]
    vbsens compare   --input data.csv --outcome y --treatment z --lambda 1,1.5,2
    vbsens simulate coverage --sigma-v2 0,1,2.5 --n 250 --reps 200 --seed 7
    vbsens simulate lambda-growth --nu2 0.25
    vbsens replay    out/manifest.json --out-dir out2

Every command writes its files plus ``manifest.json`` into ``--out-dir``.
Files are staged in a temporary directory and moved into place only after
everything succeeded. Exit codes: 0 ok, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .benchmark import benchmark_table, row_record, write_table_csv
from .dataset import DataError, load_csv
from .estimator import estimate_att, sample_bounds
from .inference import (
    BootstrapConfig,
    BootstrapError,
    draw_replicates,
    parse_grid,
    sweep_report,
    find_lambda_star,
)
from .msm import msm_att_interval, width_threshold
from .simulate import CoverageDgpConfig, lambda_growth_demo, run_coverage_study
from .vbm import R2_MAX, CorrelationBoundSpec, optimal_bias_bound
from .weights import FitConfig, WeightFitError, canonical_method, fit_weights

log = logging.getLogger("vbsens")


class UsageError(Exception):
    """Bad flag value; message names the flag."""


def _tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def _dumps(obj) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True, default=_json_default) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


class Staging:
    """Collect outputs in a temp dir, then move them into ``out_dir`` together."""

    def __init__(self, out_dir: str):
        self.out_dir = Path(out_dir)
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".vbsens-", dir=self.out_dir.parent))

    def path(self, name: str) -> Path:
        return self.tmp / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text, encoding="utf-8")

    def commit(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(self.tmp.iterdir()):
            os.replace(f, self.out_dir / f.name)
        self.tmp.rmdir()

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _common_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="CSV with a header row")
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--method", default="ipw", choices=["ipw", "ebal"])
    p.add_argument("--covariates", default=None, help="comma-separated names (default: all)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--B", type=int, default=1000, help="bootstrap replicates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--null", type=float, default=0.0, help="null value for R2*/Lambda*")
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vbsens", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="R^2 sweep, R2* search and benchmarking")
    _common_data(a)
    g = a.add_mutually_exclusive_group()
    g.add_argument("--grid", default="0:0.9:0.05", help="start:stop:step or comma list")
    g.add_argument("--r2", type=float, default=None, help="single R^2 value")
    a.add_argument("--rho", default="worst", help="worst | fixed:<v> | relk:<k>")

    c = sub.add_parser("compare", help="VBM vs MSM bounds and benchmark table")
    _common_data(c)
    c.add_argument("--lambda", dest="lambdas", default="1,1.5,2,3,5", help="comma list of Lambda")
    c.add_argument("--rho", default="worst")

    s = sub.add_parser("simulate", help="Monte Carlo studies")
    ssub = s.add_subparsers(dest="study", required=True)
    cov = ssub.add_parser("coverage")
    cov.add_argument("--sigma-v2", default="0,0.1,0.25,1,2,2.5")
    cov.add_argument("--n", default="250,1000", help="comma list of sample sizes")
    cov.add_argument("--reps", type=int, default=300)
    cov.add_argument("--B", type=int, default=200)
    cov.add_argument("--alpha", type=float, default=0.05)
    cov.add_argument("--seed", type=int, default=0)
    cov.add_argument("--threads", type=int, default=1)
    cov.add_argument("--out-dir", required=True)
    lg = ssub.add_parser("lambda-growth")
    lg.add_argument("--nu2", type=float, default=0.25, help="squared scale of the log weight error")
    lg.add_argument("--n-grid", default="100,1000,10000,100000")
    lg.add_argument("--reps", type=int, default=200)
    lg.add_argument("--seed", type=int, default=0)
    lg.add_argument("--out-dir", required=True)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out-dir", required=True)
    return ap


def _boot_cfg(args) -> BootstrapConfig:
    if args.B < 2:
        raise UsageError("--B must be >= 2")
    if not 0 < args.alpha < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if not 0 <= args.seed < 2**64:
        raise UsageError("--seed must be a 64-bit unsigned integer")
    return BootstrapConfig(args.B, args.alpha, args.seed, args.threads)


def _rho(args) -> CorrelationBoundSpec:
    try:
        return CorrelationBoundSpec.parse(args.rho)
    except ValueError as exc:
        raise UsageError(f"--rho: {exc}") from None


def _load(args):
    if not os.path.exists(args.input):
        raise UsageError(f"--input: file {args.input!r} not found")
    try:
        d = load_csv(args.input, args.outcome, args.treatment)
    except DataError as exc:
        raise UsageError(f"--input: {exc}") from None
    cols = None
    if args.covariates:
        cols = [c.strip() for c in args.covariates.split(",") if c.strip()]
        missing = [c for c in cols if c not in d.covariate_names]
        if missing:
            raise UsageError(f"--covariates: unknown column(s) {missing}")
    return d, cols


def cmd_analyze(args, stage: Staging) -> dict:
    d, cols = _load(args)
    spec = _rho(args)
    boot = _boot_cfg(args)
    if args.r2 is not None:
        if not 0 <= args.r2 <= R2_MAX:
            raise UsageError(f"--r2 must lie in [0, {R2_MAX}]")
        grid = [args.r2]
    else:
        try:
            grid = parse_grid(args.grid)
        except ValueError as exc:
            raise UsageError(f"--grid: {exc}") from None
        if not grid or any(not 0 <= g <= R2_MAX for g in grid):
            raise UsageError(f"--grid values must lie in [0, {R2_MAX}]")

    method = canonical_method(args.method)
    fit_cfg = FitConfig()
    w = fit_weights(d, method, cols, fit_cfg)
    reps = draw_replicates(d, method, cols, fit_cfg, boot, w)
    report = sweep_report(d, method, cols, spec, boot, grid, fit_cfg, w, null_value=args.null, replicates=reps)
    table = benchmark_table(d, w, method, fit_cfg, report.r2_star, cols, replicates=reps, alpha=boot.alpha)
    report.benchmark_overlay = [(r.covariate, r.r2_benchmarked) for r in table if r.ok]

    yc = d.outcomes[d.treatment == 0]
    bounds = [optimal_bias_bound(yc, w, g, spec) for g in grid]
    payload = report.to_dict()
    payload["bias_bounds"] = [
        {"r2": g, **b.__dict__} for g, b in zip(grid, bounds)
    ]
    payload["benchmark"] = [row_record(r) for r in table]
    sb = sample_bounds(d)
    payload["sample_bounds"] = list(sb.att_sample_bounds)
    stage.write_text("report.json", _dumps(payload))
    report.write_csv(stage.path("sweep.csv"))
    write_table_csv(table, stage.path("benchmark.csv"))
    return {"input_sha256": _digest(args.input)}


def cmd_compare(args, stage: Staging) -> dict:
    d, cols = _load(args)
    spec = _rho(args)
    boot = _boot_cfg(args)
    lambdas = _floats(args.lambdas, "--lambda")
    if not lambdas or any(l < 1 for l in lambdas):
        raise UsageError("--lambda values must be >= 1")
    method = canonical_method(args.method)
    fit_cfg = FitConfig()
    w = fit_weights(d, method, cols, fit_cfg)
    reps = draw_replicates(d, method, cols, fit_cfg, boot, w)
    est = estimate_att(d, w)
    yc = d.outcomes[d.treatment == 0]

    lines = ["lambda,point_lo,point_hi,ci_lo,ci_hi,psi,r2_threshold,vbm_lo_at_threshold,vbm_hi_at_threshold"]
    for lam in lambdas:
        sol = msm_att_interval(d, w, lam)
        lo, hi = reps.msm_ci(lam, boot.alpha)
        try:
            thr = width_threshold(yc, w, sol.psi)
            mb = optimal_bias_bound(yc, w, min(thr, R2_MAX)).max_bias
            vb = (est.estimate - mb, est.estimate + mb)
        except ValueError:
            thr, vb = math.nan, (math.nan, math.nan)
        vals = [lam, *sol.att_interval, lo, hi, sol.psi, thr, *vb]
        lines.append(",".join(repr(float(v)) for v in vals))
    star = find_lambda_star(d, method, cols, boot, args.null, fit_cfg=fit_cfg, weights=w, replicates=reps)
    table = benchmark_table(d, w, method, fit_cfg, None, cols, replicates=reps, alpha=boot.alpha)

    stage.write_text("compare.csv", "\n".join(lines) + "\n")
    write_table_csv(table, stage.path("benchmark.csv"))
    stage.write_text(
        "report.json",
        _dumps(
            {
                "schema_version": 1,
                "estimate": est.estimate,
                "lambda_star": star.value,
                "lambda_star_saturated": star.saturated,
                "sample_bounds": list(sample_bounds(d).att_sample_bounds),
                "benchmark": [row_record(r) for r in table],
                "rho_spec": str(spec),
                "replicate_failures": reps.failures,
            }
        ),
    )
    return {"input_sha256": _digest(args.input)}


def cmd_simulate(args, stage: Staging) -> dict:
    if args.study == "coverage":
        sig = _floats(args.sigma_v2, "--sigma-v2")
        ns = [int(v) for v in _floats(args.n, "--n")]
        if args.reps < 100:
            raise UsageError("--reps must be >= 100")
        if any(s < 0 for s in sig):
            raise UsageError("--sigma-v2 values must be >= 0")
        if any(n < 50 for n in ns):
            raise UsageError("--n values must be >= 50")
        boot = _boot_cfg(args)
        configs = [CoverageDgpConfig(n=n, sigma_v2=s, seed=args.seed) for n in ns for s in sig]
        res = run_coverage_study(configs, args.reps, boot)
        res.write_csv(stage.path("coverage.csv"))
        stage.write_text("coverage.json", _dumps(res.to_dict()))
        return {}
    ns = [int(v) for v in _floats(args.n_grid, "--n-grid")]
    if args.nu2 < 0:
        raise UsageError("--nu2 must be >= 0")
    if any(b <= a for a, b in zip(ns, ns[1:])) or not ns:
        raise UsageError("--n-grid must be strictly increasing")
    # fixed estimated coefficient; the omitted confounder carries all of nu^2
    rows = lambda_growth_demo([0.5], [0.5], math.sqrt(args.nu2), ns, args.reps, args.seed)
    lines = ["n,mean_lambda,reference,r2_closed_form"]
    lines += [f"{r.n},{r.mean_lambda!r},{r.reference!r},{r.r2_closed_form!r}" for r in rows]
    stage.write_text("lambda_growth.csv", "\n".join(lines) + "\n")
    return {}


COMMANDS: dict[str, Callable] = {
    "analyze": cmd_analyze,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
}


def _manifest(argv: Sequence[str], args, extra: dict) -> dict:
    # out_dir is excluded so a replay into another directory yields the same manifest
    opts = {k: v for k, v in vars(args).items() if k not in ("verbose", "out_dir")}
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return {
        "command": args.command if args.command != "simulate" else f"simulate {args.study}",
        "argv": list(argv),
        "options": opts,
        "seed": getattr(args, "seed", None),
        "tool_version": _tool_version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", ts),
        **extra,
    }


def _strip_out_dir(argv: Sequence[str]) -> list[str]:
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out-dir":
            skip = True
            continue
        if tok.startswith("--out-dir="):
            continue
        out.append(tok)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "replay":
        try:
            manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            recorded = manifest["argv"]
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: manifest: {exc}", file=sys.stderr)
            return 1
        return main(_strip_out_dir(recorded) + ["--out-dir", args.out_dir])

    stage = Staging(args.out_dir)
    try:
        extra = COMMANDS[args.command](args, stage)
        stage.write_text("manifest.json", _dumps(_manifest(_strip_out_dir(argv), args, extra)))
        stage.commit()
    except UsageError as exc:
        stage.abort()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WeightFitError, BootstrapError, FloatingPointError, np.linalg.LinAlgError) as exc:
        stage.abort()
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        stage.abort()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        stage.abort()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
