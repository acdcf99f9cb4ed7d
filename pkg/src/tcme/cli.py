"""Command-line entry point.

Subcommands::

    tcme fit       --config run.toml [--out DIR] [--seed S] [--threads T]
    tcme bootstrap --config run.toml [--N 1000] [--out DIR] [--seed S] [--threads T]
    tcme benchmark {meta,longitudinal} [--seed S] [--replications R] [--out DIR] [--threads T]
    tcme validate  --config run.toml

Exit codes: 0 ok, 2 usage/config/validation error, 3 non-convergence,
4 numeric failure. The config grammar is documented in the README.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .bootstrap import QUANTILE_LEVELS, BootstrapResult, curve_bands, parametric_bootstrap
from .data_model import (Bounds, DataError, ErrorSpec, LinearConstraintSet, MEDataset,
                         ModelSpec, Schema, SolverOptions, load_dataset, validate_spec)
from .inner_solver import NumericError
from .likelihood import InvalidVarianceError, check_wellposedness
from .obs_models import (DomainError, LinearModel, LogRatioModel, LogSplineModel,
                         ratio_loadings, slope_loadings)
from .simharness import CSV_COLUMNS, MODES, run_benchmark
from .splines import (SplineBasis, SplineDomainError, SplineSpecError, build_design,
                      highest_derivative_prior, shape_constraints,
                      value_equality)
from .trimming import FitError, FitResult, fit_trimmed

EXIT_OK, EXIT_CONFIG, EXIT_MAXITER, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_TYPES = ("linear", "log_spline", "log_ratio")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    dataset: Path
    schema: Schema
    error: ErrorSpec
    model: dict
    inlier_fraction: float = 1.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    seed: int = 0
    out: Path = Path(".")
    bootstrap_n: int = 1000
    bands: bool = False


_TOP = {"seed", "out", "data", "model", "solver", "bootstrap"}
_DATA = {"path", "group", "y", "se", "covariates", "random_effects"}
_MODEL = {"type", "error", "inlier_fraction", "columns", "intercept", "exposure", "alt", "ref",
          "degree", "knots", "knot_quantiles", "shape", "prior_sd", "anchor", "random_effect",
          "beta_lower", "grid"}
_BOOT = {"n", "bands"}


def _unknown(section: str, got: dict, allowed: set) -> None:
    extra = sorted(set(got) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(extra)}")


def load_config(path) -> RunConfig:
    """Parse a TOML run configuration; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    _unknown("top level", raw, _TOP)
    base = path.parent
    data = raw.get("data", {})
    _unknown("data", data, _DATA)
    if "path" not in data:
        raise ConfigError("[data] path is required")
    model = dict(raw.get("model", {}))
    _unknown("model", model, _MODEL)
    kind = model.setdefault("type", "linear")
    if kind not in MODEL_TYPES:
        raise ConfigError(f"unknown model type {kind!r}; expected one of {MODEL_TYPES}")
    solver = raw.get("solver", {})
    _unknown("solver", solver, {f.name for f in fields(SolverOptions)})
    boot = raw.get("bootstrap", {})
    _unknown("bootstrap", boot, _BOOT)

    tup = (lambda v: None if v is None else tuple(v))
    schema = Schema(group=data.get("group", "group"), y=data.get("y", "y"),
                    se=data.get("se", "se"), covariates=tup(data.get("covariates")),
                    random_effects=tup(data.get("random_effects")))
    try:
        error = ErrorSpec(model.get("error", "known"))
    except ValueError:
        raise ConfigError(f"unknown error kind {model.get('error')!r}") from None
    f = model.get("inlier_fraction", 1.0)
    if not isinstance(f, (int, float)) or not 0 < f <= 1:
        raise ConfigError("inlier_fraction must be in (0,1]")
    n_boot = boot.get("n", 1000)
    if not isinstance(n_boot, int) or n_boot < 1:
        raise ConfigError("[bootstrap] n must be a positive integer")
    return RunConfig(base / data["path"], schema, error, model, float(f),
                     SolverOptions(**solver), int(raw.get("seed", 0)),
                     base / raw.get("out", "."), n_boot, bool(boot.get("bands", False)))


@dataclass
class CurveSpec:
    """How to tabulate the fitted exposure curve for a spline model."""

    basis: SplineBasis
    grid: np.ndarray
    loading: np.ndarray | None

    def log_risk(self, beta) -> np.ndarray:
        X = build_design(self.basis, self.grid)
        return np.log(np.maximum(X @ beta, np.finfo(float).tiny))


def _columns(data: MEDataset, names) -> np.ndarray:
    return np.column_stack([data.covariate(c) for c in names])


def build_model(cfg: RunConfig, data: MEDataset) -> tuple[MEDataset, ModelSpec, CurveSpec | None]:
    """Observation model, constraints and priors described by ``cfg.model``."""
    mc = cfg.model
    kind = mc["type"]
    common = dict(error=cfg.error, inlier_fraction=cfg.inlier_fraction, solver=cfg.solver)
    if kind == "linear":
        cols = tuple(mc.get("columns", data.covariate_names))
        if not cols and not mc.get("intercept", True):
            raise ConfigError("linear model needs an intercept or at least one column")
        model = LinearModel.from_dataset(data, cols, intercept=mc.get("intercept", True))
        return data, ModelSpec(model, **common), None

    degree = int(mc.get("degree", 3))
    if kind == "log_spline":
        t = _columns(data, [mc.get("exposure", "exposure")])[:, 0]
        pts = t
    else:
        alt = _columns(data, mc.get("alt", ("alt_lo", "alt_hi")))
        ref = _columns(data, mc.get("ref", ("ref_lo", "ref_hi")))
        if alt.shape[1] != 2 or ref.shape[1] != 2:
            raise ConfigError("alt and ref must each name two interval columns")
        pts = np.concatenate([alt.ravel(), ref.ravel()])
    anchor = mc.get("anchor")
    if "knots" in mc:
        basis = SplineBasis(np.asarray(mc["knots"], float), degree)
    else:
        # boundary knots span the data and the anchor exposure
        span = pts if anchor is None else np.append(pts, float(anchor))
        basis = SplineBasis.from_quantiles(pts, mc.get("knot_quantiles", (0.25, 0.5, 0.75)),
                                           degree, lo=float(span.min()), hi=float(span.max()))
    if kind == "log_spline":
        model = LogSplineModel.from_exposures(basis, t)
    else:
        model = LogRatioModel.from_intervals(basis, alt, ref)

    cons = [shape_constraints(basis, mc.get("shape", ()))]
    if anchor is not None:
        cons.append(value_equality(basis, float(anchor), 1.0))
    priors = ()
    if "prior_sd" in mc:
        priors = (highest_derivative_prior(basis, float(mc["prior_sd"])),)

    re = mc.get("random_effect", "slope")
    bounds = Bounds(beta_lb=float(mc.get("beta_lower", 1e-6)))
    origin = float(anchor) if anchor is not None else 0.0
    grid = np.linspace(basis.knots[0], basis.knots[-1], int(mc.get("grid", 101)))
    if re == "slope":
        if kind == "log_spline":
            Z = slope_loadings(t)
        else:
            Z = ratio_loadings(alt, ref)
        data = data.replace(Z=Z)
        loading = (grid - origin).reshape(-1, 1)
    elif re == "intercept":
        data = data.replace(Z=np.ones((data.n_total, 1)))
        loading = np.ones((grid.size, 1))
    elif re == "none":
        data = data.replace(Z=np.ones((data.n_total, 1)))
        bounds = Bounds(beta_lb=bounds.beta_lb, gamma_ub=0.0)
        loading = None
    else:
        raise ConfigError(f"random_effect must be slope, intercept or none, not {re!r}")
    spec = ModelSpec(model, constraints=LinearConstraintSet.stack(cons), priors=priors,
                     bounds=bounds, **common)
    return data, spec, CurveSpec(basis, grid, loading)


def prepare(cfg: RunConfig):
    data = load_dataset(cfg.dataset, cfg.schema)
    try:
        data, spec, curve = build_model(cfg, data)
    except (DataError, ConfigError, SplineSpecError, SplineDomainError):
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from None
    problems = validate_spec(data, spec)
    if problems:
        raise ConfigError("; ".join(problems))
    return data, spec, curve


# ---------------------------------------------------------------- output

def _num(v) -> str:
    v = float(v)
    return format(v, ".17g") if math.isfinite(v) else "null"


def to_json(obj, indent: int = 0) -> str:
    """JSON text with every float at 17 significant digits (non-finite -> null)."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}{to_json(str(k))}: {to_json(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(isinstance(x, (int, float, np.number)) and not isinstance(x, bool) for x in seq):
            return "[" + ", ".join(to_json(x) for x in seq) + "]"
        return "[\n" + ",\n".join(inner + to_json(x, indent + 1) for x in seq) + f"\n{pad}]"
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return {None: "null", True: "true", False: "false"}[None if obj is None else bool(obj)]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    s = str(obj)
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def param_names(sizes) -> list[str]:
    kb, kg, ks = sizes
    return ([f"beta_{i}" for i in range(kb)] + [f"gamma_{i}" for i in range(kg)]
            + [f"sigma_{i}" for i in range(ks)])


def fit_record(fit: FitResult, data: MEDataset, spec: ModelSpec) -> dict:
    rep = fit.inner_report
    th = fit.theta
    wp = check_wellposedness(th, data, spec)
    return {
        "status": "Converged" if fit.converged else "MaxIter",
        "objective": fit.objective,
        "n": data.n_total,
        "h": fit.w.h,
        "theta": {"beta": th.beta, "gamma": th.gamma, "sd_u": np.sqrt(th.gamma),
                  "sigma": th.sigma},
        "w": fit.w.w,
        "outliers": [{"index": j, "group": g, "row": r, "w": fit.w.w[j]}
                     for j, (g, r) in zip(fit.outlier_index, fit.outliers)],
        "boundary": fit.boundary,
        "diagnostics": {
            "outer_iterations": fit.outer_iterations,
            "inner_iterations": rep.iterations,
            "inner_status": rep.status.value,
            "kkt_residual": rep.kkt_residual,
            "stationarity": rep.stationarity,
            "feasibility": rep.feasibility,
            "complementarity": rep.complementarity,
            "active_set": rep.active_set,
            "var_reference": fit.var_reference,
        },
        "wellposedness": {"ok": wp.ok, "alpha_tol": wp.alpha_tol, "flagged": wp.flagged,
                          "margins": wp.margins},
    }


def write_curve(path: Path, curve: CurveSpec, beta, boot: BootstrapResult | None = None) -> None:
    cols = {"exposure": curve.grid, "log_risk": curve.log_risk(beta)}
    if boot is not None:
        fixed, full = curve_bands(boot, curve.log_risk, curve.loading)
        if fixed is not None:
            cols["fixed_lo"], cols["fixed_hi"] = fixed[0], fixed[2]
            if full is not None:
                cols["full_lo"], cols["full_hi"] = full[0], full[2]
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(cols))
        for row in zip(*cols.values()):
            wr.writerow([format(float(v), ".17g") for v in row])


def write_bootstrap(out: Path, boot: BootstrapResult) -> None:
    names = param_names(boot.sizes)
    with (out / "bootstrap.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["replication", "ok"] + names)
        for r in range(boot.n):
            wr.writerow([r, int(boot.ok[r])] + [format(float(v), ".17g") for v in boot.samples[r]])
    q = {"levels": list(QUANTILE_LEVELS), "n": boot.n, "failures": boot.failures,
         "status": boot.status, "seed": boot.seed,
         "quantiles": {nm: boot.quantiles[:, i] for i, nm in enumerate(names)}}
    (out / "quantiles.json").write_text(to_json(q) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands

def _err(msg: str) -> None:
    print(f"tcme: {msg}", file=sys.stderr)


def _run(fn):
    """Map library exceptions onto exit codes."""
    try:
        return fn()
    except (ConfigError, DataError, SplineSpecError, SplineDomainError) as exc:
        _err(f"error: {exc}")
        return EXIT_CONFIG
    except (NumericError, InvalidVarianceError, DomainError, FitError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC


def _outdir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out) if args.out is not None else (cfg.out if cfg else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def cmd_fit(args) -> int:
    def go():
        cfg = load_config(args.config)
        data, spec, curve = prepare(cfg)
        out = _outdir(args, cfg)
        fit = fit_trimmed(data, spec)
        (out / "fit.json").write_text(to_json(fit_record(fit, data, spec)) + "\n",
                                      encoding="utf-8")
        if curve is not None:
            boot = None
            if cfg.bands:
                boot = parametric_bootstrap(fit, data, spec, cfg.bootstrap_n,
                                            _seed(args, cfg), args.threads)
                _warn_failures(boot)
            write_curve(out / "curve.csv", curve, fit.theta.beta, boot)
        print(f"objective {_num(fit.objective)}; {len(fit.outliers)} outlier(s); "
              f"wrote {out / 'fit.json'}")
        if not fit.converged:
            _err("fit did not converge (MaxIter)")
            return EXIT_MAXITER
        return EXIT_OK
    return _run(go)


def _warn_failures(boot: BootstrapResult) -> None:
    if boot.warning:
        _err(f"warning: {boot.failures} of {boot.n} bootstrap refits failed")


def cmd_bootstrap(args) -> int:
    def go():
        cfg = load_config(args.config)
        data, spec, curve = prepare(cfg)
        out = _outdir(args, cfg)
        fit = fit_trimmed(data, spec)
        n = cfg.bootstrap_n if args.N is None else args.N
        if n < 1:
            raise ConfigError("N must be positive")
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            boot = parametric_bootstrap(fit, data, spec, n, _seed(args, cfg), args.threads)
        write_bootstrap(out, boot)
        if curve is not None:
            write_curve(out / "curve.csv", curve, fit.theta.beta, boot)
        _warn_failures(boot)
        print(f"{boot.n} replications, {boot.failures} failed; wrote {out / 'bootstrap.csv'}")
        if not fit.converged:
            _err("point fit did not converge (MaxIter)")
            return EXIT_MAXITER
        return EXIT_OK
    return _run(go)


SUMMARY_COLUMNS = ("abs_err_beta0", "abs_err_beta1", "abs_err_sqrt_gamma", "abs_err_sigma",
                   "tpf", "fpf")


def cmd_benchmark(args) -> int:
    if args.mode not in MODES:
        _err(f"error: unknown mode {args.mode!r}; expected one of {', '.join(MODES)}")
        return EXIT_CONFIG
    try:
        res = run_benchmark(args.mode, 0 if args.seed is None else args.seed,
                            replications=args.replications, threads=args.threads,
                            out_dir=_outdir(args))
    except Exception as exc:  # any harness failure
        _err(f"benchmark failed: {exc}")
        return EXIT_NUMERIC
    s = res.summary
    cols = [c for c in SUMMARY_COLUMNS if c in CSV_COLUMNS]
    print(" ".join(f"{c:>18}" for c in ["mode"] + cols))
    print(" ".join(f"{v:>18}" for v in [res.mode] + [f"{getattr(s, c):.6g}" for c in cols]))
    print(f"{len(res.rows)} replications, {res.failures} failed; wrote {res.csv_path}")
    if res.failures == len(res.rows):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_validate(args) -> int:
    def go():
        cfg = load_config(args.config)
        data, spec, _ = prepare(cfg)
        kb, kg, ks = spec.sizes(data)
        print(f"ok: {data.m} groups, {data.n_total} observations, h = {spec.h(data)}, "
              f"{kb} fixed effects, {kg} random effects, {ks} sigma")
        return EXIT_OK
    return _run(go)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcme", description="Trimmed constrained mixed effects.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1, help="worker threads (0 = auto)")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("fit", help="fit a model and write fit.json")
    common(sp)
    sp.set_defaults(func=cmd_fit)
    sp = sub.add_parser("bootstrap", help="parametric bootstrap of the fit")
    common(sp)
    sp.add_argument("--N", type=int, default=None,
                    help="replications (default [bootstrap] n, else 1000)")
    sp.set_defaults(func=cmd_bootstrap)
    sp = sub.add_parser("benchmark", help="synthetic outlier benchmark")
    sp.add_argument("mode", help="meta or longitudinal")
    common(sp, config=False)
    sp.add_argument("--replications", type=int, default=None)
    sp.set_defaults(func=cmd_benchmark)
    sp = sub.add_parser("validate", help="check a config and dataset without fitting")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    if getattr(args, "threads", 1) < 0:
        _err("error: --threads must be >= 0")
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
