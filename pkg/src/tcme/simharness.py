"""Synthetic outlier-detection benchmark for linear mixed models.

Each replication draws ``m`` groups of ``n_per_group`` observations

    y = beta0 + beta1 * x + u_i + eps,  x ~ U[0, 10], u_i ~ N(0, sd_u^2), eps ~ N(0, sigma^2)

and shifts ``n_outliers`` observations with ``x`` in ``[6, 10]`` down by
``offset + |N(0, offset_sd^2)|``. The same data serve two fits: a
meta-analysis fit with known standard errors (``se`` attached to every row)
and a longitudinal fit with one unknown shared sigma.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data_model import ErrorSpec, Group, MEDataset, ModelSpec
from .obs_models import LinearModel
from .rng import RngStream
from .trimming import FitResult, fit_trimmed

MODES = ("meta", "longitudinal")


@dataclass(frozen=True)
class SimSpec:
    m: int = 10
    n_per_group: int = 10
    beta: tuple[float, float] = (0.0, 5.0)
    gamma: float = 6.0           # standard deviation of the random intercept
    sigma: float = 4.0
    se: float = 4.0              # reported standard error in meta mode
    x_domain: tuple[float, float] = (0.0, 10.0)
    n_outliers: int = 15
    outlier_domain: tuple[float, float] = (6.0, 10.0)
    offset: float = 30.0
    offset_sd: float = 80.0
    replications: int = 30
    inlier_fraction: float = 0.8
    seed: int = 0
    max_redraws: int = 100

    def __post_init__(self):
        if self.n_outliers > self.m * self.n_per_group:
            raise ValueError("more outliers than observations")


@dataclass
class MetricsRow:
    replication: object
    beta0: float = math.nan
    beta1: float = math.nan
    sd_u: float = math.nan
    sigma: float = math.nan
    abs_err_beta0: float = math.nan
    abs_err_beta1: float = math.nan
    abs_err_sqrt_gamma: float = math.nan
    abs_err_sigma: float = math.nan
    tpf: float = math.nan
    fpf: float = math.nan
    tpf_resid: float = math.nan
    fpf_resid: float = math.nan
    n_flagged: float = math.nan
    n_zero: float = math.nan
    converged: float = math.nan
    wall_seconds: float = math.nan
    error: str = ""


# columns written to CSV; wall time is left out so reruns are byte-identical
CSV_COLUMNS = [f.name for f in fields(MetricsRow) if f.name != "wall_seconds"]


def simulate_dataset(spec: SimSpec, replication: int, mode: str = "meta",
                     outliers: bool = True) -> tuple[MEDataset, set[int]]:
    """Dataset and flat indices of the injected outliers for one replication.

    Draws come from substreams of ``(seed, replication)``: 0 for ``x`` (one
    further substream per redraw), 1 for the random effects, 2 for the noise,
    3 for the outlier choice and 4 for the offsets, so switching outliers off
    leaves the clean data unchanged.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    base = RngStream(spec.seed, (int(replication),))
    m, k = spec.m, spec.n_per_group
    n = m * k
    lo, hi = spec.outlier_domain
    for attempt in range(spec.max_redraws):
        x = base.substream(0).substream(attempt).uniform(*spec.x_domain, size=n)
        eligible = np.flatnonzero((x >= lo) & (x <= hi))
        if not outliers or eligible.size >= spec.n_outliers:
            break
    else:
        raise RuntimeError("could not draw enough observations in the outlier domain")
    u = base.substream(1).normal(0.0, spec.gamma, size=m)
    eps = base.substream(2).normal(0.0, spec.sigma, size=n)
    gid = np.repeat(np.arange(m), k)
    y = spec.beta[0] + spec.beta[1] * x + u[gid] + eps
    true = set()
    if outliers and spec.n_outliers:
        pick = np.sort(base.substream(3).choice(eligible, spec.n_outliers, replace=False))
        shift = np.abs(base.substream(4).normal(0.0, spec.offset_sd, size=pick.size))
        y[pick] -= spec.offset + shift
        true = set(int(j) for j in pick)
    groups = []
    for i in range(m):
        s = slice(i * k, (i + 1) * k)
        se = np.full(k, spec.se) if mode == "meta" else None
        groups.append(Group(f"g{i}", y[s], np.ones((k, 1)), x[s, None], se))
    return MEDataset(groups, ("x",)), true


def model_spec(data: MEDataset, mode: str, inlier_fraction: float) -> ModelSpec:
    error = ErrorSpec("known" if mode == "meta" else "shared")
    return ModelSpec(LinearModel.from_dataset(data, ("x",)), error, inlier_fraction)


def compute_metrics(fit: FitResult, truth: SimSpec, true_outliers, data: MEDataset | None = None,
                    replication=None) -> MetricsRow:
    """Parameter errors and outlier detection rates.

    ``tpf``/``fpf`` use the weight-based flags (``w < 0.5``). When ``data`` is
    given, ``tpf_resid``/``fpf_resid`` use the ``n - h`` largest absolute
    fixed-effect residuals ``|y - f(beta)|`` instead.
    """
    n = fit.w.w.size
    true = set(true_outliers)
    inl = n - len(true)
    flagged = set(fit.outlier_index)

    def rates(fl):
        tpf = len(fl & true) / len(true) if true else 0.0
        fpf = len(fl - true) / inl if inl else 0.0
        return tpf, fpf

    tpf, fpf = rates(flagged)
    th = fit.theta
    row = MetricsRow(replication)
    row.beta0, row.beta1 = float(th.beta[0]), float(th.beta[1])
    row.sd_u = float(np.sqrt(th.gamma[0]))
    row.abs_err_beta0 = abs(row.beta0 - truth.beta[0])
    row.abs_err_beta1 = abs(row.beta1 - truth.beta[1])
    row.abs_err_sqrt_gamma = abs(row.sd_u - truth.gamma)
    if th.sigma.size:
        row.sigma = float(th.sigma[0])
        row.abs_err_sigma = abs(row.sigma - truth.sigma)
    row.tpf, row.fpf = tpf, fpf
    row.n_flagged = float(len(flagged))
    row.n_zero = float(np.sum(fit.w.w <= 1e-8))
    row.converged = float(fit.converged)
    if data is not None:
        k = int(round(n - fit.w.h))
        r = np.abs(data.y - _fixed_fit(fit, data))
        top = set(np.argsort(-r, kind="stable")[:k].tolist())
        row.tpf_resid, row.fpf_resid = rates(top)
    return row


def _fixed_fit(fit: FitResult, data: MEDataset) -> np.ndarray:
    X = np.column_stack([np.ones(data.n_total), data.covariate("x")])
    return X @ fit.theta.beta


def run_replication(spec: SimSpec, replication: int, mode: str, inlier_fraction=None,
                    outliers: bool = True) -> MetricsRow:
    t0 = time.perf_counter()
    data, true = simulate_dataset(spec, replication, mode, outliers)
    f = spec.inlier_fraction if inlier_fraction is None else inlier_fraction
    try:
        fit = fit_trimmed(data, model_spec(data, mode, f))
        row = compute_metrics(fit, spec, true, data, replication)
    except Exception as err:  # recorded and excluded from the means
        row = MetricsRow(replication, error=f"{type(err).__name__}: {err}")
    row.wall_seconds = time.perf_counter() - t0
    return row


@dataclass
class BenchmarkResult:
    mode: str
    rows: list
    summary: MetricsRow
    failures: int
    csv_path: Path | None = None


def summarize(rows) -> MetricsRow:
    ok = [r for r in rows if not r.error]
    out = MetricsRow("summary")
    for f in fields(MetricsRow):
        if f.name in ("replication", "error"):
            continue
        vals = np.array([getattr(r, f.name) for r in ok], float)
        vals = vals[np.isfinite(vals)]
        setattr(out, f.name, float(vals.mean()) if vals.size else math.nan)
    out.error = f"{len(rows) - len(ok)} failed" if len(ok) < len(rows) else ""
    return out


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in rows:
            d = asdict(r)
            wr.writerow([_fmt(d[c]) for c in CSV_COLUMNS])


def run_benchmark(mode: str, seed: int = 0, spec: SimSpec | None = None, *,
                  replications: int | None = None, inlier_fraction: float | None = None,
                  outliers: bool = True, threads: int = 1, out_dir=None) -> BenchmarkResult:
    """Fit every replication and aggregate.

    Replications run on ``threads`` workers (``0`` = one per CPU); results are
    collected in replication order so output does not depend on scheduling.
    Writes ``benchmark_<mode>.csv`` into ``out_dir`` when given.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    spec = replace(spec or SimSpec(), seed=seed)
    reps = spec.replications if replications is None else replications
    if threads == 0:
        import os
        threads = os.cpu_count() or 1

    def job(r):
        return run_replication(spec, r, mode, inlier_fraction, outliers)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(job, range(reps)))
    else:
        rows = [job(r) for r in range(reps)]
    summary = summarize(rows)
    path = None
    if out_dir is not None:
        path = Path(out_dir) / f"benchmark_{mode}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_csv(rows + [summary], path)
    return BenchmarkResult(mode, rows, summary, sum(bool(r.error) for r in rows), path)
