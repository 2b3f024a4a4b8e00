"""Repeated-sampling experiments: covariance, truncation and bias sweeps.

A sweep is a grid of cells (n, epsilon).  Each cell runs ``repetitions``
independent rounds of {draw or subsample data -> run protocol -> fit} and
summarizes the fitted coefficients by their mean and covariance.

Repetition seeds depend on (seed, n, repetition) only, so every epsilon (and
every truncation interval) at a given n sees the same records and the same
flip uniforms.  Comparisons across the epsilon grid are therefore paired.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError
from .estimator import FitConfig, fit_nonprivate_quantile, fit_private, fit_public
from .mechanisms import PrivacyBudget, TruncationInterval
from .protocol import EmpiricalSource, ProtocolConfig, run_protocol_private, run_protocol_public
from .streams import UserStreams, derive_seed

log = logging.getLogger(__name__)

SCENARIOS = ("public", "private", "nonprivate")
MAX_FAILURE_RATE = 0.01

RESULT_HEADER = ["n", "epsilon", "frobenius_norm", "slope_group", "repetitions", "failures", "wall_time_s"]


# --- data ingestion -------------------------------------------------------

def _csv_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".csv")
        if not files:
            raise DataError(f"no .csv files in directory {path}")
        return files
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    return [path]


def _read_rows(path: Path, x_columns, y_column, has_header):
    rows_x, rows_y = [], []
    needed = max(list(x_columns) + [y_column])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if has_header and line_no == 1:
                if len(row) <= needed:
                    raise DataError(f"{path}: column {needed} out of range (header has {len(row)} columns)")
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) <= needed:
                bad = y_column if y_column >= len(row) else max(c for c in x_columns if c >= len(row))
                raise DataError(f"{path}:{line_no}: column {bad} out of range (row has {len(row)} columns)")
            try:
                rows_x.append([float(row[c]) for c in x_columns])
                rows_y.append(float(row[y_column]))
            except ValueError:
                cell = next(c for c in list(x_columns) + [y_column] if not _is_float(row[c]))
                raise DataError(f"{path}:{line_no}: non-numeric value {row[cell]!r} in column {cell}") from None
    return rows_x, rows_y


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_xy_csv(path, x_columns: Sequence[int], y_column: int, has_header: bool = False) -> EmpiricalSource:
    """Read selected columns of a comma-separated numeric file (0-based indices).

    ``path`` may also be a directory, in which case every ``*.csv`` in it is
    read in name order and the rows are concatenated; each file then has its
    own header row when ``has_header`` is set.
    """
    x_columns = [int(c) for c in x_columns]
    y_column = int(y_column)
    if not x_columns:
        raise ConfigurationError("x_columns must not be empty")
    if min(x_columns + [y_column]) < 0:
        raise ConfigurationError("column indices must be non-negative")
    xs, ys = [], []
    for f in _csv_files(Path(path)):
        rx, ry = _read_rows(f, x_columns, y_column, has_header)
        xs.extend(rx)
        ys.extend(ry)
    if not ys:
        raise DataError(f"no data rows in {path}")
    x = np.array(xs, dtype=float).reshape(len(ys), len(x_columns))
    y = np.array(ys, dtype=float)
    bad = np.flatnonzero(~(np.all(np.isfinite(x), axis=1) & np.isfinite(y)))
    if bad.size:
        raise DataError(f"non-finite values in data row {int(bad[0]) + 1}")
    log.info("loaded %d rows from %s", len(y), path)
    return EmpiricalSource(x, y)


# --- sweep specification and results --------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    n_values: tuple[int, ...]
    epsilon_values: tuple[float, ...]
    repetitions: int
    scenario: str
    base_config: ProtocolConfig
    subsample_without_replacement: bool = True
    fit_config: FitConfig = field(default_factory=FitConfig)
    fixed_repetition_seed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "epsilon_values", tuple(float(e) for e in self.epsilon_values))
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if int(self.repetitions) < 2:
            raise ConfigurationError("repetitions must be >= 2")
        if not self.n_values or min(self.n_values) < 1:
            raise ConfigurationError("n_values must be positive")
        if list(self.n_values) != sorted(set(self.n_values)):
            raise ConfigurationError("n_values must be strictly ascending")
        if not self.epsilon_values:
            raise ConfigurationError("epsilon_values must not be empty")
        for e in self.epsilon_values:
            PrivacyBudget(e)

    @property
    def seed(self) -> int:
        return self.base_config.seed

    def cell_epsilons(self) -> tuple[float, ...]:
        # the non-private fit ignores epsilon; report it once as epsilon = inf
        return (math.inf,) if self.scenario == "nonprivate" else self.epsilon_values


@dataclass
class ExperimentResult:
    n: int
    epsilon: float
    mean: np.ndarray
    covariance: np.ndarray
    frobenius_norm: float
    wall_time: float
    seed: int
    repetitions: int
    failures: int
    slope_group: str = ""
    estimates: np.ndarray = field(default=None, repr=False)


def repetition_seed(seed: int, n: int, rep: int, fixed: bool = False) -> int:
    return derive_seed(seed, n, 0 if fixed else rep)


def _subsample_rows(capacity: int, n: int, rep_seed: int) -> np.ndarray:
    rng = np.random.default_rng([rep_seed, 1])
    return np.sort(rng.choice(capacity, size=n, replace=False))


def _cell_source(source, n, rep_seed, subsample):
    capacity = source.capacity()
    if capacity is None:
        return source
    if n > capacity:
        raise DataError(f"n={n} exceeds the {capacity} available records")
    if subsample:
        return source.subset(_subsample_rows(capacity, n, rep_seed))
    return source


def run_repetition(source, scenario: str, cfg: ProtocolConfig, fit_config: FitConfig, subsample: bool) -> np.ndarray:
    """One round of the pipeline; ``cfg.seed`` is the repetition seed."""
    src = _cell_source(source, cfg.n_users, cfg.seed, subsample)
    if scenario == "public":
        tr = run_protocol_public(src, cfg)
        res = fit_public(tr.data, cfg.psi_config(), fit_config)
    elif scenario == "private":
        tr = run_protocol_private(src, cfg)
        res = fit_private(tr.data, cfg.private_psi_config(tr.data.dim), fit_config)
    else:
        x, y = src.draw(np.arange(cfg.n_users), UserStreams(cfg.seed))
        res = fit_nonprivate_quantile(x, y, cfg.model, fit_config.box)
    if not res.converged:
        raise NumericalError(f"fit did not converge: {res.message}", beta=res.beta_hat)
    return res.beta_hat


# Work-pool plumbing.  Workers receive the source once through the
# initializer; tasks are small tuples.  Results are collected by index so the
# reduction order never depends on scheduling.
_WORKER_STATE: dict = {}


def _init_worker(source, scenario, fit_config, subsample):
    _WORKER_STATE.update(source=source, scenario=scenario, fit_config=fit_config, subsample=subsample)


def _task(cfg: ProtocolConfig):
    s = _WORKER_STATE
    try:
        return run_repetition(s["source"], s["scenario"], cfg, s["fit_config"], s["subsample"]), None
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _run_tasks(configs, source, scenario, fit_config, subsample, workers: int):
    init = (source, scenario, fit_config, subsample)
    if workers <= 1:
        _init_worker(*init)
        return [_task(c) for c in configs]
    chunk = max(1, len(configs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=init) as pool:
        return list(pool.map(_task, configs, chunksize=chunk))


def _summarize(n, eps, outcomes, seed, wall, group) -> ExperimentResult:
    estimates = [b for b, err in outcomes if err is None]
    failures = len(outcomes) - len(estimates)
    for b, err in outcomes:
        if err is not None:
            log.warning("cell n=%d eps=%g: repetition failed: %s", n, eps, err)
    if failures > MAX_FAILURE_RATE * len(outcomes):
        raise NumericalError(f"cell n={n} eps={eps:g}: {failures}/{len(outcomes)} repetitions failed")
    est = np.array(estimates)
    mean, cov = summarize_estimates(est)
    return ExperimentResult(n=n, epsilon=eps, mean=mean, covariance=cov,
                            frobenius_norm=float(np.linalg.norm(cov, "fro")), wall_time=wall, seed=seed,
                            repetitions=len(estimates), failures=failures, slope_group=group, estimates=est)


def summarize_estimates(estimates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance (divisor m - 1), symmetric by construction."""
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 2 or est.shape[0] < 2:
        raise NumericalError("need at least two estimates for a covariance")
    # shift by the first row so identical estimates give exactly zero covariance
    shifted = est - est[0]
    mean = est[0] + shifted.mean(axis=0)
    dev = shifted - shifted.mean(axis=0)
    cov = dev.T @ dev / (est.shape[0] - 1)
    return mean, 0.5 * (cov + cov.T)


def _run_cells(spec: SweepSpec, source, cells, workers: int) -> list[ExperimentResult]:
    """``cells`` is a list of (n, epsilon, config_overrides, slope_group)."""
    if source.capacity() is not None and max(n for n, *_ in cells) > source.capacity():
        raise DataError(f"largest n exceeds the {source.capacity()} available records")
    configs, bounds = [], []
    for n, eps, overrides, group in cells:
        base = replace(spec.base_config, n_users=n, **overrides)
        if math.isfinite(eps):
            base = replace(base, epsilon=PrivacyBudget(eps))
        start = len(configs)
        for r in range(spec.repetitions):
            configs.append(replace(base, seed=repetition_seed(spec.seed, n, r, spec.fixed_repetition_seed)))
        bounds.append((start, len(configs)))
    t0 = time.perf_counter()
    outcomes = _run_tasks(configs, source, spec.scenario, spec.fit_config,
                          spec.subsample_without_replacement, workers)
    # per-cell time is the pool time shared out by repetition count
    per_rep = (time.perf_counter() - t0) / max(1, len(configs))
    results = []
    for (n, eps, _, group), (a, b) in zip(cells, bounds):
        results.append(_summarize(n, eps, outcomes[a:b], spec.seed, per_rep * (b - a), group))
    return results


def _eps_label(eps: float) -> str:
    return "nonprivate" if math.isinf(eps) else f"eps={eps:g}"


def covariance_sweep(spec: SweepSpec, source, workers: int = 1) -> list[ExperimentResult]:
    """One cell per (n, epsilon); cells sharing epsilon form a slope group."""
    cells = [(n, eps, {}, _eps_label(eps)) for eps in spec.cell_epsilons() for n in spec.n_values]
    return _run_cells(spec, source, cells, workers)


def truncation_sweep(intervals: Sequence[TruncationInterval], n: int, epsilon: float, spec: SweepSpec,
                     source, workers: int = 1) -> list[ExperimentResult]:
    """One cell per response truncation interval at fixed n and epsilon."""
    if not intervals:
        raise ConfigurationError("at least one interval is required")
    cells = [(int(n), float(epsilon), {"y_interval": iv}, f"interval=[{iv.lower:g};{iv.upper:g}]")
             for iv in intervals]
    return _run_cells(spec, source, cells, workers)


def log_log_slope(results: Sequence[ExperimentResult]) -> dict[str, float]:
    """OLS slope of log Frobenius norm against log n, per slope group (>= 3 points)."""
    groups: dict[str, list[ExperimentResult]] = {}
    for r in results:
        groups.setdefault(r.slope_group, []).append(r)
    out = {}
    for g, rs in groups.items():
        if len(rs) < 3:
            continue
        ln = np.log([r.n for r in rs])
        lf = np.log([r.frobenius_norm for r in rs])
        out[g] = float(np.polyfit(ln, lf, 1)[0])
    return out


@dataclass
class BiasCell:
    n: int
    epsilon: float
    bias_norm: float
    bias_se: float
    repetitions: int
    failures: int


@dataclass
class BiasReport:
    proxy: np.ndarray
    proxy_result: ExperimentResult
    cells: list[BiasCell]
    sweep: list[ExperimentResult]


def bias_norm_with_se(mean, cov, m, proxy) -> tuple[float, float]:
    """Norm of mean - proxy and its delta-method standard error."""
    diff = np.asarray(mean) - np.asarray(proxy)
    b = float(np.linalg.norm(diff))
    if b == 0.0:
        return 0.0, float(np.sqrt(np.trace(cov) / m))
    u = diff / b
    return b, float(np.sqrt(max(u @ cov @ u, 0.0) / m))


def bias_compare(spec: SweepSpec, source, reference_n: int, workers: int = 1) -> BiasReport:
    """Distance between mean fitted coefficients and a non-private reference.

    The reference ("proxy") is the mean non-private fit at ``reference_n``
    over ``spec.repetitions`` rounds.
    """
    ref_spec = replace(spec, scenario="nonprivate", n_values=(int(reference_n),))
    (proxy_result,) = covariance_sweep(ref_spec, source, workers)
    sweep = covariance_sweep(spec, source, workers)
    cells = []
    for r in sweep:
        b, se = bias_norm_with_se(r.mean, r.covariance, r.repetitions, proxy_result.mean)
        cells.append(BiasCell(r.n, r.epsilon, b, se, r.repetitions, r.failures))
    return BiasReport(proxy=proxy_result.mean, proxy_result=proxy_result, cells=cells, sweep=sweep)


def weighted_slope(x, y, se) -> tuple[float, float]:
    """Weighted least-squares slope of y on x (weights 1/se^2) and its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = 1.0 / np.asarray(se, dtype=float) ** 2
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    return float(slope), float(np.sqrt(1.0 / sxx))


# --- output files ---------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_results(results: Sequence[ExperimentResult], path, record_timing: bool = False) -> list[Path]:
    """Write the summary table and the companion table of means/covariances.

    Wall times vary between runs, so the ``wall_time_s`` column is left empty
    unless ``record_timing`` is set; that keeps files byte-identical.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in results:
            w.writerow([_fmt(r.n), _fmt(r.epsilon), _fmt(r.frobenius_norm), r.slope_group,
                        _fmt(r.repetitions), _fmt(r.failures), _fmt(r.wall_time) if record_timing else ""])
    companion = path.with_name(path.stem + "_cells.csv")
    d = results[0].mean.size if results else 0
    with open(companion, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "epsilon", "slope_group"] + [f"mean_{i}" for i in range(d)]
                   + [f"cov_{i}_{j}" for i in range(d) for j in range(d)])
        for r in results:
            w.writerow([_fmt(r.n), _fmt(r.epsilon), r.slope_group] + [_fmt(v) for v in r.mean]
                       + [_fmt(v) for v in r.covariance.ravel()])
    return [path, companion]


def write_slopes(slopes: dict[str, float], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slope_group", "loglog_slope"])
        for g, s in slopes.items():
            w.writerow([g, _fmt(s)])
    return path


def write_bias(report: BiasReport, path) -> list[Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "epsilon", "bias_norm", "bias_se", "repetitions", "failures"])
        for c in report.cells:
            w.writerow([_fmt(c.n), _fmt(c.epsilon), _fmt(c.bias_norm), _fmt(c.bias_se),
                        _fmt(c.repetitions), _fmt(c.failures)])
    proxy_path = path.with_name(path.stem + "_proxy.csv")
    with open(proxy_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reference_n"] + [f"proxy_{i}" for i in range(report.proxy.size)])
        w.writerow([_fmt(report.proxy_result.n)] + [_fmt(v) for v in report.proxy])
    return [path, proxy_path] + write_results(report.sweep, path.with_name(path.stem + "_sweep.csv"))


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
