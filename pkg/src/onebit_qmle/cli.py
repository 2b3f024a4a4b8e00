"""Command-line entry point.

Settings are resolved in order: built-in defaults, ``--preset``, the
``--config`` file (flat YAML whose keys mirror the ProtocolConfig/SweepSpec
field names), then command-line flags.  Every run writes ``manifest.json``
next to its outputs; passing that manifest back as ``--config`` reruns the
same computation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .asymptotics import sandwich
from .errors import ConfigurationError, DataError, NumericalError
from .estimator import FitConfig, bootstrap, fit_nonprivate_quantile, fit_private, fit_public
from .experiments import (
    SweepSpec,
    bias_compare,
    covariance_sweep,
    load_xy_csv,
    log_log_slope,
    truncation_sweep,
    write_bias,
    write_results,
    write_slopes,
)
from .likelihood_private import PrivateData, PrivateLikelihood
from .likelihood_public import Box, PublicData, PublicLikelihood
from .mechanisms import PrivacyBudget, TruncationInterval
from .protocol import (
    EMISSION_X_INTERVALS,
    ProtocolConfig,
    SyntheticSource,
    run_protocol_private,
    run_protocol_public,
)
from .quantile_model import QuantileModel
from .streams import UserStreams, derive_seed

log = logging.getLogger("onebit_qmle")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

COMMANDS = ("fit-public", "fit-private", "fit-nonprivate", "simulate",
            "cov-sweep", "trunc-sweep", "bias-compare", "bootstrap")

DEFAULTS = {
    # protocol
    "n_users": None,
    "epsilon": 2.5,
    "y_interval": [-2.0, 4.0],
    "alpha": 0.3,
    "sigma": 1.0,
    "x_intervals": None,
    "seed": 0,
    # data source
    "data": None,
    "x_columns": None,
    "y_column": None,
    "has_header": False,
    "beta_star": [0.5, -0.3],
    "noise": "ald",
    "noise_scale": None,
    "intercept": False,
    # fitting
    "box": [-10.0, 10.0],
    "n_starts": 5,
    "gradient_tolerance": 1e-6,
    # sweeps
    "scenario": "public",
    "n_values": [1000, 4000, 16000],
    "epsilon_values": [1.0, 2.5, 5.0, 10.0],
    "repetitions": 200,
    "subsample_without_replacement": True,
    "intervals": [[50.0, 100.0], [40.0, 110.0], [30.0, 120.0], [20.0, 130.0]],
    "n": 10000,
    "reference_n": 30000,
    "record_timing": False,
    # bootstrap / simulate
    "bootstrap_replicates": 200,
    "transcript": None,
    "mode": "public",
}

PRESETS = {
    "emission": {
        "x_columns": list(range(9)),
        "y_column": 10,
        "has_header": True,
        "y_interval": [40.0, 110.0],
        "alpha": 0.3,
        "sigma": 1.0,
        "x_intervals": [[iv.lower, iv.upper] for iv in EMISSION_X_INTERVALS],
    },
}

EMISSION_DOWNLOAD = (
    "The emission preset needs the 'Gas Turbine CO and NOx Emission Data Set' from the\n"
    "UCI Machine Learning Repository (36,733 rows, files gt_2011.csv ... gt_2015.csv).\n"
    "Download and unzip it, then pass the directory or a concatenated CSV with --data:\n"
    "  https://archive.ics.uci.edu/dataset/551/gas+turbine+co+and+nox+emission+data+set\n"
)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        body = {"command": self.command, "config": self.config, "seed": self.seed,
                "version": self.version, "outputs": self.outputs}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --- settings -------------------------------------------------------------

def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        # manifests are JSON; YAML 1.1 would read JSON's "1e-06" as a string
        raw = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected key-value pairs at top level")
    if "command" in raw and isinstance(raw.get("config"), dict):
        # a run manifest
        raw = raw["config"]
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"{path}: unknown config keys {unknown}")
    return raw


def resolve_settings(args) -> dict:
    s = dict(DEFAULTS)
    if args.preset:
        s.update(PRESETS[args.preset])
    if args.config:
        s.update(load_config_file(args.config))
    if args.seed is not None:
        s["seed"] = args.seed
    if args.data is not None:
        s["data"] = args.data
    if getattr(args, "transcript", None):
        s["transcript"] = args.transcript
    if args.preset == "emission" and not s["data"]:
        raise DataError("--preset emission requires the dataset via --data.\n" + EMISSION_DOWNLOAD)
    return s


def _interval(v, name) -> TruncationInterval:
    try:
        lo, hi = v
        return TruncationInterval(float(lo), float(hi))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name}: expected [lower, upper], got {v!r} ({exc})") from None


def _int(s, key) -> int:
    v = s[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigurationError(f"{key} must be an integer, got {v!r}")
    return int(v)


def build_model(s) -> QuantileModel:
    try:
        return QuantileModel(float(s["alpha"]), float(s["sigma"]))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None


def build_source(s):
    if s["data"]:
        xc, yc = s["x_columns"], s["y_column"]
        if xc is None or yc is None:
            raise ConfigurationError("x_columns and y_column are required with --data")
        return load_xy_csv(s["data"], xc, yc, bool(s["has_header"]))
    try:
        return SyntheticSource(s["beta_star"], build_model(s), noise=s["noise"],
                               intercept=bool(s["intercept"]), noise_scale=s["noise_scale"])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None


def build_protocol(s, source) -> ProtocolConfig:
    n = s["n_users"]
    if n is None:
        n = source.capacity() or 1000
    x_int = None
    if s["x_intervals"] is not None:
        x_int = tuple(_interval(v, "x_intervals") for v in s["x_intervals"])
    try:
        return ProtocolConfig(n_users=int(n), epsilon=PrivacyBudget(float(s["epsilon"])),
                              y_interval=_interval(s["y_interval"], "y_interval"), model=build_model(s),
                              x_intervals=x_int, seed=_int(s, "seed"))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None


def build_fit_config(s, d: int) -> FitConfig:
    box = s["box"]
    try:
        if len(box) == 2 and not isinstance(box[0], (list, tuple)):
            b = Box.uniform(d, float(box[0]), float(box[1]))
        else:
            b = Box(np.array([v[0] for v in box], float), np.array([v[1] for v in box], float))
        return FitConfig(box=b, n_starts=_int(s, "n_starts"),
                         gradient_tolerance=float(s["gradient_tolerance"]), seed=_int(s, "seed"))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"fit settings: {exc}") from None


def build_sweep(s, source) -> SweepSpec:
    base = build_protocol(s, source)
    try:
        return SweepSpec(n_values=s["n_values"], epsilon_values=s["epsilon_values"],
                         repetitions=_int(s, "repetitions"), scenario=s["scenario"], base_config=base,
                         subsample_without_replacement=bool(s["subsample_without_replacement"]),
                         fit_config=build_fit_config(s, source.dim))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None


# --- transcripts ----------------------------------------------------------

def write_transcript(data, path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(data, PublicData):
            w.writerow([f"x_{j}" for j in range(data.dim)] + ["z"])
            for xi, zi in zip(data.x, data.z):
                w.writerow([repr(float(v)) for v in xi] + [int(zi)])
        else:
            w.writerow([f"zx_{j}" for j in range(data.dim)] + ["zy"])
            for xi, zi in zip(data.zx, data.zy):
                w.writerow([int(v) for v in xi] + [int(zi)])


def read_transcript(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"transcript not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: empty transcript")
    header = rows[0]
    try:
        body = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if body.ndim != 2 or body.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    if header[-1] == "z":
        return PublicData(body[:, :-1], body[:, -1].astype(int))
    if header[-1] == "zy":
        return PrivateData(body[:, :-1].astype(int), body[:, -1].astype(int))
    raise DataError(f"{path}: unrecognized transcript header {header}")


# --- commands -------------------------------------------------------------

def _fit_report(res, extra=None) -> dict:
    out = {"beta_hat": [float(v) for v in res.beta_hat], "loglik": float(res.loglik_value),
           "converged": bool(res.converged), "active_bounds": list(res.active_bounds),
           "n_evaluations": int(res.n_evaluations)}
    out.update(extra or {})
    return out


def _standard_errors(beta, lik):
    try:
        return [float(v) for v in sandwich(beta, lik).standard_errors()]
    except NumericalError as exc:
        log.warning("standard errors unavailable: %s", exc)
        return None


def _get_transcript(s, private: bool):
    if s["transcript"]:
        return read_transcript(s["transcript"]), None
    source = build_source(s)
    cfg = build_protocol(s, source)
    tr = run_protocol_private(source, cfg) if private else run_protocol_public(source, cfg)
    return tr.data, cfg


def cmd_fit_public(s, out: Path, workers: int):
    data, cfg = _get_transcript(s, private=False)
    if not isinstance(data, PublicData):
        raise DataError("fit-public needs a public-X transcript")
    psi = (cfg or build_protocol(s, _Sized(len(data)))).psi_config()
    res = fit_public(data, psi, build_fit_config(s, data.dim))
    se = _standard_errors(res.beta_hat, PublicLikelihood(data, psi))
    return _emit_fit(out, "fit_public.json", _fit_report(res, {"standard_errors": se, "n": len(data)}))


def cmd_fit_private(s, out: Path, workers: int):
    data, cfg = _get_transcript(s, private=True)
    if not isinstance(data, PrivateData):
        raise DataError("fit-private needs a private-X transcript")
    psi = (cfg or build_protocol(s, _Sized(len(data)))).private_psi_config(data.dim)
    res = fit_private(data, psi, build_fit_config(s, data.dim))
    se = _standard_errors(res.beta_hat, PrivateLikelihood(data, psi))
    return _emit_fit(out, "fit_private.json", _fit_report(res, {"standard_errors": se, "n": len(data)}))


def cmd_fit_nonprivate(s, out: Path, workers: int):
    source = build_source(s)
    cfg = build_protocol(s, source)
    x, y = source.draw(np.arange(cfg.n_users), UserStreams(cfg.seed))
    res = fit_nonprivate_quantile(x, y, cfg.model, build_fit_config(s, x.shape[1]).box)
    return _emit_fit(out, "fit_nonprivate.json", _fit_report(res, {"n": int(cfg.n_users)}))


class _Sized:
    """Stand-in source when fitting a stored transcript."""

    def __init__(self, n):
        self.n = n

    def capacity(self):
        return self.n


def _emit_fit(out: Path, name: str, report: dict):
    text = json.dumps(report, sort_keys=True)
    print(text)
    path = out / name
    path.write_text(text + "\n", encoding="utf-8")
    return [path]


def cmd_simulate(s, out: Path, workers: int):
    if s["mode"] not in ("public", "private"):
        raise ConfigurationError("mode must be 'public' or 'private'")
    data, _ = _get_transcript(dict(s, transcript=None), private=s["mode"] == "private")
    path = out / "transcript.csv"
    write_transcript(data, path)
    print(f"wrote {len(data)} {s['mode']}-X records to {path}")
    return [path]


def cmd_cov_sweep(s, out: Path, workers: int):
    source = build_source(s)
    spec = build_sweep(s, source)
    results = covariance_sweep(spec, source, workers)
    slopes = log_log_slope(results)
    paths = write_results(results, out / "cov_sweep.csv", bool(s["record_timing"]))
    paths.append(write_slopes(slopes, out / "cov_sweep_slopes.csv"))
    for g, v in slopes.items():
        print(f"{g}: log-log slope {v:.4f}")
    return paths


def cmd_trunc_sweep(s, out: Path, workers: int):
    source = build_source(s)
    spec = build_sweep(s, source)
    intervals = [_interval(v, "intervals") for v in s["intervals"]]
    eps = float(s["epsilon"])
    results = truncation_sweep(intervals, _int(s, "n"), eps, spec, source, workers)
    for r in results:
        print(f"{r.slope_group}: frobenius {r.frobenius_norm:.6g}")
    return write_results(results, out / "trunc_sweep.csv", bool(s["record_timing"]))


def cmd_bias_compare(s, out: Path, workers: int):
    source = build_source(s)
    spec = build_sweep(s, source)
    report = bias_compare(spec, source, _int(s, "reference_n"), workers)
    for c in report.cells:
        print(f"n={c.n} eps={c.epsilon:g}: bias {c.bias_norm:.6g} (se {c.bias_se:.2g})")
    return write_bias(report, out / "bias.csv")


def cmd_bootstrap(s, out: Path, workers: int):
    private = s["mode"] == "private"
    data, cfg = _get_transcript(s, private=private)
    cfg = cfg or build_protocol(s, _Sized(len(data)))
    fc = build_fit_config(s, data.dim)
    if private:
        psi = cfg.private_psi_config(data.dim)
        fitter = lambda d: fit_private(d, psi, fc)
    else:
        psi = cfg.psi_config()
        fitter = lambda d: fit_public(d, psi, fc)
    rng = np.random.default_rng(derive_seed(_int(s, "seed"), 0xB007))
    fits = bootstrap(data, _int(s, "bootstrap_replicates"), fitter, rng)
    betas = np.array([f.beta_hat for f in fits])
    path = out / "bootstrap.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate"] + [f"beta_{j}" for j in range(betas.shape[1])] + ["converged"])
        for i, (b, f) in enumerate(zip(betas, fits)):
            w.writerow([i] + [repr(float(v)) for v in b] + [int(f.converged)])
    se = betas.std(axis=0, ddof=1)
    print(json.dumps({"bootstrap_se": [float(v) for v in se]}))
    return [path]


HANDLERS = {
    "fit-public": cmd_fit_public,
    "fit-private": cmd_fit_private,
    "fit-nonprivate": cmd_fit_nonprivate,
    "simulate": cmd_simulate,
    "cov-sweep": cmd_cov_sweep,
    "trunc-sweep": cmd_trunc_sweep,
    "bias-compare": cmd_bias_compare,
    "bootstrap": cmd_bootstrap,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onebit-qmle",
                                description="One-bit locally private quantile regression: fits, simulation, sweeps.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)
    helps = {
        "fit-public": "simulate (or read) a public-X transcript and fit",
        "fit-private": "simulate (or read) a private-X transcript and fit",
        "fit-nonprivate": "check-loss quantile regression on raw data",
        "simulate": "emit a perturbed dataset (transcript.csv)",
        "cov-sweep": "covariance of fits over an (n, epsilon) grid",
        "trunc-sweep": "covariance of fits over truncation intervals",
        "bias-compare": "distance between private fits and a non-private reference",
        "bootstrap": "nonparametric bootstrap of a transcript fit",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="YAML file of settings (or a previous manifest.json)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", default="results", help="output directory (default: results)")
        sp.add_argument("--data", help="comma-separated data file or directory of .csv files")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named settings bundle")
        sp.add_argument("--threads", type=int, default=1, help="worker processes; never changes results")
        if name in ("fit-public", "fit-private", "bootstrap"):
            sp.add_argument("--transcript", help="fit this transcript instead of simulating one")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        s = resolve_settings(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        paths = HANDLERS[args.command](s, out, args.threads)
        manifest = RunManifest(command=args.command, config=_jsonable(s), seed=int(s["seed"]),
                               outputs=[p.name for p in paths])
        manifest.write(out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


if __name__ == "__main__":
    sys.exit(main())
