"""Simulated user/curator runs of the public-X and private-X protocols.

Users are simulated in-process.  Each user's randomness comes from its own
counter-based stream, so a user's submission depends only on its record, the
configuration and the master seed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError, DataError
from .likelihood_private import PrivateData
from .likelihood_public import PublicData, design_from_uniforms
from .mechanisms import (
    PrivacyBudget,
    TruncationInterval,
    bitflip_prob_minus,
    bitflip_prob_plus,
    encode_prob_minus,
    encode_prob_plus,
    flip_with_uniforms,
    scale_coordinates,
    split_budget,
    to_signed,
    truncate,
)
from .quantile_model import PsiConfig, QuantileModel, ald_ppf
from . import streams as st

EMISSION_X_INTERVALS = tuple(
    TruncationInterval(lo, hi)
    for lo, hi in [(5, 10), (1000, 1030), (70, 100), (4, 6), (20, 30),
                   (1000, 1100), (530, 570), (130, 170), (10, 15)]
)
EMISSION_Y_INTERVAL = TruncationInterval(40.0, 110.0)
EMISSION_MODEL = QuantileModel(alpha=0.3, sigma=1.0)


@dataclass(frozen=True)
class ProtocolConfig:
    n_users: int
    epsilon: PrivacyBudget
    y_interval: TruncationInterval
    model: QuantileModel
    x_intervals: tuple[TruncationInterval, ...] | None = None
    design: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if int(self.n_users) < 1:
            raise ConfigurationError("n_users must be >= 1")
        if self.design != "uniform":
            raise ConfigurationError(f"unknown design {self.design!r}; only 'uniform' is supported")
        if self.x_intervals is not None:
            object.__setattr__(self, "x_intervals", tuple(self.x_intervals))
            if not self.x_intervals:
                raise ConfigurationError("x_intervals must be non-empty when given")

    def psi_config(self) -> PsiConfig:
        """Response curve used by the public-X curator."""
        return PsiConfig(self.model, self.y_interval, self.epsilon)

    def split(self, k: int) -> PrivacyBudget:
        return split_budget(self.epsilon, k)

    def private_psi_config(self, k: int) -> PsiConfig:
        """Response curve used by the private-X curator (split budget)."""
        return PsiConfig(self.model, self.y_interval, self.split(k))


class SyntheticSource:
    """Responses y = <beta*, x> + noise with x from the uniform design on [-1, 1]^d.

    ``noise='ald'`` gives the correct model for the quantile working model;
    ``noise='normal'`` gives Gaussian noise with standard deviation ``noise_scale``
    (a misspecified case).  ``intercept=True`` prepends a constant 1 to x.
    """

    def __init__(self, beta_star, model: QuantileModel, noise: str = "ald",
                 intercept: bool = False, noise_scale: float | None = None):
        self.beta_star = np.atleast_1d(np.asarray(beta_star, dtype=float))
        self.model = model
        if noise not in ("ald", "normal"):
            raise ConfigurationError(f"unknown noise {noise!r}")
        self.noise = noise
        self.intercept = bool(intercept)
        self.noise_scale = model.sigma if noise_scale is None else float(noise_scale)

    @property
    def dim(self) -> int:
        return self.beta_star.size

    def draw(self, users: np.ndarray, streams: st.UserStreams) -> tuple[np.ndarray, np.ndarray]:
        free = self.dim - int(self.intercept)
        cols = [design_from_uniforms(streams.uniforms(users, st.SLOT_DESIGN + j)) for j in range(free)]
        if self.intercept:
            cols.insert(0, np.ones(users.size))
        x = np.column_stack(cols) if cols else np.ones((users.size, 1))
        q = streams.uniforms(users, st.SLOT_Y_NOISE)
        loc = x @ self.beta_star
        if self.noise == "ald":
            y = ald_ppf(q, loc, self.model)
        else:
            y = loc + self.noise_scale * ndtri(q)
        return x, y

    def capacity(self):
        return None


class EmpiricalSource:
    """Loaded (x, y) rows; users are mapped to rows by an index array."""

    def __init__(self, x, y):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(y, dtype=float)
        if y.shape != (x.shape[0],):
            raise DataError("x and y row counts differ")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("empirical rows must be finite")
        self.x = x
        self.y = y
        self.rows = None

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.x.shape[0]

    def capacity(self):
        return self.x.shape[0] if self.rows is None else len(self.rows)

    def subset(self, rows) -> "EmpiricalSource":
        out = EmpiricalSource.__new__(EmpiricalSource)
        out.x, out.y = self.x, self.y
        out.rows = np.asarray(rows)
        return out

    def draw(self, users: np.ndarray, streams: st.UserStreams):
        rows = users if self.rows is None else self.rows[users]
        if np.any(rows >= self.x.shape[0]):
            raise DataError(f"empirical source has {self.x.shape[0]} rows; more users requested")
        return self.x[rows], self.y[rows]


@dataclass
class Transcript:
    """What the curator receives, plus the user-side communication count."""

    data: PublicData | PrivateData
    bits_per_user: int
    users: np.ndarray = field(repr=False, default=None)

    @property
    def total_user_bits(self) -> int:
        return self.bits_per_user * len(self.data)


def _check_source_size(source, n: int):
    available = source.capacity()
    if available is not None and available < n:
        raise DataError(f"data source has {available} records but n_users={n}")


def simulate_public_users(source, cfg: ProtocolConfig, users) -> PublicData:
    """Run the user side of the public-X protocol for the given user indices."""
    users = np.asarray(users, dtype=np.int64)
    streams = st.UserStreams(cfg.seed)
    x, y = source.draw(users, streams)
    p = bitflip_prob_plus(truncate(y, cfg.y_interval), cfg.y_interval, cfg.epsilon)
    z = flip_with_uniforms(p, streams.uniforms(users, st.SLOT_Y_FLIP))
    return PublicData(x, np.atleast_1d(z))


def run_protocol_public(source, cfg: ProtocolConfig) -> Transcript:
    _check_source_size(source, cfg.n_users)
    users = np.arange(cfg.n_users)
    return Transcript(simulate_public_users(source, cfg, users), bits_per_user=1, users=users)


def _x_intervals_for(source, cfg: ProtocolConfig) -> tuple[TruncationInterval, ...]:
    if cfg.x_intervals is not None:
        if len(cfg.x_intervals) != source.dim:
            raise ConfigurationError(f"{len(cfg.x_intervals)} x_intervals for {source.dim} covariates")
        return cfg.x_intervals
    if isinstance(source, SyntheticSource):
        return tuple(TruncationInterval(-1.0, 1.0) for _ in range(source.dim))
    raise ConfigurationError("private-X protocol requires x_intervals for empirical data")


def simulate_private_users(source, cfg: ProtocolConfig, users) -> PrivateData:
    users = np.asarray(users, dtype=np.int64)
    streams = st.UserStreams(cfg.seed)
    x, y = source.draw(users, streams)
    intervals = _x_intervals_for(source, cfg)
    k = len(intervals)
    eps_each = cfg.split(k)
    py = bitflip_prob_plus(truncate(y, cfg.y_interval), cfg.y_interval, eps_each)
    zy = flip_with_uniforms(py, streams.uniforms(users, st.SLOT_Y_FLIP))
    px = encode_prob_plus(scale_coordinates(x, intervals), eps_each)
    zx = np.column_stack([
        to_signed(flip_with_uniforms(px[:, j], streams.uniforms(users, st.SLOT_X_FLIP + j)))
        for j in range(k)
    ])
    return PrivateData(zx, np.atleast_1d(zy))


def run_protocol_private(source, cfg: ProtocolConfig) -> Transcript:
    _check_source_size(source, cfg.n_users)
    users = np.arange(cfg.n_users)
    data = simulate_private_users(source, cfg, users)
    return Transcript(data, bits_per_user=data.dim + 1, users=users)


# --- analytic privacy audit -------------------------------------------------

def public_output_log_probs(y, cfg: ProtocolConfig) -> np.ndarray:
    """log P(z | y) for z = 0, 1; shape (..., 2)."""
    t = truncate(y, cfg.y_interval)
    p = np.asarray(bitflip_prob_plus(t, cfg.y_interval, cfg.epsilon))
    q = np.asarray(bitflip_prob_minus(t, cfg.y_interval, cfg.epsilon))
    return np.stack([np.log(q), np.log(p)], axis=-1)


def private_output_log_probs(x, y, cfg: ProtocolConfig, intervals=None) -> np.ndarray:
    """log P(zx, zy | x, y) for every output; shape (2^k * 2,).

    Outputs are ordered as ``itertools.product((-1, 1), repeat=k)`` for zx,
    each followed by zy = 0, 1.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    intervals = intervals or cfg.x_intervals
    k = len(intervals)
    eps_each = cfg.split(k)
    xs = scale_coordinates(x, intervals)
    lpx, lmx = np.log(encode_prob_plus(xs, eps_each)), np.log(encode_prob_minus(xs, eps_each))
    ty = truncate(y, cfg.y_interval)
    lpy = math.log(bitflip_prob_plus(ty, cfg.y_interval, eps_each))
    lmy = math.log(bitflip_prob_minus(ty, cfg.y_interval, eps_each))
    outs = []
    for zx in itertools.product((-1, 1), repeat=k):
        zx = np.array(zx)
        lx = float(np.sum(np.where(zx > 0, lpx, lmx)))
        outs.extend([lx + lmy, lx + lpy])
    return np.array(outs)


def max_privacy_loss(log_probs_a: np.ndarray, log_probs_b: np.ndarray) -> float:
    """Largest |log P(out|a) - log P(out|b)| over all outputs."""
    return float(np.max(np.abs(np.asarray(log_probs_a) - np.asarray(log_probs_b))))
