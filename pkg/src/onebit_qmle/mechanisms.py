"""Truncation, the one-bit bit-flip mechanism and privacy-budget bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class PrivacyBudget:
    """Privacy-loss parameter epsilon (in nats)."""

    epsilon: float

    def __post_init__(self):
        eps = float(self.epsilon)
        if not math.isfinite(eps) or eps <= 0.0:
            raise DomainError(f"epsilon must be positive and finite, got {self.epsilon!r}")
        object.__setattr__(self, "epsilon", eps)

    def c_epsilon(self) -> float:
        """Slope constant (e^eps + 1) / (e^eps - 1) of the bit flip."""
        # 1/tanh(eps/2) is the same quantity without cancellation for small eps
        return 1.0 / math.tanh(self.epsilon / 2.0)

    def prob_bounds(self) -> tuple[float, float]:
        """Smallest and largest success probability any input can produce."""
        lo = 1.0 / (math.exp(self.epsilon) + 1.0)
        return lo, 1.0 - lo


@dataclass(frozen=True)
class TruncationInterval:
    """Closed clamp range [lower, upper]."""

    lower: float
    upper: float

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ConfigurationError(f"interval bounds must be finite, got [{lo}, {hi}]")
        if not lo < hi:
            raise ConfigurationError(f"interval needs lower < upper, got [{lo}, {hi}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.upper + self.lower)

    def rescale(self, v):
        """Affine map of [lower, upper] onto [-1, 1]."""
        return 2.0 * (np.asarray(v, dtype=float) - self.midpoint) / self.width


# Objective-variable bits are stored as {0, 1}; explanatory bits as {-1, +1}.
def to_signed(bit):
    return 2 * np.asarray(bit, dtype=np.int8) - 1


def to_unsigned(signed):
    return (np.asarray(signed, dtype=np.int8) + 1) // 2


def truncate(y, interval: TruncationInterval):
    """Clamp ``y`` into the interval; scalars in, scalars out."""
    arr = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("truncate() requires finite input")
    out = np.clip(arr, interval.lower, interval.upper)
    return float(out) if out.ndim == 0 else out


def _check_inside(v: np.ndarray, interval: TruncationInterval):
    if not np.all((v >= interval.lower) & (v <= interval.upper)):
        raise DomainError(
            f"bit flip input outside [{interval.lower}, {interval.upper}]; truncate first"
        )


def _affine_prob(frac, budget: PrivacyBudget):
    # 1/(e^eps + 1) + frac * (e^eps - 1)/(e^eps + 1), written without the
    # cancellation in 1/2 - 1/(2C) so tiny probabilities keep full precision
    lo = 1.0 / (math.exp(budget.epsilon) + 1.0)
    return lo + math.tanh(budget.epsilon / 2.0) * frac


def _two_point(frac_plus, frac_minus, budget: PrivacyBudget):
    """(P(plus), P(minus)) for a bit whose plus-probability is affine in frac_plus.

    The smaller probability is computed directly and the larger one as its
    complement, so both are accurate and they sum to exactly 1.
    """
    fp = np.asarray(frac_plus, dtype=float)
    fm = np.asarray(frac_minus, dtype=float)
    plus_small = fp <= fm
    small = _affine_prob(np.where(plus_small, fp, fm), budget)
    large = 1.0 - small
    return np.where(plus_small, small, large), np.where(plus_small, large, small)


def bitflip_probs(v, interval: TruncationInterval, budget: PrivacyBudget):
    """(P(z = 1 | v), P(z = 0 | v)); P(z = 1 | v) = 1/2 + (v - m) / ((u - l) C_eps)."""
    arr = np.asarray(v, dtype=float)
    _check_inside(arr, interval)
    return _two_point((arr - interval.lower) / interval.width,
                      (interval.upper - arr) / interval.width, budget)


def bitflip_prob_plus(v, interval: TruncationInterval, budget: PrivacyBudget):
    """Probability that the bit flip reports the upper symbol for input ``v``."""
    p = bitflip_probs(v, interval, budget)[0]
    return float(p) if p.ndim == 0 else p


def bitflip_prob_minus(v, interval: TruncationInterval, budget: PrivacyBudget):
    p = bitflip_probs(v, interval, budget)[1]
    return float(p) if p.ndim == 0 else p


def bitflip_sample(v, interval: TruncationInterval, budget: PrivacyBudget, rng: np.random.Generator):
    """Draw the reported bit(s) in {0, 1}."""
    p = np.asarray(bitflip_prob_plus(v, interval, budget))
    bits = (rng.random(p.shape) < p).astype(np.int8)
    return int(bits) if bits.ndim == 0 else bits


def flip_with_uniforms(p, uniforms) -> np.ndarray:
    """Vectorised Bernoulli(p) using pre-drawn uniforms."""
    return (np.asarray(uniforms) < np.asarray(p)).astype(np.int8)


def split_budget(budget: PrivacyBudget, k: int) -> PrivacyBudget:
    """Per-submission budget when k explanatory bits and one response bit share ``budget``."""
    if int(k) != k or k < 1:
        raise DomainError(f"k must be a positive integer, got {k!r}")
    return PrivacyBudget(budget.epsilon / (int(k) + 1))


def scale_coordinates(x, coord_intervals: Sequence[TruncationInterval]) -> np.ndarray:
    """Truncate each coordinate into its interval and map it onto [-1, 1].

    Works on a single vector of length k or a matrix with k columns.
    """
    arr = np.asarray(x, dtype=float)
    k = arr.shape[-1] if arr.ndim else 1
    if arr.ndim == 0 or k != len(coord_intervals):
        raise ConfigurationError(
            f"x has {k} coordinates but {len(coord_intervals)} intervals were given"
        )
    if not np.all(np.isfinite(arr)):
        raise DomainError("explanatory values must be finite")
    lo = np.array([iv.lower for iv in coord_intervals])
    hi = np.array([iv.upper for iv in coord_intervals])
    clipped = np.clip(arr, lo, hi)
    return np.clip(2.0 * (clipped - 0.5 * (lo + hi)) / (hi - lo), -1.0, 1.0)


def encode_probs(x_scaled, budget_per_coord: PrivacyBudget):
    """(P(z_j = +1), P(z_j = -1)) with P(z_j = +1) = 1/2 + x_j / (2 C), for rescaled x."""
    x = np.asarray(x_scaled, dtype=float)
    return _two_point(0.5 * (1.0 + x), 0.5 * (1.0 - x), budget_per_coord)


def encode_prob_plus(x_scaled, budget_per_coord: PrivacyBudget) -> np.ndarray:
    return encode_probs(x_scaled, budget_per_coord)[0]


def encode_prob_minus(x_scaled, budget_per_coord: PrivacyBudget) -> np.ndarray:
    return encode_probs(x_scaled, budget_per_coord)[1]


def encode_x_private(
    x,
    coord_intervals: Sequence[TruncationInterval],
    budget_per_coord: PrivacyBudget,
    rng: np.random.Generator,
) -> np.ndarray:
    """Perturb each explanatory coordinate into an independent {-1, +1} bit."""
    p = encode_prob_plus(scale_coordinates(x, coord_intervals), budget_per_coord)
    return to_signed(rng.random(p.shape) < p)
