"""Asymmetric-Laplace working model and the closed-form response curve.

``psi(theta)`` is the probability that a user whose response follows the
asymmetric Laplace law with location ``theta`` reports bit 1 after truncation
into ``[l, u]`` and a bit flip with budget ``epsilon``.  Because the bit flip
is affine in its input, ``psi(theta) = 1/2 + (E[t(Y)] - m) / (C (u - l))``
with ``m`` the interval midpoint; the three branches below are the closed
forms of ``E[t(Y)]`` for ``theta <= l``, ``l < theta < u`` and ``theta >= u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .mechanisms import PrivacyBudget, TruncationInterval

_EXP_FLOOR = -745.0


@dataclass(frozen=True)
class QuantileModel:
    alpha: float
    sigma: float = 1.0

    def __post_init__(self):
        a, s = float(self.alpha), float(self.sigma)
        if not 0.0 < a < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not (math.isfinite(s) and s > 0.0):
            raise DomainError(f"sigma must be positive, got {self.sigma!r}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "sigma", s)


@dataclass(frozen=True)
class PsiConfig:
    model: QuantileModel
    interval: TruncationInterval
    budget: PrivacyBudget

    def slope(self) -> float:
        """1 / (C_eps (u - l)): the bit-flip probability gained per unit of input."""
        return 1.0 / (self.budget.c_epsilon() * self.interval.width)

    def with_budget(self, budget: PrivacyBudget) -> "PsiConfig":
        return PsiConfig(self.model, self.interval, budget)


def check_loss(tau, alpha: float):
    """Tilted absolute loss rho_alpha."""
    t = np.asarray(tau, dtype=float)
    out = np.where(t > 0.0, alpha * t, (alpha - 1.0) * t)
    return float(out) if out.ndim == 0 else out


def ald_pdf(y, mu, model: QuantileModel):
    a, s = model.alpha, model.sigma
    z = (np.asarray(y, dtype=float) - mu) / s
    out = a * (1.0 - a) / s * np.exp(-check_loss(z, a))
    return float(out) if np.ndim(out) == 0 else out


def ald_cdf(y, mu, model: QuantileModel):
    a, s = model.alpha, model.sigma
    d = (np.asarray(y, dtype=float) - mu) / s
    left = a * np.exp(np.minimum((1.0 - a) * d, 0.0))
    right = 1.0 - (1.0 - a) * np.exp(np.minimum(-a * d, 0.0))
    out = np.where(d <= 0.0, left, right)
    return float(out) if out.ndim == 0 else out


def ald_ppf(q, mu, model: QuantileModel):
    """Inverse CDF; ``q`` must lie in the open unit interval."""
    a, s = model.alpha, model.sigma
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0.0) | (q >= 1.0)):
        raise DomainError("ald_ppf needs probabilities strictly inside (0, 1)")
    with np.errstate(divide="ignore"):
        left = s / (1.0 - a) * np.log(q / a)
        right = -s / a * np.log((1.0 - q) / (1.0 - a))
    out = mu + np.where(q <= a, left, right)
    return float(out) if out.ndim == 0 else out


def ald_sample(mu, model: QuantileModel, rng: np.random.Generator, size=None):
    q = rng.random(np.shape(mu) if size is None else size)
    # random() can return exactly 0
    q = np.where(q == 0.0, np.nextafter(0.0, 1.0), q)
    return ald_ppf(q, mu, model)


def _exp(x):
    return np.exp(np.maximum(x, _EXP_FLOOR))


def _finite_theta(theta) -> np.ndarray:
    t = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("psi requires finite theta")
    return t


def psi_all(theta, cfg: PsiConfig):
    """Return ``(psi, psi_d1, psi_d2)`` evaluated at ``theta`` (vectorised)."""
    t = _finite_theta(theta)
    a, s = cfg.model.alpha, cfg.model.sigma
    lo, hi = cfg.interval.lower, cfg.interval.upper
    c = cfg.slope()
    half_gap = 0.5 * cfg.interval.width * c  # = 1 / (2 C_eps)
    k2 = a * (1.0 - a) * c / s

    below = t <= lo
    above = t >= hi
    inside = ~(below | above)

    psi = np.empty_like(t)
    d1 = np.empty_like(t)
    d2 = np.empty_like(t)

    if np.any(below):
        tb = t[below]
        e = _exp(-a * (lo - tb) / s) - _exp(-a * (hi - tb) / s)
        psi[below] = 0.5 - half_gap + c * (1.0 - a) * s / a * e
        d1[below] = (1.0 - a) * c * e
        d2[below] = k2 * e
    if np.any(above):
        ta = t[above]
        e = _exp((1.0 - a) * (lo - ta) / s) - _exp((1.0 - a) * (hi - ta) / s)
        psi[above] = 0.5 + half_gap + c * a * s / (1.0 - a) * e
        d1[above] = -a * c * e
        d2[above] = k2 * e
    if np.any(inside):
        ti = t[inside]
        g = _exp((1.0 - a) * (lo - ti) / s)
        h = _exp(-a * (hi - ti) / s)
        mean_shift = s * (a / (1.0 - a) * g - (1.0 - a) / a * h + (1.0 - a) / a - a / (1.0 - a))
        psi[inside] = 0.5 + c * (ti - cfg.interval.midpoint + mean_shift)
        d1[inside] = c * (1.0 - a * g - (1.0 - a) * h)
        d2[inside] = k2 * (g - h)

    if t.ndim == 0:
        return float(psi), float(d1), float(d2)
    return psi, d1, d2


def psi(theta, cfg: PsiConfig):
    return psi_all(theta, cfg)[0]


def psi_d1(theta, cfg: PsiConfig):
    return psi_all(theta, cfg)[1]


def psi_d2(theta, cfg: PsiConfig):
    return psi_all(theta, cfg)[2]


def boundary_limits(cfg: PsiConfig) -> dict:
    """Closed-form one-sided limits of psi, psi' and psi'' at l and u.

    Each entry maps ``(function, boundary)`` to ``(from_below, from_above)``,
    both computed from the branch formulas evaluated exactly at the boundary.
    """
    a, s = cfg.model.alpha, cfg.model.sigma
    lo, hi = cfg.interval.lower, cfg.interval.upper
    c = cfg.slope()
    half_gap = 0.5 * cfg.interval.width * c
    k2 = a * (1.0 - a) * c / s
    w = hi - lo

    # theta = l: "below" branch vs interior branch (G = 1, H = exp(-a w / s))
    e_b = 1.0 - math.exp(-a * w / s)
    h_l = math.exp(-a * w / s)
    shift_l = s * (a / (1.0 - a) - (1.0 - a) / a * h_l + (1.0 - a) / a - a / (1.0 - a))
    at_l = {
        "psi": (0.5 - half_gap + c * (1.0 - a) * s / a * e_b, 0.5 + c * (lo - cfg.interval.midpoint + shift_l)),
        "psi_d1": ((1.0 - a) * c * e_b, c * (1.0 - a - (1.0 - a) * h_l)),
        "psi_d2": (k2 * e_b, k2 * (1.0 - h_l)),
    }
    # theta = u: interior branch (G = exp(-(1-a) w / s), H = 1) vs "above" branch
    g_u = math.exp(-(1.0 - a) * w / s)
    e_a = g_u - 1.0
    shift_u = s * (a / (1.0 - a) * g_u - (1.0 - a) / a + (1.0 - a) / a - a / (1.0 - a))
    at_u = {
        "psi": (0.5 + c * (hi - cfg.interval.midpoint + shift_u), 0.5 + half_gap + c * a * s / (1.0 - a) * e_a),
        "psi_d1": (c * (1.0 - a * g_u - (1.0 - a)), -a * c * e_a),
        "psi_d2": (k2 * (g_u - 1.0), k2 * e_a),
    }
    out = {}
    for name in ("psi", "psi_d1", "psi_d2"):
        out[(name, "lower")] = at_l[name]
        out[(name, "upper")] = at_u[name]
    return out
