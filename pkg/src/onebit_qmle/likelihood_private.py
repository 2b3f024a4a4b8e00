"""Private-X scenario: coordinate perturbation law, prior marginal and Phi.

Phi(beta, zx) is the model probability that the response bit is 1 given the
perturbed explanatory bits zx, obtained by averaging psi over the curator's
finite-support prior for the rescaled covariates, weighted by the posterior
of x given zx.  The response bit uses the split budget epsilon / (k + 1),
so the ``PsiConfig`` passed here must already carry that budget.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import CapabilityError, ConfigurationError, DataError, DomainError
from .likelihood_public import _check_beta, _pairwise_sum_rows
from .mechanisms import PrivacyBudget, encode_probs
from .quantile_model import PsiConfig, psi_all

log = logging.getLogger(__name__)

ENUMERATION_CAP = 20
ENUMERATION_WARN = 12
PHI_SHRINK = math.exp(-1e-6)
LOG_FLOOR = 1e-15
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class PrivateObservation:
    zx: np.ndarray
    zy: int


class PrivateData:
    """Column-oriented container for ``{(zx_i, zy_i)}``."""

    def __init__(self, zx, zy):
        zx = np.asarray(zx)
        if zx.ndim == 1:
            zx = zx[:, None]
        zy = np.asarray(zy)
        if zx.ndim != 2 or zy.shape != (zx.shape[0],):
            raise DataError(f"zx must be (n, k) and zy (n,), got {zx.shape} and {zy.shape}")
        if not np.all((zx == 1) | (zx == -1)):
            raise DataError("explanatory bits must be in {-1, +1}")
        if not np.all((zy == 0) | (zy == 1)):
            raise DataError("response bits must be in {0, 1}")
        self.zx = np.ascontiguousarray(zx, dtype=np.int8)
        self.zy = zy.astype(np.int8)

    @classmethod
    def from_observations(cls, observations: Iterable[PrivateObservation]) -> "PrivateData":
        obs = list(observations)
        if not obs:
            raise DataError("no observations")
        return cls(np.stack([np.atleast_1d(o.zx) for o in obs]), np.array([o.zy for o in obs]))

    @property
    def dim(self) -> int:
        return self.zx.shape[1]

    def __len__(self):
        return self.zx.shape[0]

    def __getitem__(self, i) -> PrivateObservation:
        return PrivateObservation(self.zx[i].copy(), int(self.zy[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, indices) -> "PrivateData":
        idx = np.asarray(indices)
        return PrivateData(self.zx[idx], self.zy[idx])

    def patterns(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct zx rows and the index of each observation's row."""
        uniq, inverse = np.unique(self.zx, axis=0, return_inverse=True)
        return uniq, inverse.reshape(-1)


def as_private_data(data) -> PrivateData:
    if isinstance(data, PrivateData):
        return data
    return PrivateData.from_observations(data)


class FinitePrior:
    """Curator's provisional law for the rescaled covariates: atoms in [-1, 1]^k."""

    def __init__(self, support, masses):
        support = np.atleast_2d(np.asarray(support, dtype=float))
        masses = np.asarray(masses, dtype=float)
        if masses.shape != (support.shape[0],):
            raise ConfigurationError("one mass per support point is required")
        if np.any(masses < 0) or not math.isclose(masses.sum(), 1.0, rel_tol=1e-12):
            raise ConfigurationError("prior masses must be non-negative and sum to 1")
        if np.any(np.abs(support) > 1.0):
            raise DomainError("prior support must lie in [-1, 1]^k")
        self.support = np.ascontiguousarray(support)
        self.masses = masses

    @property
    def k(self) -> int:
        return self.support.shape[1]


class RademacherPrior(FinitePrior):
    """Uniform law on {-1, +1}^k."""

    def __init__(self, k: int):
        if k < 1:
            raise DomainError("k must be >= 1")
        if k > ENUMERATION_CAP:
            raise CapabilityError(f"k={k} exceeds the enumeration cap of {ENUMERATION_CAP}")
        if k > ENUMERATION_WARN:
            log.warning("Rademacher prior with k=%d has %d atoms; Phi will be slow", k, 2**k)
        support = np.array(list(itertools.product((-1.0, 1.0), repeat=k)))
        super().__init__(support, np.full(2**k, 2.0**-k))


def qzx_prob(zx, x_scaled, budget_per_coord: PrivacyBudget) -> float:
    """Probability of the explanatory bit vector ``zx`` given rescaled covariates."""
    zx = np.asarray(zx, dtype=float)
    x = np.asarray(x_scaled, dtype=float)
    if zx.shape != x.shape:
        raise ConfigurationError(f"zx has shape {zx.shape}, x has {x.shape}")
    if np.any(np.abs(x) > 1.0):
        raise DomainError("x_scaled must lie in [-1, 1]^k")
    plus, minus = encode_probs(x, budget_per_coord)
    return float(np.prod(np.where(zx > 0, plus, minus)))


def _log_q_rows(zx_rows: np.ndarray, support: np.ndarray, budget: PrivacyBudget) -> np.ndarray:
    """log Q(zx | x_s) for each (pattern, atom) pair, shape (P, S).

    Uses only elementwise work and contiguous last-axis sums so each row
    is computed identically regardless of how many rows are requested.
    """
    plus, minus = encode_probs(support, budget)
    lp, lm = np.log(plus), np.log(minus)
    pos = zx_rows[:, None, :] > 0
    return np.add.reduce(np.where(pos, lp[None], lm[None]), axis=-1)


def phat_zx(zx, prior: FinitePrior, budget_per_coord: PrivacyBudget) -> float:
    """Prior-marginal probability of observing ``zx``."""
    zx = np.atleast_2d(np.asarray(zx))
    if zx.shape[1] != prior.k:
        raise ConfigurationError(f"zx has {zx.shape[1]} entries, prior has k={prior.k}")
    lq = _log_q_rows(zx, prior.support, budget_per_coord)
    out = _pairwise_sum_rows(np.exp(lq) * prior.masses)
    return float(out[0]) if out.size == 1 else out


class PhiModel:
    """Phi and its derivatives for the linear asymmetric-Laplace model.

    ``cfg`` carries the response interval, quantile model and the *split*
    budget used for the response bit; ``budget_per_coord`` is the budget of
    each explanatory bit (normally the same split budget).
    """

    def __init__(self, cfg: PsiConfig, prior: FinitePrior | None = None,
                 budget_per_coord: PrivacyBudget | None = None, shrink: float = PHI_SHRINK):
        self.cfg = cfg
        self.budget_per_coord = budget_per_coord or cfg.budget
        self.prior = prior
        self.shrink = float(shrink)
        self._weights_cache: dict[bytes, np.ndarray] = {}

    def _prior_for(self, k: int) -> FinitePrior:
        if self.prior is None:
            if k > ENUMERATION_CAP:
                raise CapabilityError(f"d={k} exceeds the enumeration cap of {ENUMERATION_CAP}")
            self.prior = RademacherPrior(k)
        if self.prior.k != k:
            raise ConfigurationError(f"prior has k={self.prior.k}, observations have {k}")
        return self.prior

    def posterior_weights(self, zx_rows: np.ndarray, use_cache: bool = True) -> np.ndarray:
        """Posterior over prior atoms given each zx row, shape (P, S)."""
        zx_rows = np.atleast_2d(np.asarray(zx_rows, dtype=np.int8))
        prior = self._prior_for(zx_rows.shape[1])
        out = np.empty((zx_rows.shape[0], prior.support.shape[0]))
        missing = []
        for i, row in enumerate(zx_rows):
            key = row.tobytes()
            if use_cache and key in self._weights_cache:
                out[i] = self._weights_cache[key]
            else:
                missing.append(i)
        step = max(1, _CHUNK_ELEMENTS // (prior.support.size or 1))
        for start in range(0, len(missing), step):
            idx = missing[start:start + step]
            lq = _log_q_rows(zx_rows[idx], prior.support, self.budget_per_coord)
            w = np.exp(lq) * prior.masses
            w = w / _pairwise_sum_rows(w)[:, None]
            out[idx] = w
            if use_cache:
                for j, i in enumerate(idx):
                    self._weights_cache[zx_rows[i].tobytes()] = w[j]
        return out

    def _psi_on_support(self, beta):
        prior = self.prior
        return psi_all(prior.support @ beta, self.cfg)

    def evaluate(self, beta, zx_rows, order: int = 2, use_cache: bool = True):
        """Return ``(phi, phi_d1, phi_d2)`` for every zx row (shrink applied).

        ``phi_d1`` has shape (P, d) and ``phi_d2`` (P, d, d); derivatives
        are ``None`` when ``order`` is lower.
        """
        zx_rows = np.atleast_2d(np.asarray(zx_rows, dtype=np.int8))
        w = self.posterior_weights(zx_rows, use_cache)
        b = _check_beta(beta, zx_rows.shape[1])
        p0, p1, p2 = self._psi_on_support(b)
        phi = self.shrink * _pairwise_sum_rows(w * p0)
        d1 = d2 = None
        s = self.prior.support
        if order >= 1:
            wt = w * p1
            d1 = self.shrink * np.stack([_pairwise_sum_rows(wt * s[:, j]) for j in range(s.shape[1])], axis=1)
        if order >= 2:
            k = s.shape[1]
            wt = w * p2
            d2 = np.empty((zx_rows.shape[0], k, k))
            for i in range(k):
                for j in range(i, k):
                    d2[:, i, j] = d2[:, j, i] = self.shrink * _pairwise_sum_rows(wt * (s[:, i] * s[:, j]))
        return phi, d1, d2


def _default_model(cfg, prior, budget_per_coord):
    return PhiModel(cfg, prior, budget_per_coord)


def phi(beta, zx, cfg: PsiConfig, prior: FinitePrior | None = None,
        budget_per_coord: PrivacyBudget | None = None) -> float:
    vals = _default_model(cfg, prior, budget_per_coord).evaluate(beta, zx, order=0)[0]
    return float(vals[0]) if np.ndim(zx) == 1 else vals


def phi_d1(beta, zx, cfg: PsiConfig, prior=None, budget_per_coord=None) -> np.ndarray:
    d1 = _default_model(cfg, prior, budget_per_coord).evaluate(beta, zx, order=1)[1]
    return d1[0] if np.ndim(zx) == 1 else d1


def phi_d2(beta, zx, cfg: PsiConfig, prior=None, budget_per_coord=None) -> np.ndarray:
    d2 = _default_model(cfg, prior, budget_per_coord).evaluate(beta, zx, order=2)[2]
    return d2[0] if np.ndim(zx) == 1 else d2


class PrivateLikelihood:
    """Mean log-likelihood of private-X data.

    The ``log p_hat(zx_i)`` term is omitted as it does not depend on beta.
    Phi is evaluated once per distinct zx pattern and broadcast back to the
    observations; ``use_cache=False`` evaluates it row by row instead and
    yields bit-identical values.
    """

    def __init__(self, data, cfg: PsiConfig, prior: FinitePrior | None = None,
                 budget_per_coord: PrivacyBudget | None = None, use_cache: bool = True):
        self.data = as_private_data(data)
        if len(self.data) == 0:
            raise DataError("empty data")
        self.n = len(self.data)
        self.dim = self.data.dim
        self.phi_model = PhiModel(cfg, prior, budget_per_coord)
        self.use_cache = use_cache
        if use_cache:
            self._patterns, self._inverse = self.data.patterns()
        else:
            self._patterns, self._inverse = self.data.zx, np.arange(self.n)

    def _per_obs(self, beta, order):
        phi_p, d1_p, d2_p = self.phi_model.evaluate(beta, self._patterns, order, self.use_cache)
        return phi_p, d1_p, d2_p

    def terms(self, beta) -> np.ndarray:
        phi_p = self._per_obs(beta, 0)[0]
        ph = phi_p[self._inverse]
        zy = self.data.zy
        return np.where(zy == 1, np.log(ph), np.log(np.maximum(1.0 - ph, LOG_FLOOR)))

    def loglik(self, beta) -> float:
        return float(_pairwise_sum_rows(self.terms(beta))) / self.n

    def _residual_weights(self, ph):
        zy = self.data.zy
        return np.where(zy == 1, 1.0 / ph, -1.0 / np.maximum(1.0 - ph, LOG_FLOOR))

    def scores(self, beta) -> np.ndarray:
        phi_p, d1_p, _ = self._per_obs(beta, 1)
        ph = phi_p[self._inverse]
        return self._residual_weights(ph)[:, None] * d1_p[self._inverse]

    def grad(self, beta) -> np.ndarray:
        sc = self.scores(beta)
        return _pairwise_sum_rows(np.ascontiguousarray(sc.T)) / self.n

    def value_and_grad(self, beta):
        phi_p, d1_p, _ = self._per_obs(beta, 1)
        ph = phi_p[self._inverse]
        zy = self.data.zy
        terms = np.where(zy == 1, np.log(ph), np.log(np.maximum(1.0 - ph, LOG_FLOOR)))
        sc = self._residual_weights(ph)[:, None] * d1_p[self._inverse]
        return (float(_pairwise_sum_rows(terms)) / self.n,
                _pairwise_sum_rows(np.ascontiguousarray(sc.T)) / self.n)

    def hess(self, beta) -> np.ndarray:
        phi_p, d1_p, d2_p = self._per_obs(beta, 2)
        # aggregate by pattern: only counts of zy = 1 / zy = 0 matter
        n_pat = phi_p.shape[0]
        ones = np.bincount(self._inverse, weights=self.data.zy.astype(float), minlength=n_pat)
        zeros = np.bincount(self._inverse, minlength=n_pat) - ones
        q = np.maximum(1.0 - phi_p, LOG_FLOOR)
        r = ones / phi_p - zeros / q
        s = ones / phi_p**2 + zeros / q**2
        h = (r[:, None, None] * d2_p - s[:, None, None] * d1_p[:, :, None] * d1_p[:, None, :]).sum(axis=0)
        return 0.5 * (h + h.T) / self.n


def loglik_private(beta, data, cfg, prior=None, budget_per_coord=None, use_cache=True) -> float:
    return PrivateLikelihood(data, cfg, prior, budget_per_coord, use_cache).loglik(beta)


def grad_loglik_private(beta, data, cfg, prior=None, budget_per_coord=None) -> np.ndarray:
    return PrivateLikelihood(data, cfg, prior, budget_per_coord).grad(beta)


def hess_loglik_private(beta, data, cfg, prior=None, budget_per_coord=None) -> np.ndarray:
    return PrivateLikelihood(data, cfg, prior, budget_per_coord).hess(beta)
