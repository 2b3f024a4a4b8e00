"""Public-X scenario: response probabilities, log-likelihood, score and Hessian."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, DataError, DomainError
from .quantile_model import PsiConfig, psi_all

DEFAULT_BOX = (-10.0, 10.0)


@dataclass(frozen=True)
class Box:
    """Per-coordinate bounds of the compact parameter set."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ConfigurationError("box needs finite bounds with lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, d: int, lower: float = DEFAULT_BOX[0], upper: float = DEFAULT_BOX[1]) -> "Box":
        return cls(np.full(d, float(lower)), np.full(d, float(upper)))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, beta) -> bool:
        b = np.asarray(beta, dtype=float)
        return bool(np.all(b >= self.lower) and np.all(b <= self.upper))

    def project(self, beta) -> np.ndarray:
        return np.clip(np.asarray(beta, dtype=float), self.lower, self.upper)

    def as_bounds(self) -> list[tuple[float, float]]:
        return list(zip(self.lower.tolist(), self.upper.tolist()))


@dataclass(frozen=True)
class Coefficients:
    beta: np.ndarray
    box: Box

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if b.shape != (self.box.dim,):
            raise ConfigurationError(f"beta has shape {b.shape}, box has dimension {self.box.dim}")
        if not self.box.contains(b):
            raise DomainError("beta lies outside its box")
        object.__setattr__(self, "beta", b)


@dataclass(frozen=True)
class PublicObservation:
    x: np.ndarray
    z: int


class PublicData:
    """Column-oriented container for the curator's view ``{(x_i, z_i)}``."""

    def __init__(self, x, z):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        z = np.asarray(z)
        if x.ndim != 2 or z.shape != (x.shape[0],):
            raise DataError(f"x must be (n, d) and z (n,), got {x.shape} and {z.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("covariates must be finite")
        if not np.all((z == 0) | (z == 1)):
            raise DataError("public-X responses must be bits in {0, 1}")
        self.x = np.ascontiguousarray(x)
        self.z = z.astype(np.int8)
        self._xt = None

    @classmethod
    def from_observations(cls, observations: Iterable[PublicObservation]) -> "PublicData":
        obs = list(observations)
        if not obs:
            raise DataError("no observations")
        return cls(np.stack([np.atleast_1d(o.x) for o in obs]), np.array([o.z for o in obs]))

    @property
    def xt(self) -> np.ndarray:
        # transposed copy so that per-coordinate sums run over contiguous rows
        if self._xt is None:
            self._xt = np.ascontiguousarray(self.x.T)
        return self._xt

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i) -> PublicObservation:
        return PublicObservation(self.x[i].copy(), int(self.z[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, indices) -> "PublicData":
        idx = np.asarray(indices)
        return PublicData(self.x[idx], self.z[idx])


def as_public_data(data) -> PublicData:
    if isinstance(data, PublicData):
        return data
    return PublicData.from_observations(data)


class ResponseModel(ABC):
    """Curator's model for P(z = 1 | x) as a function of the coefficients.

    Subclasses provide the probability and its first two derivatives with
    respect to beta; the likelihood code never looks inside them.
    """

    @abstractmethod
    def prob(self, beta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Lambda(beta, x_i) for every row, shape (n,)."""

    @abstractmethod
    def prob_grad(self, beta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """d Lambda / d beta, shape (n, d)."""

    @abstractmethod
    def prob_hess(self, beta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """d^2 Lambda / d beta^2, shape (n, d, d)."""

    def prob_bounds(self) -> tuple[float, float] | None:
        return None


class QuantileResponse(ResponseModel):
    """Lambda(beta, x) = psi(<beta, x>) for the asymmetric-Laplace working model."""

    def __init__(self, cfg: PsiConfig):
        self.cfg = cfg

    def index_terms(self, beta, x):
        return psi_all(np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float), self.cfg)

    def prob(self, beta, x):
        return self.index_terms(beta, x)[0]

    def prob_grad(self, beta, x):
        return self.index_terms(beta, x)[1][:, None] * np.asarray(x, dtype=float)

    def prob_hess(self, beta, x):
        x = np.asarray(x, dtype=float)
        d2 = self.index_terms(beta, x)[2]
        return d2[:, None, None] * x[:, :, None] * x[:, None, :]

    def prob_bounds(self):
        return self.cfg.budget.prob_bounds()


def _as_model(model) -> ResponseModel:
    if isinstance(model, ResponseModel):
        return model
    if isinstance(model, PsiConfig):
        return QuantileResponse(model)
    raise TypeError(f"expected a ResponseModel or PsiConfig, got {type(model).__name__}")


def _check_beta(beta, d: int) -> np.ndarray:
    b = np.atleast_1d(np.asarray(getattr(beta, "beta", beta), dtype=float))
    if b.shape != (d,):
        raise ConfigurationError(f"beta has shape {b.shape}, data has dimension {d}")
    return b


def _pairwise_sum_rows(m: np.ndarray) -> np.ndarray:
    # np.sum over the last, contiguous axis uses pairwise summation
    return np.add.reduce(np.ascontiguousarray(m), axis=-1)


class PublicLikelihood:
    """Mean log-likelihood of public-X data under a response model.

    The ``log f_X(x_i)`` term is omitted: it does not depend on beta, so
    maximizers and curvature are unaffected, but reported values differ from
    the full joint log-likelihood by a data-dependent constant.
    """

    def __init__(self, data, model):
        self.data = as_public_data(data)
        if len(self.data) == 0:
            raise DataError("empty data")
        self.model = _as_model(model)
        self.n = len(self.data)
        self.dim = self.data.dim

    def _pieces(self, beta):
        b = _check_beta(beta, self.dim)
        x = self.data.x
        if isinstance(self.model, QuantileResponse):
            lam, d1, d2 = self.model.index_terms(b, x)
            return b, lam, d1, d2
        return b, self.model.prob(b, x), None, None

    def terms(self, beta) -> np.ndarray:
        """Per-observation log-likelihood contributions."""
        _, lam, _, _ = self._pieces(beta)
        z = self.data.z
        return np.where(z == 1, np.log(lam), np.log1p(-lam))

    def loglik(self, beta) -> float:
        return float(_pairwise_sum_rows(self.terms(beta))) / self.n

    def _residual_weights(self, lam):
        z = self.data.z
        return np.where(z == 1, 1.0 / lam, -1.0 / (1.0 - lam))

    def scores(self, beta) -> np.ndarray:
        """Per-observation score vectors, shape (n, d)."""
        b, lam, d1, _ = self._pieces(beta)
        r = self._residual_weights(lam)
        if d1 is not None:
            return (r * d1)[:, None] * self.data.x
        return r[:, None] * self.model.prob_grad(b, self.data.x)

    def grad(self, beta) -> np.ndarray:
        b, lam, d1, _ = self._pieces(beta)
        r = self._residual_weights(lam)
        if d1 is not None:
            return _pairwise_sum_rows(self.data.xt * (r * d1)) / self.n
        return _pairwise_sum_rows(np.ascontiguousarray((r[:, None] * self.model.prob_grad(b, self.data.x)).T)) / self.n

    def value_and_grad(self, beta):
        b, lam, d1, _ = self._pieces(beta)
        z = self.data.z
        value = float(_pairwise_sum_rows(np.where(z == 1, np.log(lam), np.log1p(-lam)))) / self.n
        r = self._residual_weights(lam)
        if d1 is not None:
            return value, _pairwise_sum_rows(self.data.xt * (r * d1)) / self.n
        return value, self.grad(b)

    def hess(self, beta) -> np.ndarray:
        b, lam, d1, d2 = self._pieces(beta)
        z = self.data.z
        r = self._residual_weights(lam)
        s = np.where(z == 1, 1.0 / lam**2, 1.0 / (1.0 - lam) ** 2)
        d = self.dim
        out = np.empty((d, d))
        if d1 is not None:
            w = r * d2 - s * d1**2
            xt = self.data.xt
            for i in range(d):
                for j in range(i, d):
                    out[i, j] = out[j, i] = _pairwise_sum_rows(xt[i] * xt[j] * w) / self.n
            return out
        g = self.model.prob_grad(b, self.data.x)
        h = self.model.prob_hess(b, self.data.x)
        full = r[:, None, None] * h - s[:, None, None] * g[:, :, None] * g[:, None, :]
        for i in range(d):
            for j in range(i, d):
                out[i, j] = out[j, i] = _pairwise_sum_rows(full[:, i, j]) / self.n
        return out


def lambda_eps(beta, x, cfg: PsiConfig):
    """Response probability Lambda(beta, x) = psi(<beta, x>)."""
    b = np.atleast_1d(np.asarray(getattr(beta, "beta", beta), dtype=float))
    xa = np.asarray(x, dtype=float)
    if xa.shape[-1] != b.size:
        raise ConfigurationError(f"x has {xa.shape[-1]} coordinates, beta has {b.size}")
    return psi_all(xa @ b, cfg)[0]


def loglik_public(beta, data, cfg) -> float:
    return PublicLikelihood(data, cfg).loglik(beta)


def grad_loglik_public(beta, data, cfg) -> np.ndarray:
    return PublicLikelihood(data, cfg).grad(beta)


def hess_loglik_public(beta, data, cfg) -> np.ndarray:
    return PublicLikelihood(data, cfg).hess(beta)


def sample_design_x(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from the curator's design law, Uniform[-1, 1]^d."""
    if d < 1:
        raise DomainError("d must be >= 1")
    shape = (d,) if size is None else (size, d)
    return rng.uniform(-1.0, 1.0, size=shape)


def design_from_uniforms(u: np.ndarray) -> np.ndarray:
    """Same law as ``sample_design_x`` driven by pre-drawn uniforms."""
    return 2.0 * np.asarray(u) - 1.0
