"""Plug-in sandwich covariance and Fisher-information reference matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import DomainError, SingularMatrixError
from .likelihood_public import _pairwise_sum_rows
from .quantile_model import PsiConfig, QuantileModel, psi_all

CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class SandwichEstimate:
    """A = mean Hessian, B = mean score outer product, covariance = A^-1 B A^-1.

    ``covariance`` is the asymptotic covariance of sqrt(n) (beta_hat - beta*);
    use :meth:`estimate_covariance` for the covariance of beta_hat itself.
    """

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    covariance: np.ndarray
    condition_number_a: float
    n: int

    def estimate_covariance(self) -> np.ndarray:
        return self.covariance / self.n

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.estimate_covariance()))


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def outer_product_mean(scores: np.ndarray) -> np.ndarray:
    """Mean of s_i s_i^T with pairwise summation over observations."""
    st = np.ascontiguousarray(np.asarray(scores, dtype=float).T)
    d, n = st.shape
    out = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            out[i, j] = out[j, i] = _pairwise_sum_rows(st[i] * st[j]) / n
    return out


def sandwich_from_matrices(a: np.ndarray, b: np.ndarray, n: int) -> SandwichEstimate:
    a = symmetrize(a)
    b = symmetrize(b)
    eig = np.linalg.eigvalsh(a)
    absmax, absmin = np.max(np.abs(eig)), np.min(np.abs(eig))
    cond = float(np.inf) if absmin == 0.0 else float(absmax / absmin)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularMatrixError(f"Hessian is numerically singular (condition number {cond:.3g})", cond)
    if np.all(eig < 0):
        # A is negative definite at a maximizer: factor -A
        factor = linalg.cho_factor(-a)
        a_inv_b = -linalg.cho_solve(factor, b)
        cov = -linalg.cho_solve(factor, a_inv_b.T)
    else:
        lu = linalg.lu_factor(a)
        a_inv_b = linalg.lu_solve(lu, b)
        cov = linalg.lu_solve(lu, a_inv_b.T)
    return SandwichEstimate(a, b, symmetrize(cov), cond, int(n))


def sandwich(beta_hat, likelihood) -> SandwichEstimate:
    """Plug-in A^-1 B A^-1 at ``beta_hat`` for any likelihood exposing
    ``hess(beta)`` and ``scores(beta)`` (both scenarios do)."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    if likelihood.n < beta_hat.size + 1:
        raise DomainError(f"need at least d + 1 = {beta_hat.size + 1} observations")
    a = likelihood.hess(beta_hat)
    b = outer_product_mean(likelihood.scores(beta_hat))
    return sandwich_from_matrices(a, b, likelihood.n)


def fisher_correct_model(beta, design, cfg: PsiConfig, n_draws: int = 100_000,
                         rng: np.random.Generator | None = None, return_se: bool = False):
    """E_X[psi'^2 / (psi (1 - psi)) X X^T] at ``beta``.

    ``design`` is either an (m, d) matrix (exact average over its rows) or a
    callable ``design(rng, size)`` returning draws (Monte-Carlo average).
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if callable(design):
        rng = rng if rng is not None else np.random.default_rng(0)
        x = np.asarray(design(rng, n_draws), dtype=float)
    else:
        x = np.atleast_2d(np.asarray(design, dtype=float))
    p, p1, _ = psi_all(x @ beta, cfg)
    w = p1**2 / (p * (1.0 - p))
    contrib = w[:, None, None] * x[:, :, None] * x[:, None, :]
    n = x.shape[0]
    flat = np.ascontiguousarray(contrib.reshape(n, -1).T)
    info = symmetrize(_pairwise_sum_rows(flat).reshape(beta.size, beta.size) / n)
    if not return_se:
        return info
    se = flat.std(axis=1, ddof=1).reshape(beta.size, beta.size) / np.sqrt(n)
    return info, se


def uniform_design(d: int) -> Callable:
    def draw(rng, size):
        return rng.uniform(-1.0, 1.0, size=(size, d))

    return draw


def fisher_nonprivate(model: QuantileModel, exx) -> np.ndarray:
    """Fisher information of the non-private quantile MLE: alpha(1-alpha)/sigma^2 E[XX^T]."""
    exx = np.atleast_2d(np.asarray(exx, dtype=float))
    return model.alpha * (1.0 - model.alpha) / model.sigma**2 * exx


def efficiency_ratio(private, nonprivate) -> float:
    """trace(nonprivate) / trace(private): how much information the protocol loses."""
    tp = float(np.trace(np.atleast_2d(private)))
    if tp == 0.0:
        raise DomainError("private information matrix has zero trace")
    return float(np.trace(np.atleast_2d(nonprivate))) / tp
