"""Box-constrained likelihood maximization, the non-private baseline and bootstrap."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, sparse
from scipy.stats import qmc

from .errors import DataError, NumericalError
from .likelihood_private import PrivateLikelihood
from .likelihood_public import Box, PublicLikelihood
from .quantile_model import QuantileModel, check_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    box: Box | None = None
    n_starts: int = 5
    gradient_tolerance: float = 1e-6
    max_iterations: int = 500
    seed: int = 0
    newton_polish: bool = True

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def box_for(self, d: int) -> Box:
        if self.box is None:
            return Box.uniform(d)
        if self.box.dim != d:
            raise ValueError(f"box has dimension {self.box.dim}, problem has {d}")
        return self.box


@dataclass
class FitResult:
    beta_hat: np.ndarray
    loglik_value: float
    converged: bool
    n_evaluations: int
    active_bounds: tuple[int, ...] = ()
    start_index_of_winner: int = 0
    gradient_norm: float = float("nan")
    message: str = ""


class _Counted:
    def __init__(self, fn, sign=-1.0):
        self.fn = fn
        self.sign = sign
        self.calls = 0

    def __call__(self, beta):
        self.calls += 1
        f, g = self.fn(beta)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite objective at beta={np.asarray(beta).tolist()}", beta=np.array(beta))
        return self.sign * f, self.sign * np.asarray(g, dtype=float)


def start_points(box: Box, n_starts: int, seed: int) -> np.ndarray:
    """Box center followed by Latin-hypercube points."""
    pts = [box.center]
    if n_starts > 1:
        sample = qmc.LatinHypercube(d=box.dim, seed=np.random.default_rng(seed)).random(n_starts - 1)
        pts.extend(qmc.scale(sample, box.lower, box.upper))
    return np.array(pts)


def _projected_gradient(beta, grad, box: Box):
    pg = np.array(grad, dtype=float)
    at_lo = beta <= box.lower
    at_hi = beta >= box.upper
    pg[at_lo & (pg < 0)] = 0.0
    pg[at_hi & (pg > 0)] = 0.0
    return pg


def _newton_polish(value_and_grad, hessian, beta, f, g, box: Box, tol: float, counter: _Counted):
    for _ in range(20):
        if np.max(np.abs(g)) <= 1e-3 * tol:
            break
        h = hessian(beta)
        try:
            np.linalg.cholesky(-h)
        except np.linalg.LinAlgError:
            break
        step = np.linalg.solve(-h, g)
        t = 1.0
        improved = False
        while t > 1e-8:
            cand = beta + t * step
            if box.contains(cand):
                fc, gc = counter(cand)
                fc, gc = -fc, -gc
                if fc >= f:
                    beta, f, g = cand, fc, gc
                    improved = True
                    break
            t *= 0.5
        if not improved:
            break
    return beta, f, g


def _local_maximize(value_and_grad, hessian, x0, box: Box, config: FitConfig):
    counter = _Counted(value_and_grad)
    res = optimize.minimize(
        counter, x0, jac=True, method="L-BFGS-B", bounds=box.as_bounds(),
        options={"maxiter": config.max_iterations, "ftol": 1e-15,
                 "gtol": 1e-3 * config.gradient_tolerance, "maxcor": 20},
    )
    beta = box.project(res.x)
    f, g = counter(beta)
    f, g = -f, -g
    message = str(res.message)
    if res.status == 2 or not np.isfinite(f):
        # line-search trouble: derivative-free fallback from the current point
        fallback = optimize.minimize(lambda b: counter(b)[0], beta, method="Powell",
                                     bounds=box.as_bounds(),
                                     options={"maxiter": config.max_iterations, "xtol": 1e-10, "ftol": 1e-14})
        cand = box.project(fallback.x)
        fc, gc = counter(cand)
        if -fc >= f:
            beta, f, g = cand, -fc, -gc
        message += " | powell fallback"
    if config.newton_polish and hessian is not None:
        interior = np.all(beta > box.lower) and np.all(beta < box.upper)
        if interior:
            beta, f, g = _newton_polish(value_and_grad, hessian, beta, f, g, box, config.gradient_tolerance, counter)
    return beta, f, g, counter.calls, message


def maximize(value_and_grad: Callable, config: FitConfig, dim: int,
             hessian: Callable | None = None) -> FitResult:
    """Multi-start maximization of ``value_and_grad(beta) -> (value, gradient)`` over the box.

    The winner is the start with the largest value; ties go to the lowest
    start index, so the result does not depend on evaluation order.
    """
    box = config.box_for(dim)
    best = None
    total = 0
    for i, x0 in enumerate(start_points(box, config.n_starts, config.seed)):
        beta, f, g, calls, message = _local_maximize(value_and_grad, hessian, x0, box, config)
        total += calls
        if best is None or f > best[1]:
            best = (beta, f, g, i, message)
    beta, f, g, idx, message = best
    pg = _projected_gradient(beta, g, box)
    active = tuple(int(j) for j in np.flatnonzero((beta <= box.lower) | (beta >= box.upper)))
    gnorm = float(np.max(np.abs(pg)))
    return FitResult(
        beta_hat=beta, loglik_value=float(f), converged=gnorm <= config.gradient_tolerance,
        n_evaluations=total, active_bounds=active, start_index_of_winner=idx,
        gradient_norm=gnorm, message=message,
    )


def _value_and_grad(lik):
    return lambda beta: (lik.loglik(beta), lik.grad(beta))


def fit_public(data, cfg, fit_config: FitConfig = FitConfig()) -> FitResult:
    lik = PublicLikelihood(data, cfg)
    vg = getattr(lik, "value_and_grad", None) or _value_and_grad(lik)
    return maximize(vg, fit_config, lik.dim, lik.hess)


def fit_private(data, cfg, fit_config: FitConfig = FitConfig(), prior=None, budget_per_coord=None) -> FitResult:
    """``cfg`` must carry the split budget used for the response bit."""
    lik = PrivateLikelihood(data, cfg, prior, budget_per_coord)
    vg = getattr(lik, "value_and_grad", None) or _value_and_grad(lik)
    return maximize(vg, fit_config, lik.dim, lik.hess)


def check_loss_objective(beta, x, y, alpha) -> float:
    """Sum of check losses of the residuals."""
    return float(np.sum(check_loss(np.asarray(y) - np.asarray(x) @ np.asarray(beta), alpha)))


def _check_loss_dual(x, y, alpha):
    # dual of the check-loss LP: max y'l s.t. x'l = 0, l in [alpha - 1, alpha];
    # the coefficients are minus the equality multipliers
    res = optimize.linprog(-y, A_eq=x.T, b_eq=np.zeros(x.shape[1]),
                           bounds=(alpha - 1.0, alpha), method="highs")
    if res.status != 0:
        return None, res
    return -np.asarray(res.eqlin.marginals, dtype=float), res


def _check_loss_primal(x, y, alpha, box: Box):
    n, d = x.shape
    c = np.concatenate([np.zeros(d), np.full(n, alpha), np.full(n, 1.0 - alpha)])
    eye = sparse.identity(n, format="csc")
    a_eq = sparse.hstack([sparse.csc_matrix(x), eye, -eye], format="csc")
    bounds = np.vstack([np.column_stack([box.lower, box.upper]),
                        np.column_stack([np.zeros(2 * n), np.full(2 * n, np.inf)])])
    res = optimize.linprog(c, A_eq=a_eq, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise NumericalError(f"check-loss LP failed: {res.message}")
    return res.x[:d], res


def fit_nonprivate_quantile(x, y, model: QuantileModel, box: Box | None = None) -> FitResult:
    """Exact minimizer of the check-loss sum over the box, via linear programming.

    The unconstrained problem is solved through its dual (d equality
    constraints, n bounded variables), which is fast for large n; if that
    solution leaves the box, the bounded primal LP is solved instead.  LP
    optima sit on vertices, so solutions interpolate data points exactly.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    if n == 0 or y.shape != (n,):
        raise DataError("need a nonempty (n, d) x and matching y")
    box = box or Box.uniform(d)
    a = model.alpha
    beta, res = _check_loss_dual(x, y, a)
    if beta is None or not box.contains(beta):
        beta, res = _check_loss_primal(x, y, a, box)
    beta = box.project(beta)
    obj = check_loss_objective(beta, x, y, a)
    ll = float(np.log(a * (1 - a) / model.sigma) - obj / (n * model.sigma))
    active = tuple(int(j) for j in np.flatnonzero((beta <= box.lower) | (beta >= box.upper)))
    return FitResult(beta_hat=beta, loglik_value=ll, converged=True,
                     n_evaluations=int(getattr(res, "nit", 0) or 0), active_bounds=active,
                     gradient_norm=float("nan"), message=str(res.message))


def bootstrap(data, n_replicates: int, fitter: Callable, rng: np.random.Generator,
              resampler: Callable | None = None) -> list[FitResult]:
    """Refit on resamples of already-privatized data.

    Resampling is post-processing of the submitted bits, so it costs no
    additional privacy budget.  ``resampler(rng, n)`` overrides the default
    with-replacement index draw.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    n = len(data)
    draw = resampler or (lambda g, m: g.integers(0, m, size=m))
    return [fitter(data.take(draw(rng, n))) for _ in range(n_replicates)]
