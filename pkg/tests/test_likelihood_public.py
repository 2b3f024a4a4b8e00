import math
import warnings

import numpy as np
import pytest

from onebit_qmle.errors import ConfigurationError, DataError, DomainError
from onebit_qmle.likelihood_public import (
    Box,
    Coefficients,
    PublicData,
    PublicLikelihood,
    PublicObservation,
    grad_loglik_public,
    hess_loglik_public,
    lambda_eps,
    loglik_public,
    sample_design_x,
)
from onebit_qmle.mechanisms import PrivacyBudget, TruncationInterval
from onebit_qmle.protocol import ProtocolConfig, SyntheticSource, run_protocol_public
from onebit_qmle.quantile_model import PsiConfig, QuantileModel, psi, psi_d1

from oracles import central_gradient, central_jacobian, naive_public_loglik, rel_err

CFG = PsiConfig(QuantileModel(0.3, 1.0), TruncationInterval(-2, 4), PrivacyBudget(2.5))


def random_data(rng, n, d):
    x = sample_design_x(d, rng, size=n)
    z = rng.integers(0, 2, size=n)
    return PublicData(x, z)


def synthetic(n, beta_star=(0.5, -0.3), seed=5):
    cfg = ProtocolConfig(n, PrivacyBudget(2.5), TruncationInterval(-2, 4), QuantileModel(0.3, 1.0), seed=seed)
    return run_protocol_public(SyntheticSource(list(beta_star), QuantileModel(0.3, 1.0)), cfg).data


def test_box_and_coefficients():
    box = Box.uniform(2)
    assert box.contains([0, 10]) and not box.contains([0, 10.1])
    assert np.array_equal(box.project([-20, 3]), [-10, 3])
    with pytest.raises(ConfigurationError):
        Box([1.0], [1.0])
    with pytest.raises(ConfigurationError):
        Box([0.0], [math.inf])
    with pytest.raises(DomainError):
        Coefficients([11.0, 0.0], box)
    with pytest.raises(ConfigurationError):
        Coefficients([1.0], box)


def test_public_data_validation():
    with pytest.raises(DataError):
        PublicData([[0.0], [1.0]], [0, 2])
    with pytest.raises(DataError):
        PublicData([[math.nan]], [1])
    with pytest.raises(DataError):
        PublicData.from_observations([])
    data = PublicData.from_observations([PublicObservation(np.array([0.1, 0.2]), 1)])
    assert data.dim == 2 and len(data) == 1


def test_lambda_examples():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.uniform(-1, 1, 3)
        assert lambda_eps(np.zeros(3), x, CFG) == pytest.approx(psi(0.0, CFG), abs=0)
    for theta in np.linspace(-5, 7, 13):
        assert lambda_eps([1.0], [theta], CFG) == psi(theta, CFG)
    with pytest.raises(ConfigurationError):
        lambda_eps([1.0, 2.0], [1.0], CFG)


def test_lambda_within_bounds():
    rng = np.random.default_rng(1)
    lo, hi = CFG.budget.prob_bounds()
    for _ in range(100):
        d = int(rng.integers(1, 6))
        v = float(lambda_eps(rng.uniform(-10, 10, d), rng.uniform(-1, 1, d), CFG))
        assert lo < v < hi


def test_loglik_single_observation():
    # Lambda = 0.75 under the unit interval at eps = ln 3 when the index is far above u
    cfg = PsiConfig(QuantileModel(0.5, 0.01), TruncationInterval(0, 1), PrivacyBudget(math.log(3)))
    data = PublicData([[1.0]], [1])
    assert loglik_public([10.0], data, cfg) == pytest.approx(math.log(0.75), abs=1e-12)
    with pytest.raises(DataError):
        PublicLikelihood(PublicData(np.zeros((0, 1)), np.zeros(0, dtype=int)), cfg)


def test_loglik_permutation_invariant_and_naive_oracle():
    rng = np.random.default_rng(2)
    data = random_data(rng, 1000, 3)
    beta = np.array([0.7, -1.2, 2.0])
    value = loglik_public(beta, data, CFG)
    perm = rng.permutation(1000)
    assert loglik_public(beta, data.take(perm), CFG) == pytest.approx(value, rel=1e-14)
    ref = naive_public_loglik(beta, data.x, data.z, lambda t: float(psi(t, CFG)))
    assert abs(value - ref) <= 1e-10


def test_gradient_and_hessian_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(10):
        d = int(rng.integers(1, 5))
        cfg = PsiConfig(QuantileModel(rng.uniform(0.1, 0.9), rng.uniform(0.3, 3)),
                        TruncationInterval(-2, 4), PrivacyBudget(rng.uniform(0.5, 5)))
        data = random_data(rng, 200, d)
        beta = rng.uniform(-3, 3, d)
        lik = PublicLikelihood(data, cfg)
        g = lik.grad(beta)
        assert rel_err(g, central_gradient(lik.loglik, beta, 1e-5)) <= 1e-5
        h = lik.hess(beta)
        assert np.array_equal(h, h.T)
        assert rel_err(h, central_jacobian(lik.grad, beta, 1e-5)) <= 1e-4
        value, g2 = lik.value_and_grad(beta)
        assert value == lik.loglik(beta) and np.array_equal(g, g2)
        assert np.allclose(lik.scores(beta).mean(axis=0), g, rtol=1e-12, atol=1e-15)


def test_module_functions_match_class():
    rng = np.random.default_rng(4)
    data = random_data(rng, 50, 2)
    beta = np.array([0.3, 0.4])
    lik = PublicLikelihood(data, CFG)
    assert np.array_equal(grad_loglik_public(beta, data, CFG), lik.grad(beta))
    assert np.array_equal(hess_loglik_public(beta, data, CFG), lik.hess(beta))


def test_single_score_reduction():
    x, b = 0.8, 1.7
    g = grad_loglik_public([b], PublicData([[x]], [1]), CFG)
    assert g[0] == pytest.approx(psi_d1(b * x, CFG) * x / psi(b * x, CFG), rel=1e-14)


def test_design_moments():
    rng = np.random.default_rng(6)
    n = 100_000
    x = sample_design_x(3, rng, size=n)
    assert x.min() >= -1 and x.max() <= 1
    assert np.all(np.abs(x.mean(axis=0)) <= 3 * math.sqrt(1 / (3 * n)))
    second = x.T @ x / n
    # E[X^2] = 1/3, Var[X^2] = 1/5 - 1/9; E[X1 X2] = 0, Var = 1/9
    for i in range(3):
        for j in range(3):
            if i == j:
                assert abs(second[i, j] - 1 / 3) <= 3 * math.sqrt((1 / 5 - 1 / 9) / n)
            else:
                assert abs(second[i, j]) <= 3 * math.sqrt(1 / 9 / n)
    assert sample_design_x(2, rng).shape == (2,)
    with pytest.raises(DomainError):
        sample_design_x(0, rng)


def test_score_zero_at_truth():
    beta_star = np.array([0.5, -0.3])
    data = synthetic(100_000)
    scores = PublicLikelihood(data, CFG).scores(beta_star)
    g = scores.mean(axis=0)
    se = scores.std(axis=0, ddof=1) / math.sqrt(len(data))
    assert np.linalg.norm(g) <= 5 * np.linalg.norm(se)


def test_concavity_probe():
    # sanity probe only: concavity is not guaranteed, so violations are reported, not fatal
    data = synthetic(2000)
    lik = PublicLikelihood(data, CFG)
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(50):
        a, b = rng.uniform(-10, 10, 2), rng.uniform(-10, 10, 2)
        if lik.loglik(0.5 * (a + b)) < min(lik.loglik(a), lik.loglik(b)) - 1e-12:
            bad += 1
    if bad:
        warnings.warn(f"midpoint concavity probe failed on {bad} of 50 segments")
    assert all(np.isfinite(lik.loglik(rng.uniform(-10, 10, 2))) for _ in range(20))
