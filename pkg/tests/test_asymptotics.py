import math

import numpy as np
import pytest

from onebit_qmle.asymptotics import (
    efficiency_ratio,
    fisher_correct_model,
    fisher_nonprivate,
    outer_product_mean,
    sandwich,
    sandwich_from_matrices,
    uniform_design,
)
from onebit_qmle.errors import DomainError, SingularMatrixError
from onebit_qmle.estimator import fit_public
from onebit_qmle.likelihood_public import PublicLikelihood
from onebit_qmle.mechanisms import PrivacyBudget, TruncationInterval
from onebit_qmle.protocol import ProtocolConfig, SyntheticSource, run_protocol_public
from onebit_qmle.quantile_model import PsiConfig, QuantileModel, psi_all

MODEL = QuantileModel(0.3, 1.0)
INTERVAL = TruncationInterval(-2, 4)
CFG = PsiConfig(MODEL, INTERVAL, PrivacyBudget(2.5))


def public_data(beta_star, n, seed):
    pc = ProtocolConfig(n, PrivacyBudget(2.5), INTERVAL, MODEL, seed=seed)
    return run_protocol_public(SyntheticSource(beta_star, MODEL), pc).data


def test_fisher_nonprivate_examples():
    assert np.allclose(fisher_nonprivate(MODEL, np.eye(2) / 3), 0.07 * np.eye(2), rtol=1e-14, atol=0)
    alphas = np.linspace(0.05, 0.95, 19)
    factors = [fisher_nonprivate(QuantileModel(a, 1.0), [[1.0]])[0, 0] for a in alphas]
    assert alphas[int(np.argmax(factors))] == pytest.approx(0.5)
    one = fisher_nonprivate(QuantileModel(0.3, 1.0), [[1.0]])
    assert fisher_nonprivate(QuantileModel(0.3, 2.0), [[1.0]]) == pytest.approx(one / 4)


def test_fisher_beta_zero_factorization():
    p, p1, _ = psi_all(0.0, CFG)
    scalar = p1**2 / (p * (1 - p))
    info, se = fisher_correct_model(np.zeros(3), uniform_design(3), CFG, n_draws=200_000,
                                    rng=np.random.default_rng(0), return_se=True)
    target = scalar / 3 * np.eye(3)
    assert np.all(np.abs(info - target) <= 4 * se + 1e-18)
    assert np.max(np.abs(info - info.T)) <= 1e-12


def test_fisher_exact_design_matrix():
    x = np.array([[1.0, 0.5], [-0.2, 0.3], [0.9, -1.0]])
    beta = np.array([0.4, -0.8])
    info = fisher_correct_model(beta, x, CFG)
    p, p1, _ = psi_all(x @ beta, CFG)
    w = p1**2 / (p * (1 - p))
    ref = sum(wi * np.outer(xi, xi) for wi, xi in zip(w, x)) / 3
    assert np.allclose(info, ref, rtol=1e-14, atol=0)
    assert np.all(np.linalg.eigvalsh(info) >= 0)


def test_b_matrix_naive_oracle_and_permutation():
    data = public_data([0.5, -0.3], 2000, 1)
    lik = PublicLikelihood(data, CFG)
    beta = np.array([0.45, -0.2])
    est = sandwich(beta, lik)
    s = lik.scores(beta)
    naive = np.zeros((2, 2))
    for row in s:
        naive += np.outer(row, row)
    naive /= len(s)
    assert np.max(np.abs(est.b_matrix - naive)) <= 1e-10
    perm = np.random.default_rng(2).permutation(len(data))
    est2 = sandwich(beta, PublicLikelihood(data.take(perm), CFG))
    assert np.allclose(est2.covariance, est.covariance, rtol=1e-10, atol=0)
    assert np.allclose(est2.a_matrix, est.a_matrix, rtol=1e-12, atol=0)
    assert np.max(np.abs(est.covariance - est.covariance.T)) <= 1e-10
    eig = np.linalg.eigvalsh(est.b_matrix)
    assert eig.min() >= -1e-10 * np.trace(est.b_matrix)
    a_inv = np.linalg.inv(est.a_matrix)
    assert np.allclose(est.covariance, a_inv @ est.b_matrix @ a_inv, rtol=1e-10)
    assert np.allclose(est.standard_errors() ** 2, np.diag(est.covariance) / len(data))


def test_singular_hessian_error():
    a = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]])
    with pytest.raises(SingularMatrixError) as info:
        sandwich_from_matrices(a, np.eye(2), 10)
    assert info.value.condition_number > 1e12
    with pytest.raises(DomainError):
        sandwich(np.zeros(2), PublicLikelihood(public_data([0.5, -0.3], 2, 3), CFG))


def test_outer_product_mean_shapes():
    s = np.arange(12.0).reshape(4, 3)
    assert np.allclose(outer_product_mean(s), s.T @ s / 4)


def test_efficiency_ratio_examples():
    m = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert efficiency_ratio(m, m) == 1.0
    q = np.linalg.qr(np.random.default_rng(4).normal(size=(2, 2)))[0]
    other = np.diag([0.5, 4.0])
    assert efficiency_ratio(q @ m @ q.T, q @ other @ q.T) == pytest.approx(efficiency_ratio(m, other), rel=1e-12)
    with pytest.raises(DomainError):
        efficiency_ratio(np.zeros((2, 2)), m)


def test_efficiency_ratio_grows_as_epsilon_falls():
    w = INTERVAL.width
    model = QuantileModel(0.3, 1e-3 * w)
    nonpriv = fisher_nonprivate(model, [[1 / 3]])
    ratios = []
    for eps in (4.0, 2.0, 1.0, 0.5):
        cfg = PsiConfig(model, INTERVAL, PrivacyBudget(eps))
        x = np.linspace(-1, 1, 20001)[:, None]
        ratios.append(efficiency_ratio(fisher_correct_model([0.0], x, cfg), nonpriv))
    assert all(b > a for a, b in zip(ratios, ratios[1:]))


def test_sandwich_matches_inverse_fisher_d1():
    beta_star = np.array([0.7])
    data = public_data(beta_star, 100_000, 5)
    fit = fit_public(data, CFG)
    est = sandwich(fit.beta_hat, PublicLikelihood(data, CFG))
    info = fisher_correct_model(beta_star, np.linspace(-1, 1, 20001)[:, None], CFG)
    assert est.covariance[0, 0] == pytest.approx(1 / info[0, 0], rel=0.10)


def test_information_matrix_consistency_d2():
    beta_star = np.array([0.5, -0.3])
    data = public_data(beta_star, 100_000, 6)
    lik = PublicLikelihood(data, CFG)
    g = np.linspace(-1, 1, 401)
    grid = np.array([[a, b] for a in g for b in g])
    info = fisher_correct_model(beta_star, grid, CFG)
    a_hat = lik.hess(beta_star)
    assert np.linalg.norm(a_hat + info) / np.linalg.norm(info) <= 0.1
    fit = fit_public(data, CFG)
    c_inv = np.linalg.inv(sandwich(fit.beta_hat, lik).covariance)
    assert np.linalg.norm(c_inv - info) / np.linalg.norm(info) <= 0.15
    assert math.isfinite(fit.loglik_value)
