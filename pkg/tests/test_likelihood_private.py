import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onebit_qmle.errors import CapabilityError, ConfigurationError, DataError, DomainError
from onebit_qmle.likelihood_private import (
    PHI_SHRINK,
    FinitePrior,
    PhiModel,
    PrivateData,
    PrivateLikelihood,
    PrivateObservation,
    RademacherPrior,
    grad_loglik_private,
    hess_loglik_private,
    loglik_private,
    phat_zx,
    phi,
    phi_d1,
    phi_d2,
    qzx_prob,
)
from onebit_qmle.mechanisms import PrivacyBudget, TruncationInterval
from onebit_qmle.quantile_model import PsiConfig, QuantileModel, psi_all

from oracles import central_gradient, central_jacobian, phi_enumeration, rel_err

LN3 = PrivacyBudget(math.log(3))
MODEL = QuantileModel(0.3, 1.0)
INTERVAL = TruncationInterval(-2, 4)


def cfg_for(eps_prime, model=MODEL, interval=INTERVAL):
    return PsiConfig(model, interval, PrivacyBudget(eps_prime))


def all_patterns(k):
    return [np.array(p) for p in itertools.product((-1, 1), repeat=k)]


def test_private_data_validation():
    with pytest.raises(DataError):
        PrivateData([[1, 0]], [1])
    with pytest.raises(DataError):
        PrivateData([[1, -1]], [2])
    data = PrivateData.from_observations([PrivateObservation(np.array([1, -1]), 0)] * 3)
    assert data.dim == 2 and len(data) == 3
    with pytest.raises(ConfigurationError):
        FinitePrior([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(DomainError):
        FinitePrior([[2.0]], [1.0])


def test_qzx_examples():
    for k in (1, 3, 5):
        for zx in all_patterns(k)[:4]:
            assert qzx_prob(zx, np.zeros(k), LN3) == pytest.approx(2.0**-k, rel=1e-15)
    assert qzx_prob([1, 1], [1.0, 1.0], LN3) == pytest.approx(0.5625, rel=1e-15)
    with pytest.raises(DomainError):
        qzx_prob([1], [1.5], LN3)
    with pytest.raises(ConfigurationError):
        qzx_prob([1, 1], [0.5], LN3)


def test_qzx_sums_to_one():
    rng = np.random.default_rng(0)
    for k in range(1, 11):
        x = rng.uniform(-1, 1, k)
        budget = PrivacyBudget(rng.uniform(0.1, 5))
        total = math.fsum(qzx_prob(zx, x, budget) for zx in all_patterns(k))
        assert abs(total - 1.0) <= 1e-12


def test_phat_rademacher_and_bounds():
    c = LN3.c_epsilon()
    assert 0.5 * (0.5 + 1 / (2 * c)) + 0.5 * (0.5 - 1 / (2 * c)) == pytest.approx(0.5)
    for k in range(1, 11):
        prior = RademacherPrior(k)
        for eps in (0.3, 1.0, 4.0):
            b = PrivacyBudget(eps)
            lo = (1 / (math.exp(eps) + 1)) ** k
            hi = (math.exp(eps) / (math.exp(eps) + 1)) ** k
            for zx in all_patterns(k)[:: max(1, 2**k // 16)]:
                p = phat_zx(zx, prior, b)
                assert p == pytest.approx(2.0**-k, rel=1e-12)
                assert lo <= p <= hi


def test_phat_general_prior_bounds():
    prior = FinitePrior([[0.9, -0.2], [-0.5, 0.1], [0.0, 1.0]], [0.2, 0.5, 0.3])
    eps = 2.0
    lo, hi = (1 / (math.exp(eps) + 1)) ** 2, (math.exp(eps) / (math.exp(eps) + 1)) ** 2
    ps = [phat_zx(zx, prior, PrivacyBudget(eps)) for zx in all_patterns(2)]
    assert math.fsum(ps) == pytest.approx(1.0, abs=1e-14)
    assert all(lo <= p <= hi for p in ps)


def test_phi_d1_beta_zero():
    c = cfg_for(0.8)
    p0, p1, _ = psi_all(0.0, c)
    for zx in ([1], [-1]):
        assert phi([0.0], zx, c) == pytest.approx(p0 * PHI_SHRINK, rel=1e-15)
        # posterior mean of x given zx is +-1/C under the Rademacher prior
        post_mean = zx[0] / c.budget.c_epsilon()
        assert phi_d1([0.0], zx, c)[0] == pytest.approx(p1 * post_mean * PHI_SHRINK, rel=1e-13)


def test_phi_matches_enumeration_oracle():
    rng = np.random.default_rng(1)
    for d in range(1, 7):
        eps_prime = rng.uniform(0.2, 3)
        c = cfg_for(eps_prime)
        beta = rng.uniform(-3, 3, d)
        psi_fn = lambda t: tuple(float(v) for v in psi_all(t, c))
        for zx in all_patterns(d)[:: max(1, 2**d // 8)]:
            v, g, h = phi_enumeration(beta, zx, psi_fn, eps_prime)
            assert abs(phi(beta, zx, c) - v) <= 1e-12
            assert np.max(np.abs(phi_d1(beta, zx, c) - g)) <= 1e-12
            assert np.max(np.abs(phi_d2(beta, zx, c) - h)) <= 1e-12


def test_phi_finite_differences():
    rng = np.random.default_rng(2)
    for d in (1, 2, 4):
        c = cfg_for(1.3)
        beta = rng.uniform(-2, 2, d)
        zx = rng.choice([-1, 1], d)
        g = phi_d1(beta, zx, c)
        assert rel_err(g, central_gradient(lambda b: phi(b, zx, c), beta, 1e-5)) <= 1e-6
        h = phi_d2(beta, zx, c)
        assert np.max(np.abs(h - h.T)) <= 1e-12
        assert rel_err(h, central_jacobian(lambda b: phi_d1(b, zx, c), beta, 1e-5)) <= 1e-5


@pytest.mark.parametrize("eps", [1.0, 5.0, 25.0])
def test_phi_lemma4_bounds(eps):
    rng = np.random.default_rng(3)
    for d in (1, 3, 6):
        eps_prime = eps / (d + 1)
        c = cfg_for(eps_prime)
        zx = np.array(all_patterns(d))
        lo, hi = 1 / (math.exp(eps_prime) + 1), math.exp(eps_prime) / (math.exp(eps_prime) + 1)
        model = PhiModel(c)
        for beta in rng.uniform(-10, 10, (20, d)):
            v = model.evaluate(beta, zx, order=0)[0] / PHI_SHRINK
            assert np.all(v >= lo - 1e-15) and np.all(v <= hi + 1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 5), st.floats(0.2, 3), st.floats(0.1, 10))
def test_phi_monotone_in_beta_d1_symmetric(eps_prime, sigma, half_width):
    # symmetric noise and interval make psi' even, so the +1 atom always dominates
    c = cfg_for(eps_prime, QuantileModel(0.5, sigma), TruncationInterval(-half_width, half_width))
    vals = [phi([b], [1], c) for b in np.linspace(-10, 10, 201)]
    assert np.all(np.diff(vals) >= -1e-15)


def test_phi_not_monotone_in_general():
    # Phi(b, +1) = w+ psi(b) + w- psi(-b): with asymmetric tails psi'(-b) can beat
    # psi'(b) by more than the weight ratio, so monotonicity is not automatic
    c = cfg_for(0.7)
    assert phi([10.0], [1], c) < phi([6.0], [1], c)
    assert phi([1.0], [1], c) > phi([0.0], [1], c)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.floats(0.1, 5), st.integers(0, 2**32 - 1))
def test_cache_does_not_change_results(d, eps, seed):
    rng = np.random.default_rng(seed)
    data = PrivateData(rng.choice([-1, 1], (300, d)), rng.integers(0, 2, 300))
    c = cfg_for(eps)
    beta = rng.uniform(-3, 3, d)
    a = PrivateLikelihood(data, c, use_cache=True)
    b = PrivateLikelihood(data, c, use_cache=False)
    assert a.loglik(beta) == b.loglik(beta)
    assert np.array_equal(a.grad(beta), b.grad(beta))
    assert np.array_equal(a.terms(beta), b.terms(beta))


def test_loglik_single_observation():
    c = cfg_for(0.9)
    beta = np.array([0.4, -1.1])
    zx = np.array([1, -1])
    v = phi(beta, zx, c)
    assert loglik_private(beta, PrivateData([zx], [1]), c) == pytest.approx(math.log(v), rel=1e-15)
    assert loglik_private(beta, PrivateData([zx], [0]), c) == pytest.approx(math.log1p(-v), rel=1e-13)
    with pytest.raises(DataError):
        PrivateLikelihood(PrivateData(np.zeros((0, 2), dtype=int), np.zeros(0, dtype=int)), c)


def test_loglik_gradient_hessian_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(10):
        d = int(rng.integers(1, 5))
        c = cfg_for(rng.uniform(0.3, 3), QuantileModel(rng.uniform(0.1, 0.9), rng.uniform(0.5, 2)))
        data = PrivateData(rng.choice([-1, 1], (200, d)), rng.integers(0, 2, 200))
        beta = rng.uniform(-3, 3, d)
        lik = PrivateLikelihood(data, c)
        g = lik.grad(beta)
        assert rel_err(g, central_gradient(lik.loglik, beta, 1e-5)) <= 1e-5
        h = lik.hess(beta)
        assert np.array_equal(h, h.T)
        assert rel_err(h, central_jacobian(lik.grad, beta, 1e-5)) <= 1e-4
        value, g2 = lik.value_and_grad(beta)
        assert value == lik.loglik(beta) and np.allclose(g, g2, rtol=1e-14, atol=0)
    assert np.array_equal(grad_loglik_private(beta, data, c), lik.grad(beta))
    assert np.array_equal(hess_loglik_private(beta, data, c), lik.hess(beta))


def test_phi_monte_carlo():
    # simulate the private protocol directly: Rademacher x, ALD y, truncate, flip both
    rng = np.random.default_rng(5)
    n = 1_000_000
    eps_prime = 1.0
    c = cfg_for(eps_prime)
    beta = np.array([1.2, -0.7])
    x = rng.choice([-1.0, 1.0], (n, 2))
    loc = x @ beta
    a, s = MODEL.alpha, MODEL.sigma
    u = rng.random(n)
    y = np.where(u < a, loc + s / (1 - a) * np.log(u / a), loc - s / a * np.log((1 - u) / (1 - a)))
    y = np.clip(y, INTERVAL.lower, INTERVAL.upper)
    cc = (math.exp(eps_prime) + 1) / (math.exp(eps_prime) - 1)
    zy = rng.random(n) < 0.5 + (y - INTERVAL.midpoint) / (INTERVAL.width * cc)
    zx = np.where(rng.random((n, 2)) < 0.5 + x / (2 * cc), 1, -1)
    for pattern in all_patterns(2):
        sel = np.all(zx == pattern, axis=1)
        m = sel.sum()
        target = phi(beta, pattern, c) / PHI_SHRINK
        assert abs(zy[sel].mean() - target) <= 4 * math.sqrt(target * (1 - target) / m)


def test_score_zero_at_truth_rademacher_design():
    rng = np.random.default_rng(10)
    n = 100_000
    beta_star = np.array([0.8, -0.5])
    eps_prime = 1.5
    c = cfg_for(eps_prime)
    x = rng.choice([-1.0, 1.0], (n, 2))
    a, s = MODEL.alpha, MODEL.sigma
    u = rng.random(n)
    loc = x @ beta_star
    y = np.clip(np.where(u < a, loc + s / (1 - a) * np.log(u / a), loc - s / a * np.log((1 - u) / (1 - a))),
                INTERVAL.lower, INTERVAL.upper)
    cc = PrivacyBudget(eps_prime).c_epsilon()
    zy = (rng.random(n) < 0.5 + (y - INTERVAL.midpoint) / (INTERVAL.width * cc)).astype(int)
    zx = np.where(rng.random((n, 2)) < 0.5 + x / (2 * cc), 1, -1)
    scores = PrivateLikelihood(PrivateData(zx, zy), c).scores(beta_star)
    g = scores.mean(axis=0)
    se = scores.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.linalg.norm(g) <= 5 * np.linalg.norm(se)


def test_enumeration_cap():
    c = cfg_for(0.5)
    with pytest.raises(CapabilityError):
        phi(np.zeros(21), np.ones(21, dtype=int), c)
    with pytest.raises(CapabilityError):
        RademacherPrior(21)
