import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from qrij.ald import (ALParameters, _al_cdf, _al_ppf, al_log_density, al_log_likelihood,
                      as_tau, check_loss, loglik_contributions, mixture_constants)
from qrij.data import RegressionData

taus = st.floats(0.01, 0.99)
reals = st.floats(-1e3, 1e3, allow_nan=False)


def test_check_loss_examples():
    assert check_loss(2.0, 0.5) == 1.0
    assert check_loss(-1.0, 0.9) == pytest.approx(0.1)
    for tau in (0.1, 0.5, 0.9):
        assert check_loss(0.0, tau) == 0.0


def test_check_loss_rejects_bad_input():
    with pytest.raises(ValueError):
        check_loss(np.nan, 0.5)
    with pytest.raises(ValueError):
        check_loss(np.inf, 0.5)
    for tau in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            as_tau(tau)


@given(reals, reals, st.floats(0, 1), taus)
def test_check_loss_convex(u, v, lam, tau):
    lhs = check_loss(lam * u + (1 - lam) * v, tau)
    rhs = lam * check_loss(u, tau) + (1 - lam) * check_loss(v, tau)
    assert lhs <= rhs + 1e-9 * (1 + abs(rhs))


@given(reals, st.floats(1e-3, 1e3), taus)
def test_check_loss_positively_homogeneous(u, c, tau):
    assert check_loss(c * u, tau) == pytest.approx(c * check_loss(u, tau), rel=1e-12, abs=1e-12)


@given(reals, taus)
def test_check_loss_nonnegative_zero_only_at_zero(u, tau):
    val = check_loss(u, tau)
    assert val >= 0
    assert (val == 0) == (u == 0)


def test_al_log_density_examples():
    assert al_log_density(3.0, 3.0, 1.0, 0.5) == pytest.approx(math.log(0.25))
    assert al_log_density(2.0, 0.0, 1.0, 0.5) == pytest.approx(math.log(0.25) - 1.0)
    with pytest.raises(ValueError):
        al_log_density(0.0, 0.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        al_log_density(0.0, 0.0, -1.0, 0.5)


@pytest.mark.parametrize("tau", [0.1, 0.3, 0.5, 0.75, 0.9])
@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (2.5, 0.3), (-1.0, 4.0)])
def test_al_density_integrates_to_one_and_has_quantile_mu(tau, mu, sigma):
    f = lambda y: math.exp(al_log_density(y, mu, sigma, tau))
    # tails decay at rates tau and 1 - tau, so widen the range accordingly
    half = 50 * sigma / min(tau, 1 - tau)
    lo, hi = mu - half, mu + half
    left, _ = integrate.quad(f, lo, mu, epsabs=1e-13, epsrel=1e-13, limit=200)
    right, _ = integrate.quad(f, mu, hi, epsabs=1e-13, epsrel=1e-13, limit=200)
    assert left + right == pytest.approx(1.0, abs=1e-8)
    # the tau-quantile is the location parameter
    assert left == pytest.approx(tau, abs=1e-8)
    # closed-form cdf used by the tests agrees with quadrature
    assert _al_cdf(mu, mu, sigma, tau) == pytest.approx(tau, abs=1e-12)
    y1 = mu + 0.7 * sigma
    mid, _ = integrate.quad(f, mu, y1, epsabs=1e-13)
    assert _al_cdf(y1, mu, sigma, tau) == pytest.approx(tau + mid, abs=1e-10)


@given(st.floats(-20, 20), taus)
def test_al_density_mode_at_mu(delta, tau):
    assert al_log_density(delta, 0.0, 1.0, tau) <= al_log_density(0.0, 0.0, 1.0, tau)


def test_al_log_density_no_underflow():
    val = al_log_density(1e6, 0.0, 1e-3, 0.5)
    assert np.isfinite(val) and val < -1e8


def test_al_parameters_validation():
    with pytest.raises(ValueError):
        ALParameters([1.0], 0.0, 0.5)
    with pytest.raises(ValueError):
        ALParameters([1.0], 1.0, 1.0)
    with pytest.raises(ValueError):
        ALParameters([], 1.0, 0.5)


def test_loglik_contributions_examples():
    d = RegressionData([1.0], [[1.0]])
    out = loglik_contributions(d, ALParameters([1.0], 1.0, 0.5))
    np.testing.assert_allclose(out, [math.log(0.25)])
    with pytest.raises(ValueError):
        loglik_contributions(d, ALParameters([1.0, 2.0], 1.0, 0.5))


def test_loglik_contributions_match_scalar_loop():
    rng = np.random.default_rng(7)
    n, p = 9, 3
    X = rng.normal(size=(n, p))
    y = rng.normal(size=n)
    params = ALParameters(rng.normal(size=p), 0.7, 0.3)
    d = RegressionData(y, X)
    vec = loglik_contributions(d, params)
    # plain scalar routine, independent of the vectorized code path
    loop = []
    for i in range(n):
        mu = sum(X[i, j] * params.beta[j] for j in range(p))
        u = (y[i] - mu) / params.sigma
        rho = u * (params.tau - (1.0 if u < 0 else 0.0))
        loop.append(math.log(params.tau * (1 - params.tau) / params.sigma) - rho)
    np.testing.assert_allclose(vec, loop, rtol=1e-13, atol=1e-13)
    assert al_log_likelihood(d, params) == pytest.approx(vec.sum(), rel=1e-14)


def test_mixture_constants_examples():
    c = mixture_constants(0.5)
    assert c.theta1 == 0.0
    assert c.theta2 == pytest.approx(math.sqrt(8.0))
    c = mixture_constants(0.1)
    assert c.theta1 == pytest.approx(0.8 / 0.09)
    assert c.theta2 ** 2 == pytest.approx(2 / 0.09)


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.8])
def test_mixture_reproduces_al_distribution(tau):
    rng = np.random.default_rng(12345)
    N = 10**6
    sigma = 1.7
    th1, th2 = mixture_constants(tau)
    nu = rng.exponential(size=N)
    z = rng.standard_normal(N)
    eps = sigma * (th1 * nu + th2 * z * np.sqrt(nu))
    ks = stats.kstest(eps, lambda y: _al_cdf(y, 0.0, sigma, tau))
    # 1% critical value of the KS statistic
    assert ks.statistic < 1.628 / math.sqrt(N)
    qs = np.array([0.05, 0.25, 0.5, 0.75, 0.95])
    emp = np.quantile(eps, qs)
    ana = _al_ppf(qs, 0.0, sigma, tau)
    # sampling sd of an empirical quantile: sqrt(q(1-q)/N)/f(x_q)
    dens = np.exp(al_log_density(ana, 0.0, sigma, tau))
    sd = np.sqrt(qs * (1 - qs) / N) / dens
    assert np.all(np.abs(emp - ana) < 5 * sd)
