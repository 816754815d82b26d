import math

import numpy as np
import pytest
from scipy import stats

from qrij.ald import ALParameters, loglik_contributions, mixture_constants
from qrij.data import DataError, RegressionData, engel_loglog
from qrij.gibbs import (NU_FLOOR, PosteriorDraws, PriorConfig, _draw_v, diagnostics, ess,
                        log_posterior, read_draws, run_sampler, split_rhat, write_draws)
from qrij.pointest import fit_check_loss

from oracles import al_data, metropolis


def test_gibbs_matches_metropolis_oracle():
    tau = 0.5
    data = al_data(20, tau, seed=31)
    prior = PriorConfig.fixed(1.0)
    mh = metropolis(data, tau, prior)
    mh_mean = mh.mean(axis=(0, 1))
    mh_sd = mh.reshape(-1, 2).std(axis=0, ddof=1)
    # independent chains give batch standard errors directly
    mh_se_mean = mh.mean(axis=1).std(axis=0, ddof=1) / math.sqrt(mh.shape[0])
    mh_se_sd = mh.std(axis=1, ddof=1).std(axis=0, ddof=1) / math.sqrt(mh.shape[0])

    draws = run_sampler(data, tau, prior, chains=4, warmup=1000, draws_per_chain=10_000, seed=3)
    g_mean = draws.beta.mean(axis=0)
    g_sd = draws.beta.std(axis=0, ddof=1)
    e = diagnostics(draws).ess
    g_se_mean = g_sd / np.sqrt(e)
    g_se_sd = g_sd / np.sqrt(2 * e)

    assert np.all(np.abs(g_mean - mh_mean) < 3 * np.hypot(g_se_mean, mh_se_mean))
    assert np.all(np.abs(g_sd - mh_sd) < 3 * np.hypot(g_se_sd, mh_se_sd))


@pytest.mark.parametrize("prior", [PriorConfig.fixed(0.7), PriorConfig.half_t3(2.5),
                                   PriorConfig.inverse_gamma()])
def test_loglik_rows_recompute_exactly(prior):
    data = al_data(30, 0.3, seed=2)
    draws = run_sampler(data, 0.3, prior, chains=2, warmup=100, draws_per_chain=100, seed=1)
    for s in (0, 57, draws.S - 1):
        params = ALParameters(draws.beta[s], draws.sigma[s], 0.3)
        np.testing.assert_array_equal(draws.loglik[s], loglik_contributions(data, params))
    if prior.estimates_sigma:
        assert np.unique(draws.sigma).size > 1
    else:
        assert np.all(draws.sigma == 0.7)


def test_seed_determinism_and_thread_independence(small_data):
    prior = PriorConfig.half_t3()
    a = run_sampler(small_data, 0.5, prior, chains=3, warmup=100, draws_per_chain=150, seed=9, threads=1)
    b = run_sampler(small_data, 0.5, prior, chains=3, warmup=100, draws_per_chain=150, seed=9, threads=3)
    for name in ("beta", "sigma", "loglik"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = run_sampler(small_data, 0.5, prior, chains=3, warmup=100, draws_per_chain=150, seed=10)
    assert not np.array_equal(a.beta, c.beta)


def test_informative_prior_is_recovered(small_data):
    mean = np.array([-3.0, 4.0])
    prior = PriorConfig.fixed(1.0, beta_mean=mean, beta_cov=1e-8 * np.eye(2))
    draws = run_sampler(small_data, 0.5, prior, chains=2, warmup=200, draws_per_chain=1000, seed=4)
    sd = draws.beta.std(axis=0, ddof=1)
    se = sd / np.sqrt(diagnostics(draws).ess)
    assert np.all(np.abs(draws.beta.mean(axis=0) - mean) < 3 * se + 1e-12)
    assert np.all(sd < 1e-3)


def test_highest_posterior_draw_near_check_loss_minimum():
    rng = np.random.default_rng(8)
    n = 250
    x = rng.normal(size=n)
    data = RegressionData(2 + 2 * x + rng.normal(size=n), np.column_stack([np.ones(n), x]))
    tau = 0.7
    prior = PriorConfig.fixed(0.2)
    draws = run_sampler(data, tau, prior, chains=2, warmup=300, draws_per_chain=1000, seed=5)
    best = draws.beta[np.argmax(log_posterior(draws, prior))]
    r = data.y - data.X @ best
    loss = np.sum(r * (tau - (r < 0)))
    assert loss <= 1.02 * fit_check_loss(data, tau).objective


def test_intercept_only_posterior_centres_on_median():
    rng = np.random.default_rng(1)
    y = rng.exponential(size=201)
    data = RegressionData(y, np.ones((201, 1)))
    gaps = []
    for sigma in (0.5, 0.05):
        d = run_sampler(data, 0.5, PriorConfig.fixed(sigma), chains=2, warmup=200,
                        draws_per_chain=2000, seed=2)
        gaps.append(abs(d.beta.mean() - np.median(y)))
    assert gaps[1] < gaps[0]
    assert gaps[1] < 0.05


def test_engel_posterior_right_skew_ordering():
    d = engel_loglog()
    draws = run_sampler(d, 0.75, PriorConfig.fixed(100.0), chains=4, warmup=500,
                        draws_per_chain=2000, seed=1)
    b0 = draws.beta[:, 0]
    kde = stats.gaussian_kde(b0)
    grid = np.linspace(np.quantile(b0, 0.01), np.quantile(b0, 0.99), 2000)
    mode = grid[np.argmax(kde(grid))]
    assert b0.mean() > np.median(b0) > mode


def test_sampler_argument_errors(small_data):
    with pytest.raises(ValueError):
        run_sampler(small_data, 0.5, warmup=50)
    with pytest.raises(ValueError):
        run_sampler(small_data, 0.5, chains=0)
    with pytest.raises(ValueError):
        run_sampler(small_data, 1.0)
    bad = RegressionData(np.arange(4.0), np.column_stack([np.ones(4), np.ones(4)]))
    with pytest.raises(DataError):
        run_sampler(bad, 0.5)
    with pytest.raises(ValueError):
        PriorConfig.fixed(0.0)
    with pytest.raises(ValueError):
        PriorConfig.inverse_gamma(0.0, 1.0)
    with pytest.raises(ValueError):
        PriorConfig(beta_mean=np.zeros(2))


def test_inverse_gaussian_step_matches_reference():
    tau, sigma = 0.3, 1.5
    th1, th2 = mixture_constants(tau)
    N = 200_000
    rng = np.random.default_rng(0)
    r = 0.8
    v = _draw_v(rng, np.full(N, r), sigma, th1, th2, N)
    lam = (th1**2 / th2**2 + 2) / sigma
    chi = r**2 / (th2**2 * sigma)
    mu = math.sqrt(lam / chi)
    # 1/v ~ inverse Gaussian(mean mu, shape lam); scipy's invgauss(m/l, scale=l)
    ks = stats.kstest(1.0 / v, stats.invgauss(mu / lam, scale=lam).cdf)
    assert ks.statistic < 1.628 / math.sqrt(N)
    ref = np.random.default_rng(1).wald(mu, lam, N)
    assert stats.ks_2samp(1.0 / v, ref).pvalue > 0.001


def test_zero_residual_draw_is_finite():
    th1, th2 = mixture_constants(0.5)
    v = _draw_v(np.random.default_rng(0), np.zeros(1000), 1.0, th1, th2, 1000)
    assert np.all(np.isfinite(v)) and np.all(v >= NU_FLOOR)
    # with r = 0 the conditional is Gamma(1/2, rate lam/2)
    lam = th1**2 / th2**2 + 2
    assert v.mean() == pytest.approx(1.0 / lam, rel=0.15)


def test_rhat_of_identical_chains_is_one():
    # split halves still differ by sampling noise, so use long chains
    x = np.random.default_rng(0).normal(size=20_000)
    assert split_rhat(np.vstack([x, x, x])) == pytest.approx(1.0, abs=1e-3)


def test_rhat_flags_separated_chains():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(size=500), rng.normal(size=500) + 3])
    assert split_rhat(x) > 1.5


def test_ess_white_noise():
    x = np.random.default_rng(3).normal(size=(4, 2500))
    assert ess(x) == pytest.approx(x.size, rel=0.2)


def test_ess_ar1():
    rng = np.random.default_rng(4)
    phi, C, D = 0.9, 4, 20_000
    x = np.empty((C, D))
    x[:, 0] = rng.normal(size=C) / math.sqrt(1 - phi**2)
    e = rng.normal(size=(C, D))
    for t in range(1, D):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    assert ess(x) == pytest.approx(C * D * (1 - phi) / (1 + phi), rel=0.25)


def test_single_chain_diagnostics(small_data):
    draws = run_sampler(small_data, 0.5, chains=1, warmup=100, draws_per_chain=400, seed=0)
    diag = diagnostics(draws)
    assert diag.rhat is None
    assert np.all((diag.ess > 0) & (diag.ess <= draws.S * math.log10(draws.S)))


def test_multi_chain_diagnostics_converged(small_data):
    draws = run_sampler(small_data, 0.5, chains=4, warmup=200, draws_per_chain=500, seed=0)
    diag = diagnostics(draws)
    assert np.all(diag.rhat < 1.05)
    assert np.all(diag.rhat >= 1 - 1e-3)


def test_draw_dump_round_trip(tmp_path, small_data):
    draws = run_sampler(small_data, 0.4, PriorConfig.half_t3(), chains=2, warmup=100,
                        draws_per_chain=100, seed=6)
    path = tmp_path / "draws.csv"
    write_draws(draws, path)
    header = path.read_text().splitlines()[0]
    assert header == "chain,iteration,x0,x1,sigma"
    chain, beta, sigma = read_draws(path)
    np.testing.assert_array_equal(beta, draws.beta)
    np.testing.assert_array_equal(sigma, draws.sigma)
    np.testing.assert_array_equal(chain, np.repeat([0, 1], 100))


def test_posterior_draws_validation():
    with pytest.raises(ValueError):
        PosteriorDraws(np.zeros((4, 1)), -1.0, np.zeros((4, 3)), 0.5)
    with pytest.raises(ValueError):
        PosteriorDraws(np.zeros((4, 1)), 1.0, np.zeros((3, 3)), 0.5)
    with pytest.raises(ValueError):
        PosteriorDraws(np.zeros((5, 1)), 1.0, np.zeros((5, 3)), 0.5, chains=2)
    d = PosteriorDraws(np.zeros((4, 1)), 1.0, np.zeros((4, 3)), 0.5, chains=2)
    with pytest.raises(ValueError):
        d.beta[0, 0] = 1.0
    assert d.by_chain().shape == (2, 2, 1)
