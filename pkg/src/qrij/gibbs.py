"""Gibbs sampler for AL-likelihood Bayesian quantile regression.

The AL error is written as a normal scale mixture. With v_i = sigma * nu_i,

    y_i = x_i'beta + theta1 v_i + theta2 sqrt(sigma v_i) z_i,  v_i ~ Exp(mean sigma),

and each sweep draws

    beta | v, sigma        multivariate normal (weighted least squares form)
    sigma | beta           with v integrated out: inverse gamma under an IG
                           prior, a slice step on log(sigma) under half-t(3)
    v_i | beta, sigma      GIG(1/2, r_i^2/(theta2^2 sigma), (theta1^2/theta2^2 + 2)/sigma),
                           sampled through 1/v_i ~ inverse Gaussian.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .ald import _loglik_from_resid, as_tau, check_loss, mixture_constants
from .data import DataError, RegressionData
from .rng import stream

FLAT_PRIOR_VARIANCE = 1e6
NU_FLOOR = 1e-12


@dataclass(frozen=True)
class PriorConfig:
    """Prior for (beta, sigma).

    beta: ``beta_mean``/``beta_cov`` for a normal prior; both None means the
    flat prior, approximated by N(0, 1e6 I).
    sigma: ``sigma_mode`` is one of

    - ``"fixed"``: sigma held at ``sigma_value``
    - ``"half_t3"``: half Student-t with 3 df and scale ``sigma_scale``
    - ``"inverse_gamma"``: IG(``ig_shape``, ``ig_rate``)
    """

    sigma_mode: str = "fixed"
    sigma_value: float = 1.0
    sigma_scale: float = 2.5
    ig_shape: float = 0.01
    ig_rate: float = 0.01
    beta_mean: np.ndarray | None = None
    beta_cov: np.ndarray | None = None

    def __post_init__(self):
        if self.sigma_mode not in ("fixed", "half_t3", "inverse_gamma"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.sigma_mode == "fixed" and not self.sigma_value > 0:
            raise ValueError("fixed sigma must be positive")
        if self.sigma_mode == "half_t3" and not self.sigma_scale > 0:
            raise ValueError("half-t scale must be positive")
        if self.sigma_mode == "inverse_gamma" and not (self.ig_shape > 0 and self.ig_rate > 0):
            raise ValueError("inverse-gamma shape and rate must be positive")
        if (self.beta_mean is None) != (self.beta_cov is None):
            raise ValueError("give both beta_mean and beta_cov, or neither")

    @classmethod
    def fixed(cls, sigma: float, **kw) -> PriorConfig:
        return cls(sigma_mode="fixed", sigma_value=float(sigma), **kw)

    @classmethod
    def half_t3(cls, scale: float = 2.5, **kw) -> PriorConfig:
        return cls(sigma_mode="half_t3", sigma_scale=float(scale), **kw)

    @classmethod
    def inverse_gamma(cls, shape: float = 0.01, rate: float = 0.01, **kw) -> PriorConfig:
        return cls(sigma_mode="inverse_gamma", ig_shape=float(shape), ig_rate=float(rate), **kw)

    @property
    def estimates_sigma(self) -> bool:
        return self.sigma_mode != "fixed"

    def beta_precision(self, p: int) -> tuple[np.ndarray, np.ndarray]:
        """Prior precision matrix and precision-weighted mean."""
        if self.beta_cov is None:
            return np.eye(p) / FLAT_PRIOR_VARIANCE, np.zeros(p)
        cov = np.atleast_2d(np.asarray(self.beta_cov, dtype=float))
        mean = np.atleast_1d(np.asarray(self.beta_mean, dtype=float))
        if cov.shape != (p, p) or mean.shape != (p,):
            raise ValueError(f"beta prior must have dimension {p}")
        prec = np.linalg.inv(cov)
        return prec, prec @ mean

    def log_prior(self, beta, sigma) -> np.ndarray:
        """Log prior density (up to a constant), vectorized over draws."""
        beta = np.atleast_2d(beta)
        if self.beta_cov is None:
            lp = -0.5 * np.sum(beta**2, axis=1) / FLAT_PRIOR_VARIANCE
        else:
            prec, _ = self.beta_precision(beta.shape[1])
            d = beta - np.asarray(self.beta_mean, dtype=float)
            lp = -0.5 * np.einsum("ij,jk,ik->i", d, prec, d)
        sigma = np.asarray(sigma, dtype=float)
        if self.sigma_mode == "half_t3":
            lp = lp - 2.0 * np.log1p((sigma / self.sigma_scale) ** 2 / 3.0)
        elif self.sigma_mode == "inverse_gamma":
            lp = lp - (self.ig_shape + 1.0) * np.log(sigma) - self.ig_rate / sigma
        return lp


@dataclass(frozen=True)
class PosteriorDraws:
    """Post-warmup draws, chain-major: rows ``c*D:(c+1)*D`` belong to chain c."""

    beta: np.ndarray
    sigma: np.ndarray
    loglik: np.ndarray
    tau: float
    chains: int = 1
    warmup: int = 0
    seed: int | None = None
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if beta.shape[0] == 1 and np.ndim(self.beta) == 1:
            beta = beta.T
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (beta.shape[0],)).copy()
        loglik = np.asarray(self.loglik, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("sigma draws must be positive")
        if loglik.ndim != 2 or loglik.shape[0] != beta.shape[0]:
            raise ValueError("loglik must be an S x n matrix matching the draws")
        if beta.shape[0] % self.chains:
            raise ValueError("number of draws is not a multiple of the chain count")
        for name, val in (("beta", beta), ("sigma", sigma), ("loglik", loglik)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def S(self) -> int:
        return self.beta.shape[0]

    @property
    def draws_per_chain(self) -> int:
        return self.S // self.chains

    def by_chain(self, values=None) -> np.ndarray:
        """Reshape (S, k) values, default beta, to (chains, draws_per_chain, k)."""
        v = self.beta if values is None else np.asarray(values)
        return v.reshape(self.chains, self.draws_per_chain, *v.shape[1:])


@dataclass(frozen=True)
class ChainDiagnostics:
    rhat: np.ndarray | None
    ess: np.ndarray


def _slice_log_sigma(rng, eta, logf, width=1.0, max_steps=50):
    """One univariate slice-sampling update (stepping out, shrinkage)."""
    log_y = logf(eta) + math.log(rng.random())
    left = eta - width * rng.random()
    right = left + width
    j = int(max_steps * rng.random())
    k = max_steps - 1 - j
    while j > 0 and logf(left) > log_y:
        left -= width
        j -= 1
    while k > 0 and logf(right) > log_y:
        right += width
        k -= 1
    while True:
        prop = left + (right - left) * rng.random()
        if logf(prop) > log_y:
            return prop
        if prop < eta:
            left = prop
        else:
            right = prop


def _draw_v(rng, resid, sigma, th1, th2, n):
    """v_i | beta, sigma via the Michael-Schucany-Haas inverse-Gaussian transform.

    w = 1/v ~ IG(mean mu, shape lam) with mu = sqrt(psi/chi), lam = psi. Written
    in terms of 1/mu so a zero residual (mu = inf) is handled without overflow.
    """
    lam = (th1 * th1 / (th2 * th2) + 2.0) / sigma
    chi = resid * resid / (th2 * th2 * sigma)
    inv_mu = np.sqrt(chi / lam)
    y = rng.standard_normal(n)
    y = np.maximum(y * y, 1e-300)
    u = rng.random(n)
    s = np.sqrt(y * y + 4.0 * lam * y * inv_mu)
    x = 4.0 * lam * y / (y + s) ** 2
    small = u * (1.0 + x * inv_mu) <= 1.0
    v = np.where(small, 1.0 / x, x * inv_mu * inv_mu)
    return np.maximum(v, NU_FLOOR * sigma)


def _run_chain(data, tau, prior, warmup, draws, rng, init_beta, init_sigma):
    X, y = data.X, data.y
    n, p = X.shape
    th1, th2 = mixture_constants(tau)
    P0, b0 = prior.beta_precision(p)
    mode = prior.sigma_mode

    beta = init_beta.copy()
    sigma = init_sigma
    resid = y - X @ beta
    v = _draw_v(rng, resid, sigma, th1, th2, n)

    out_beta = np.empty((draws, p))
    out_sigma = np.empty(draws)
    out_ll = np.empty((draws, n))
    for it in range(warmup + draws):
        # beta | v, sigma
        w = 1.0 / (th2 * th2 * sigma * v)
        Xw = X * w[:, None]
        prec = X.T @ Xw + P0
        rhs = Xw.T @ (y - th1 * v) + b0
        L = np.linalg.cholesky(prec)
        mean = solve_triangular(L.T, solve_triangular(L, rhs, lower=True), lower=False)
        beta = mean + solve_triangular(L.T, rng.standard_normal(p), lower=False)
        resid = y - X @ beta

        # sigma | beta, with v integrated out
        if mode == "inverse_gamma":
            Q = float(np.sum(check_loss(resid, tau)))
            sigma = (prior.ig_rate + Q) / rng.gamma(prior.ig_shape + n)
        elif mode == "half_t3":
            Q = float(np.sum(check_loss(resid, tau)))
            s2 = 3.0 * prior.sigma_scale ** 2

            def logf(eta):
                return (1.0 - n) * eta - Q * math.exp(-eta) - 2.0 * math.log1p(math.exp(2.0 * eta) / s2)

            sigma = math.exp(_slice_log_sigma(rng, math.log(sigma), logf))

        # v | beta, sigma
        v = _draw_v(rng, resid, sigma, th1, th2, n)

        if it >= warmup:
            k = it - warmup
            out_beta[k] = beta
            out_sigma[k] = sigma
            out_ll[k] = _loglik_from_resid(resid, sigma, tau)
    return out_beta, out_sigma, out_ll


def _initial_values(data, tau, prior, rng):
    beta_ls, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    resid = data.y - data.X @ beta_ls
    s2 = float(resid @ resid) / max(data.n - data.p, 1)
    se = np.sqrt(s2 * np.diag(np.linalg.inv(data.X.T @ data.X)))
    beta0 = beta_ls + se * rng.standard_normal(data.p)
    if prior.sigma_mode == "fixed":
        return beta0, prior.sigma_value
    sigma0 = float(np.mean(check_loss(data.y - data.X @ beta0, tau)))
    return beta0, max(sigma0, 1e-8) * math.exp(0.5 * rng.standard_normal())


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("QIJ_THREADS", 0)) or os.cpu_count() or 1
    return max(1, int(threads))


def run_sampler(data: RegressionData, tau, prior: PriorConfig | None = None,
                chains: int = 4, warmup: int = 1000, draws_per_chain: int = 1000,
                seed: int = 0, threads: int | None = None) -> PosteriorDraws:
    """Sample the AL posterior of beta (and sigma unless it is fixed).

    Chain c uses the RNG stream ``(seed, "chain", c)``; chains are merged in
    chain order, so the result is identical for any ``threads``.
    """
    tau = as_tau(tau)
    prior = PriorConfig.fixed(1.0) if prior is None else prior
    if warmup < 100 or draws_per_chain < 100 or chains < 1:
        raise ValueError("need warmup >= 100, draws_per_chain >= 100 and chains >= 1")
    if not data.has_full_rank():
        raise DataError("design matrix is rank deficient")
    prior.beta_precision(data.p)

    def chain(c):
        rng = stream(seed, "chain", c)
        b0, s0 = _initial_values(data, tau, prior, rng)
        return _run_chain(data, tau, prior, warmup, draws_per_chain, rng, b0, s0)

    n_workers = min(_threads(threads), chains)
    if n_workers == 1:
        parts = [chain(c) for c in range(chains)]
    else:
        with ThreadPoolExecutor(n_workers) as ex:
            parts = list(ex.map(chain, range(chains)))
    return PosteriorDraws(
        beta=np.concatenate([b for b, _, _ in parts]),
        sigma=np.concatenate([s for _, s, _ in parts]),
        loglik=np.concatenate([ll for _, _, ll in parts]),
        tau=tau, chains=chains, warmup=warmup, seed=seed, names=data.names,
    )


def log_posterior(draws: PosteriorDraws, prior: PriorConfig) -> np.ndarray:
    """Unnormalized log posterior of each stored draw."""
    return draws.loglik.sum(axis=1) + prior.log_prior(draws.beta, draws.sigma)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), m)
    return np.fft.irfft(f * np.conjugate(f), m)[:n] / n


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, x.shape[1] - half:]])


def split_rhat(x: np.ndarray) -> float:
    """Split potential scale reduction for a (chains, draws) array."""
    x = _split(np.asarray(x, dtype=float))
    D = x.shape[1]
    W = np.mean(np.var(x, axis=1, ddof=1))
    B = D * np.var(x.mean(axis=1), ddof=1)
    if W == 0:
        return 1.0
    return float(np.sqrt(((D - 1) / D * W + B / D) / W))


def ess(x: np.ndarray) -> float:
    """Effective sample size of a (chains, draws) array.

    Chains are split in halves; autocorrelations are combined across chains and
    truncated by Geyer's initial monotone sequence.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] > 1 or x.shape[1] >= 4:
        x = _split(x)
    C, D = x.shape
    acov = np.array([_autocov(row) for row in x])
    mean_var = acov[:, 0].mean() * D / (D - 1.0)
    var_plus = mean_var * (D - 1.0) / D
    if C > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    if var_plus == 0:
        return float(C * D)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sums of adjacent pairs, truncated at the first negative pair
    pairs = rho[: 2 * (D // 2)].reshape(-1, 2).sum(axis=1)
    neg = np.flatnonzero(pairs < 0)
    pairs = pairs[: neg[0]] if neg.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau_hat = -1.0 + 2.0 * pairs.sum()
    tau_hat = max(tau_hat, 1.0 / np.log10(C * D))
    return float(min(C * D / tau_hat, C * D * np.log10(C * D)))


def diagnostics(draws) -> ChainDiagnostics:
    """Split-Rhat (None for a single chain) and ESS per coefficient.

    Accepts PosteriorDraws or an array shaped (chains, draws, k).
    """
    arr = draws.by_chain() if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    k = arr.shape[2]
    ess_v = np.array([ess(arr[:, :, j]) for j in range(k)])
    rhat = None
    if arr.shape[0] >= 2:
        rhat = np.array([split_rhat(arr[:, :, j]) for j in range(k)])
    return ChainDiagnostics(rhat, ess_v)


def write_draws(draws: PosteriorDraws, path) -> None:
    """Dump retained draws: one row per draw with chain, iteration, beta, sigma."""
    names = draws.names or tuple(f"beta{j}" for j in range(draws.beta.shape[1]))
    D = draws.draws_per_chain
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", *names, "sigma"])
        for s in range(draws.S):
            w.writerow([s // D, s % D, *(repr(float(b)) for b in draws.beta[s]),
                        repr(float(draws.sigma[s]))])


def read_draws(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a draw dump back as (chain, beta, sigma)."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 0].astype(int), arr[:, 2:-1], arr[:, -1]
