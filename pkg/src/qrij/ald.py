"""Check loss and the asymmetric-Laplace working likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import RegressionData


def as_tau(tau) -> float:
    """Validate a quantile level; returns it as a float in (0, 1)."""
    t = float(tau)
    if not (0.0 < t < 1.0):
        raise ValueError(f"quantile level must lie in (0, 1), got {tau!r}")
    return t


@dataclass(frozen=True)
class ALParameters:
    beta: np.ndarray
    sigma: float
    tau: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty vector")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "tau", as_tau(self.tau))


class MixtureConstants(NamedTuple):
    theta1: float
    theta2: float


def check_loss(u, tau):
    """rho_tau(u) = u * (tau - 1{u < 0}); elementwise for arrays."""
    tau = as_tau(tau)
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("check_loss requires finite input")
    out = np.where(u >= 0, tau * u, (tau - 1.0) * u)
    return out if out.ndim else float(out)


def _loglik_from_resid(resid, sigma, tau):
    # shared by loglik_contributions and the sampler so stored rows match bit-for-bit
    z = resid / sigma
    return math.log(tau * (1.0 - tau) / sigma) - np.where(z >= 0, tau * z, (tau - 1.0) * z)


def al_log_density(y, mu, sigma, tau):
    """Log density of AL(mu, sigma, tau) at ``y``."""
    tau = as_tau(tau)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    out = _loglik_from_resid(y - mu, float(sigma), tau)
    return out if out.ndim else float(out)


def loglik_contributions(data: RegressionData, params: ALParameters) -> np.ndarray:
    """Per-unit AL log-likelihood contributions, a length-n vector."""
    if data.p != params.beta.size:
        raise ValueError(f"design has {data.p} columns but beta has length {params.beta.size}")
    resid = data.y - data.X @ params.beta
    return _loglik_from_resid(resid, params.sigma, params.tau)


def al_log_likelihood(data: RegressionData, params: ALParameters) -> float:
    return float(np.sum(loglik_contributions(data, params)))


def mixture_constants(tau) -> MixtureConstants:
    """Constants of the normal scale-mixture form of the AL error.

    eps = sigma * (theta1 * nu + theta2 * z * sqrt(nu)) with nu ~ Exp(1) and
    z ~ N(0, 1) independent has the AL(0, sigma, tau) distribution.
    """
    tau = as_tau(tau)
    q = tau * (1.0 - tau)
    return MixtureConstants((1.0 - 2.0 * tau) / q, math.sqrt(2.0 / q))


def _al_cdf(y, mu, sigma, tau):
    # closed form, used by the tests only
    z = (np.asarray(y, dtype=float) - mu) / sigma
    return np.where(z < 0, tau * np.exp((1.0 - tau) * np.minimum(z, 0.0)),
                    1.0 - (1.0 - tau) * np.exp(-tau * np.maximum(z, 0.0)))


def _al_ppf(q, mu, sigma, tau):
    q = np.asarray(q, dtype=float)
    lo = np.log(np.where(q < tau, q, tau) / tau) / (1.0 - tau)
    hi = -np.log((1.0 - np.where(q >= tau, q, tau)) / (1.0 - tau)) / tau
    return mu + sigma * np.where(q < tau, lo, hi)
