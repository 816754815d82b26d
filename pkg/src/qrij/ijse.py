"""Posterior covariance, Bayesian infinitesimal-jackknife (IJ) covariance,
the Yang sandwich adjustment, normal intervals and a skew check.

All covariances use the S-1 (or N-1) denominator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .data import RegressionData

METHODS = ("model_based", "ij", "ij_clustered", "yang", "bootstrap")


class NotPSDError(ValueError):
    """A covariance estimate failed the symmetry/PSD check."""


@dataclass(frozen=True)
class CovarianceEstimate:
    matrix: np.ndarray
    method: str
    n_units: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown covariance method {self.method!r}")
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"covariance must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NotPSDError("covariance has non-finite entries")
        scale = max(np.max(np.abs(m)), 1e-300)
        if np.max(np.abs(m - m.T)) > 1e-12 * scale:
            raise NotPSDError("covariance is not symmetric")
        m = 0.5 * (m + m.T)
        tr = np.trace(m)
        if tr < 0 or np.linalg.eigvalsh(m).min() < -1e-10 * max(tr, 0.0):
            raise NotPSDError(f"{self.method} covariance is not positive semidefinite")
        object.__setattr__(self, "matrix", m)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))


@dataclass(frozen=True)
class InfluenceSet:
    """Per-unit (or per-cluster) influence vectors, one row each."""

    influences: np.ndarray
    mode: str

    @property
    def count(self) -> int:
        return self.influences.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.influences.mean(axis=0)


@dataclass(frozen=True)
class IntervalSet:
    center: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float

    def contains(self, value) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        return (self.lower <= value) & (value <= self.upper)


def _beta_draws(draws) -> np.ndarray:
    beta = np.asarray(draws.beta, dtype=float)
    if beta.ndim != 2 or beta.shape[0] < 2:
        raise ValueError("need at least 2 draws of a coefficient vector")
    return beta


def posterior_cov(draws) -> CovarianceEstimate:
    """Empirical covariance of the coefficient draws."""
    beta = _beta_draws(draws)
    cov = np.atleast_2d(np.cov(beta, rowvar=False, ddof=1))
    return CovarianceEstimate(cov, "model_based", beta.shape[0])


def _cross_cov(beta_c: np.ndarray, ll: np.ndarray, chunk: int = 512) -> np.ndarray:
    # p x k covariance between centred draws and columns of ll, streamed over columns
    S = beta_c.shape[0]
    out = np.empty((beta_c.shape[1], ll.shape[1]))
    for start in range(0, ll.shape[1], chunk):
        block = ll[:, start:start + chunk]
        block = block - block.mean(axis=0)
        out[:, start:start + chunk] = beta_c.T @ block / (S - 1)
    return out


def ij_influence(draws, cluster=None) -> InfluenceSet:
    """Influence vectors I_i = n cov(beta, l_i), or J cov(beta, sum_{i in j} l_i).

    Pass ``cluster`` (length-n labels) for the cluster mode.
    """
    beta = _beta_draws(draws)
    ll = np.asarray(draws.loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] != beta.shape[0]:
        raise ValueError("log-likelihood matrix must be S x n with S matching the draws")
    beta_c = beta - beta.mean(axis=0)
    n = ll.shape[1]
    if cluster is None:
        return InfluenceSet(n * _cross_cov(beta_c, ll).T, "unit")
    labels = np.asarray(cluster).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError("cluster labels must have one entry per unit")
    _, labels = np.unique(labels, return_inverse=True)
    J = int(labels.max()) + 1
    ll_cl = np.zeros((ll.shape[0], J))
    for i in range(n):
        ll_cl[:, labels[i]] += ll[:, i]
    return InfluenceSet(J * _cross_cov(beta_c, ll_cl).T, "cluster")


def ij_cov(influence: InfluenceSet) -> CovarianceEstimate:
    """IJ variance 1/(N(N-1)) sum_i (I_i - Ibar)(I_i - Ibar)'."""
    inf = influence.influences
    N = inf.shape[0]
    if N < 2:
        raise ValueError("IJ covariance needs at least 2 units")
    dev = inf - inf.mean(axis=0)
    V = dev.T @ dev / (N * (N - 1))
    method = "ij_clustered" if influence.mode == "cluster" else "ij"
    return CovarianceEstimate(V, method, N)


def yang_adjusted(draws, data: RegressionData) -> CovarianceEstimate:
    """tau(1-tau)/sigma^2 * Sigma (sum_i x_i x_i') Sigma for a fixed-sigma run."""
    sigma = np.asarray(draws.sigma, dtype=float)
    if sigma.size == 0 or np.any(sigma != sigma.flat[0]):
        raise ValueError("the Yang adjustment requires draws with sigma held fixed")
    s = float(sigma.flat[0])
    tau = float(draws.tau)
    Sigma = posterior_cov(draws).matrix
    XtX = data.X.T @ data.X
    adj = tau * (1.0 - tau) / s**2 * (Sigma @ XtX @ Sigma)
    return CovarianceEstimate(0.5 * (adj + adj.T), "yang", data.n)


def intervals(center, cov: CovarianceEstimate, level: float = 0.9) -> IntervalSet:
    """Normal-approximation intervals center +/- z * se."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    se = cov.se
    if se.shape != center.shape:
        raise ValueError("center and covariance dimensions differ")
    z = ndtri(0.5 + 0.5 * level)
    return IntervalSet(center, se, center - z * se, center + z * se, float(level))


def posterior_median(x: np.ndarray) -> np.ndarray:
    # midpoint of the two middle order statistics for even S
    return np.median(x, axis=0)


def skew_diagnostic(draws) -> np.ndarray:
    """Posterior mean minus posterior median, per coefficient."""
    beta = _beta_draws(draws)
    return beta.mean(axis=0) - posterior_median(beta)


RECORD_FIELDS = ("method", "coefficient", "estimate", "se", "lower", "upper")


def interval_records(method: str, names, ivs: IntervalSet) -> list[dict]:
    return [
        {"method": method, "coefficient": name, "estimate": ivs.center[j],
         "se": ivs.se[j], "lower": ivs.lower[j], "upper": ivs.upper[j]}
        for j, name in enumerate(names)
    ]


def write_records(path, records, fields=RECORD_FIELDS) -> None:
    """Write dict records as a CSV table; floats use repr for exact round trips."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow({k: _fmt(rec.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v
