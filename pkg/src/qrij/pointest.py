"""Classical quantile regression by check-loss minimization, with pair and
cluster bootstrap covariance baselines."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .ald import as_tau, check_loss
from .data import DataError, RegressionData
from .ijse import CovarianceEstimate
from .rng import stream


class OptimalityError(RuntimeError):
    """The solver returned a point failing the subgradient certificate."""


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    objective: float
    neg_residual_count: int
    zero_residual_count: int
    tau: float


def _objective(data, beta, tau):
    return float(np.sum(check_loss(data.y - data.X @ beta, tau)))


def _zero_tol(y):
    return 1e-9 * (1.0 + np.max(np.abs(y)))


def _start_basis(X, y, w, tau):
    """p rows nearest the tau-shifted weighted least-squares fit, nonsingular."""
    sw = np.sqrt(w)
    b, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    r = y - X @ b
    order = np.argsort(np.abs(r - np.quantile(r, tau)), kind="stable")
    basis = []
    for i in order:
        if np.linalg.matrix_rank(X[basis + [i]]) == len(basis) + 1:
            basis.append(int(i))
            if len(basis) == X.shape[1]:
                return basis
    return None


def _descent(X, y, w, tau, max_iter=5000):
    """Exact basis descent on sum_i w_i rho_tau(y_i - x_i'beta).

    From an interpolating basis h, each of the 2p edges that frees one basis
    row is tested; the steepest descending edge is followed with an exact line
    search (weighted-median breakpoint), which swaps one row into the basis.
    Returns (beta, basis) at a basis with no descending edge, or None when the
    end point is degenerate (extra zero residuals) or the iteration cap is hit.
    """
    n, p = X.shape
    h = _start_basis(X, y, w, tau)
    if h is None:
        return None
    tol = _zero_tol(y)
    for _ in range(max_iter):
        Xh = X[h]
        beta = np.linalg.solve(Xh, y[h])
        r = y - X @ beta
        in_h = np.zeros(n, dtype=bool)
        in_h[h] = True
        zero = (np.abs(r) <= tol) & ~in_h
        live = ~in_h & ~zero
        # S[:, k] = x_i' d_k with d_k = Xh^{-1} e_k
        S = np.linalg.solve(Xh.T, X.T).T
        psi_w = np.where(live, w * (tau - (r < 0)), 0.0)
        c = psi_w @ S
        wz = w[zero]
        Sz = S[zero]
        zp = np.sum(wz[:, None] * np.maximum((1 - tau) * Sz, -tau * Sz), axis=0)
        zm = np.sum(wz[:, None] * np.maximum(-(1 - tau) * Sz, tau * Sz), axis=0)
        wh = w[h]
        d_plus = wh * (1 - tau) - c + zp
        d_minus = wh * tau + c + zm
        k = int(np.argmin(np.minimum(d_plus, d_minus)))
        D = min(d_plus[k], d_minus[k])
        if D >= -1e-12 * (1.0 + np.sum(w)):
            return (beta, np.array(h)) if not np.any(zero) else None
        s = S[:, k] if d_plus[k] <= d_minus[k] else -S[:, k]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = r / s
        cand = np.flatnonzero(live & (s != 0) & (t > 0))
        order = cand[np.argsort(t[cand], kind="stable")]
        slope = D + np.cumsum(w[order] * np.abs(s[order]))
        j = int(np.searchsorted(slope, 0.0))
        if j >= order.size:
            return None
        h[k] = int(order[j])
    return None


def _lp(X, y, w, tau):
    # dual: max y'a  s.t.  X'a = (1 - tau) X'w,  0 <= a <= w; beta from the equality duals
    res = linprog(-y, A_eq=X.T, b_eq=(1.0 - tau) * (X.T @ w),
                  bounds=list(zip(np.zeros_like(w), w)), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    return -np.asarray(res.eqlin.marginals)


def certificate(data: RegressionData, tau, beta, basis=None) -> bool:
    """Subgradient optimality check for ``beta``.

    Counting condition: N- <= n tau <= N- + N0 (N0 = zero residuals; with N0 = p
    this is n tau - p <= N- <= n tau). When an interpolating ``basis`` is given
    and no other residual is zero, also checks the dual condition: the basis
    weights solving sum_{i not in h} psi(r_i) x_i + X_h' a = 0 lie in [tau - 1, tau].
    """
    tau = as_tau(tau)
    r = data.y - data.X @ beta
    tol = _zero_tol(data.y)
    neg = int(np.sum(r < -tol))
    zero = int(np.sum(np.abs(r) <= tol))
    n_tau = data.n * tau
    eps = 1e-9
    ok = neg <= n_tau + eps and neg + zero >= n_tau - eps
    if ok and basis is not None and zero == data.p:
        out = np.ones(data.n, dtype=bool)
        out[basis] = False
        psi = tau - (r[out] < 0)
        g = data.X[out].T @ psi
        a = np.linalg.solve(data.X[basis].T, -g)
        ok = bool(np.all(a >= tau - 1 - 1e-8) and np.all(a <= tau + 1e-8))
    return ok


def _solve(X, y, w, tau):
    found = _descent(X, y, w, tau)
    if found is not None:
        return found[0], found[1]
    return _lp(X, y, w, tau), None


def fit_check_loss(data: RegressionData, tau, check: bool = True) -> FitResult:
    """Minimize sum_i rho_tau(y_i - x_i'beta) exactly.

    Uses exact basis descent; degenerate end points (ties) are re-solved as a
    linear program with HiGHS. With ``check`` the subgradient certificate is
    asserted on the result.
    """
    tau = as_tau(tau)
    n, p = data.X.shape
    if n < p:
        raise DataError(f"n={n} is smaller than p={p}")
    if not data.has_full_rank():
        raise DataError("design matrix is rank deficient")
    beta, basis = _solve(data.X, data.y, np.ones(n), tau)
    r = data.y - data.X @ beta
    tol = _zero_tol(data.y)
    if check and not certificate(data, tau, beta, basis):
        raise OptimalityError("check-loss fit failed the optimality certificate")
    return FitResult(beta, _objective(data, beta, tau), int(np.sum(r < -tol)),
                     int(np.sum(np.abs(r) <= tol)), tau)


def fit_weighted(X, y, w, tau) -> np.ndarray:
    """Minimizer of sum_i w_i rho_tau(y_i - x_i'beta) for integer-like weights w >= 0.

    Rows with zero weight are dropped, so a bootstrap resample can be fitted
    from its counts without duplicated rows.
    """
    tau = as_tau(tau)
    keep = np.asarray(w) > 0
    return _solve(np.asarray(X)[keep], np.asarray(y)[keep], np.asarray(w, dtype=float)[keep], tau)[0]


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("QIJ_THREADS", 0)) or os.cpu_count() or 1
    return max(1, int(threads))


def bootstrap_cov(data: RegressionData, tau, B: int = 200, scheme: str = "pair",
                  seed: int = 0, threads: int | None = None,
                  return_draws: bool = False):
    """Bootstrap covariance of the check-loss estimator.

    ``scheme="pair"`` resamples n units with replacement; ``scheme="cluster"``
    resamples J whole clusters. Replicate b uses its own RNG stream derived
    from ``(seed, b)``, so the result does not depend on ``threads``.
    Resamples with a rank-deficient design are redrawn from the same stream;
    more than 10*B redraws in total is an error.
    """
    tau = as_tau(tau)
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    if scheme == "cluster":
        if data.cluster is None:
            raise DataError("cluster bootstrap needs cluster labels")
        J = data.n_clusters
        members = [np.flatnonzero(data.cluster == j) for j in range(J)]
    elif scheme != "pair":
        raise ValueError(f"unknown bootstrap scheme {scheme!r}")

    def one(b):
        rng = stream(seed, "bootstrap", b)
        redraws = 0
        while True:
            if scheme == "pair":
                idx = rng.integers(0, data.n, data.n)
            else:
                idx = np.concatenate([members[j] for j in rng.integers(0, J, J)])
            counts = np.bincount(idx, minlength=data.n).astype(float)
            used = counts > 0
            if np.linalg.matrix_rank(data.X[used]) == data.p:
                return fit_weighted(data.X, data.y, counts, tau), redraws
            redraws += 1
            if redraws > 10 * B:
                return None, redraws

    with ThreadPoolExecutor(_threads(threads)) as ex:
        results = list(ex.map(one, range(B)))
    total = sum(r for _, r in results)
    if total > 10 * B or any(b is None for b, _ in results):
        raise RuntimeError(f"bootstrap exceeded {10 * B} redraws of singular resamples")
    betas = np.array([b for b, _ in results])
    cov = np.atleast_2d(np.cov(betas, rowvar=False, ddof=1))
    est = CovarianceEstimate(cov, "bootstrap", data.n if scheme == "pair" else J)
    return (est, betas) if return_draws else est
