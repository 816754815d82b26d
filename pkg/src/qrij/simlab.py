"""Simulation studies: data-generating processes, true quantile coefficients,
relative-error and coverage metrics, and a replication driver."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import beta as beta_dist

from .ald import as_tau
from .data import RegressionData
from .gibbs import PriorConfig, run_sampler
from .ijse import (ij_cov, ij_influence, intervals, posterior_cov, write_records,
                   yang_adjusted, IntervalSet)
from .pointest import bootstrap_cov, fit_check_loss
from .rng import stream


class StudyError(RuntimeError):
    """Invalid study specification or too many failed replications."""


def norm_ppf(q):
    """Standard normal quantile function."""
    return ndtri(q)


# --------------------------------------------------------------------------
# data-generating processes

@dataclass(frozen=True)
class DGPConfig:
    """``kind`` is "model1", "model2" or "clustered".

    model1: y = alpha + beta x + e
    model2: y = alpha + beta x + (1 + gamma x) e, with x, e ~ N(0, 1)
    clustered: I units in each of J clusters; x_ij = sqrt(rho) z_j +
    sqrt(1 - rho) e_ij and y_ij = u_ij / 10 + x_ij + x_ij^2 u_ij, u ~ N(0, 1/3)

    With ``u_icc > 0`` the errors share a cluster component too,
    u_ij = sqrt(u_icc) v_j + sqrt(1 - u_icc) w_ij with v, w ~ N(0, 1/3). The
    marginal law of u, and so the truth, is unchanged; the default 0 keeps
    errors independent across units.
    """

    kind: str = "model1"
    n: int = 200
    alpha: float = 2.0
    beta: float = 2.0
    gamma: float = 0.3
    I: int = 10
    J: int = 50
    rho: float = 0.3
    u_icc: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("model1", "model2", "clustered"):
            raise ValueError(f"unknown DGP kind {self.kind!r}")
        if self.kind == "clustered":
            if not 0.0 <= self.rho < 1.0:
                raise ValueError("rho must lie in [0, 1)")
            if not 0.0 <= self.u_icc < 1.0:
                raise ValueError("u_icc must lie in [0, 1)")
            if self.I < 2 or self.J < 2:
                raise ValueError("clustered DGP needs I >= 2 and J >= 2")
        elif self.n < 3:
            raise ValueError("need n >= 3")

    @property
    def size(self) -> int:
        return self.I * self.J if self.kind == "clustered" else self.n

    def replace(self, **kw) -> DGPConfig:
        return DGPConfig(**{**asdict(self), **kw})


def generate(config: DGPConfig, rng: np.random.Generator | None = None) -> RegressionData:
    """Draw one dataset; uses ``rng`` if given, else the stream for config.seed."""
    rng = stream(config.seed, "dgp") if rng is None else rng
    if config.kind == "clustered":
        I, J, rho = config.I, config.J, config.rho
        z = rng.standard_normal(J)
        e = rng.standard_normal((J, I))
        u = rng.normal(0.0, math.sqrt(1.0 / 3.0), (J, I))
        if config.u_icc > 0:
            v = rng.normal(0.0, math.sqrt(1.0 / 3.0), J)
            u = math.sqrt(config.u_icc) * v[:, None] + math.sqrt(1.0 - config.u_icc) * u
        x = math.sqrt(rho) * z[:, None] + math.sqrt(1.0 - rho) * e
        y = u / 10.0 + x + x**2 * u
        x, y = x.ravel(), y.ravel()
        X = np.column_stack([np.ones(x.size), x, x**2])
        return RegressionData(y, X, np.repeat(np.arange(J), I), ("intercept", "x", "x2"))
    n = config.n
    x = rng.standard_normal(n)
    e = rng.standard_normal(n)
    if config.kind == "model1":
        y = config.alpha + config.beta * x + e
    else:
        y = config.alpha + config.beta * x + (1.0 + config.gamma * x) * e
    return RegressionData(y, np.column_stack([np.ones(n), x]), names=("intercept", "x"))


def truth(config: DGPConfig, tau) -> np.ndarray:
    """Coefficients of the true conditional tau-quantile function."""
    tau = as_tau(tau)
    q = float(norm_ppf(tau))
    if config.kind == "model1":
        return np.array([config.alpha + q, config.beta])
    if config.kind == "model2":
        return np.array([config.alpha + q, config.beta + config.gamma * q])
    return np.array([q / math.sqrt(300.0), 1.0, q / math.sqrt(3.0)])


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class RelativeError:
    r_e: float
    mce: float
    lo: float
    hi: float


@dataclass(frozen=True)
class Coverage:
    proportion: float
    lo: float
    hi: float
    hits: int
    m: int


def relative_error(se_sq, beta_hats) -> RelativeError:
    """R_e = sqrt(mean(se^2) / var(beta_hat)) - 1 with its Monte Carlo error.

    MCe = (R_e + 1) sqrt(var(se^2) / var(beta_hat)^2 + 1 / (2m - 1)); the
    interval is R_e +/- 1.96 MCe.
    """
    se_sq = np.asarray(se_sq, dtype=float)
    beta_hats = np.asarray(beta_hats, dtype=float)
    m = se_sq.size
    if m < 2 or beta_hats.size != m:
        raise ValueError("need m >= 2 matched standard errors and estimates")
    v = np.var(beta_hats, ddof=1)
    if not v > 0:
        raise StudyError("point estimates have zero variance across replications")
    r_e = math.sqrt(se_sq.mean() / v) - 1.0
    mce = (r_e + 1.0) * math.sqrt(np.var(se_sq, ddof=1) / v**2 + 1.0 / (2 * m - 1))
    return RelativeError(r_e, mce, r_e - 1.96 * mce, r_e + 1.96 * mce)


def clopper_pearson(k: int, m: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial interval for k successes in m trials."""
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(beta_dist.ppf(a / 2, k, m - k + 1))
    hi = 1.0 if k == m else float(beta_dist.ppf(1 - a / 2, k + 1, m - k))
    return lo, hi


def coverage(interval_sets, true_coef, index: int | None = None) -> Coverage:
    """Share of intervals containing the truth, with an exact 95% interval.

    With ``index`` only that coefficient is scored; otherwise each interval
    set must hold a single coefficient.
    """
    true_coef = np.atleast_1d(np.asarray(true_coef, dtype=float))
    hits = []
    for ivs in interval_sets:
        inside = ivs.contains(true_coef)
        hits.append(bool(inside[index] if index is not None else np.all(inside)))
    m = len(hits)
    if m < 1:
        raise ValueError("coverage needs at least one interval")
    k = int(sum(hits))
    lo, hi = clopper_pearson(k, m)
    return Coverage(k / m, lo, hi, k, m)


@dataclass(frozen=True)
class MetricSummary:
    method: str
    tau: float
    sigma_mode: str
    coefficient: str
    R_e: float
    MCe: float
    re_lo: float
    re_hi: float
    coverage: float
    cov_lo: float
    cov_hi: float
    m: int


TABLE_FIELDS = tuple(MetricSummary.__dataclass_fields__)


# --------------------------------------------------------------------------
# study driver

BAYES_METHODS = ("ald", "ijf", "ij", "yang", "ijf_cl", "ij_cl")
ALL_METHODS = BAYES_METHODS + ("boot", "boot_cl")
LABELS = {"ald": "ALD", "ijf": "IJf", "ij": "IJ", "yang": "Yang", "boot": "boot",
          "ijf_cl": "IJf_cl", "ij_cl": "IJ_cl", "boot_cl": "boot_cl"}


@dataclass(frozen=True)
class StudySpec:
    """A simulation study.

    ``sigmas`` is a list of fixed scale values, or the string "estimated" for
    a half-t(3) prior on sigma. Methods: ald (model-based), ijf (IJ, fixed
    sigma), ij (IJ, estimated sigma), yang (fixed sigma), boot (pair
    bootstrap); the ``_cl`` variants use cluster-level IJ or cluster
    resampling.
    """

    dgp: DGPConfig
    taus: tuple[float, ...] = (0.5,)
    sigmas: tuple[float, ...] | str = (1.0,)
    methods: tuple[str, ...] = ("ald", "ijf")
    m: int = 100
    seed: int = 0
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    boot_b: int = 200
    level: float = 0.9
    sigma_scale: float = 2.5
    threads: int | None = None

    def validate(self) -> list[str]:
        """All problems with the spec, empty when valid."""
        errs = []
        for t in self.taus:
            if not 0.0 < t < 1.0:
                errs.append(f"tau {t!r} outside (0, 1)")
        if not self.taus:
            errs.append("no tau values")
        estimated = isinstance(self.sigmas, str)
        if estimated and self.sigmas != "estimated":
            errs.append(f"sigmas must be a list of values or 'estimated', got {self.sigmas!r}")
        if not estimated:
            if not self.sigmas:
                errs.append("no sigma values")
            errs.extend(f"sigma {s!r} must be positive" for s in self.sigmas if not s > 0)
        if not self.methods:
            errs.append("no methods")
        for meth in self.methods:
            if meth not in ALL_METHODS:
                errs.append(f"unknown method {meth!r}")
            elif meth.startswith("ijf") or meth == "yang":
                if estimated:
                    errs.append(f"method {meth!r} needs fixed sigma values")
            elif meth.startswith("ij") and not estimated:
                errs.append(f"method {meth!r} needs sigmas='estimated'")
            if meth.endswith("_cl") and self.dgp.kind != "clustered":
                errs.append(f"method {meth!r} needs a clustered DGP")
        if self.m < 2:
            errs.append("m must be at least 2")
        if self.warmup < 100 or self.draws < 100 or self.chains < 1:
            errs.append("sampler needs warmup >= 100, draws >= 100, chains >= 1")
        if self.boot_b < 50:
            errs.append("boot_b must be at least 50")
        if not 0.0 < self.level < 1.0:
            errs.append("level must lie in (0, 1)")
        return errs

    @property
    def sigma_list(self) -> list:
        return ["estimated"] if isinstance(self.sigmas, str) else [float(s) for s in self.sigmas]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigmas"] = self.sigmas if isinstance(self.sigmas, str) else list(self.sigmas)
        d["taus"] = list(self.taus)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> StudySpec:
        d = dict(d)
        d["dgp"] = DGPConfig(**d["dgp"])
        d["taus"] = tuple(d["taus"])
        d["methods"] = tuple(d["methods"])
        if not isinstance(d["sigmas"], str):
            d["sigmas"] = tuple(d["sigmas"])
        return cls(**d)


def sigma_label(sigma) -> str:
    return "estimated" if sigma == "estimated" else f"fixed={float(sigma)!r}"


@dataclass
class StudyResult:
    spec: StudySpec
    rows: list[MetricSummary]
    # (method, tau, sigma label) -> arrays of shape (m_ok, p)
    estimates: dict = field(default_factory=dict)
    ses: dict = field(default_factory=dict)
    failures: list[tuple[int, str]] = field(default_factory=list)

    def row(self, method, tau, sigma, coefficient) -> MetricSummary:
        label = sigma_label(sigma) if not method.startswith("boot") else "none"
        for r in self.rows:
            if (r.method == LABELS.get(method, method) and r.tau == tau
                    and r.sigma_mode == label and r.coefficient == coefficient):
                return r
        raise KeyError((method, tau, sigma, coefficient))

    def to_csv(self, path) -> None:
        write_records(path, [asdict(r) for r in self.rows], TABLE_FIELDS)


def _method_ses(method, draws, data):
    if method == "ald":
        return posterior_cov(draws)
    if method == "yang":
        return yang_adjusted(draws, data)
    cl = data.cluster if method.endswith("_cl") else None
    return ij_cov(ij_influence(draws, cl))


def _replicate(spec: StudySpec, r: int) -> dict:
    """Everything one replication contributes: key -> (estimate, IntervalSet)."""
    rng = stream(spec.seed, "replication", r, "data")
    data = generate(spec.dgp, rng)
    bayes = [m for m in spec.methods if m in BAYES_METHODS]
    boots = [m for m in spec.methods if m.startswith("boot")]
    out = {}
    for ti, tau in enumerate(spec.taus):
        for si, sigma in enumerate(spec.sigma_list):
            if not bayes:
                break
            if sigma == "estimated":
                prior = PriorConfig.half_t3(spec.sigma_scale)
            else:
                prior = PriorConfig.fixed(sigma)
            mcmc_seed = int(stream(spec.seed, "replication", r, "mcmc", ti, si).integers(2**63))
            draws = run_sampler(data, tau, prior, spec.chains, spec.warmup, spec.draws,
                                mcmc_seed, threads=1)
            center = draws.beta.mean(axis=0)
            for meth in bayes:
                cov = _method_ses(meth, draws, data)
                out[(meth, tau, sigma_label(sigma))] = intervals(center, cov, spec.level)
        for meth in boots:
            fit = fit_check_loss(data, tau)
            boot_seed = int(stream(spec.seed, "replication", r, "boot", ti).integers(2**63))
            scheme = "cluster" if meth == "boot_cl" else "pair"
            cov = bootstrap_cov(data, tau, spec.boot_b, scheme, boot_seed, threads=1)
            out[(meth, tau, "none")] = intervals(fit.beta_hat, cov, spec.level)
    return out


def _names(spec):
    if spec.dgp.kind == "clustered":
        return ("intercept", "x", "x2")
    return ("intercept", "x")


def run_study(spec: StudySpec, progress=None) -> StudyResult:
    """Run all replications and aggregate metrics per (method, tau, sigma, coefficient).

    Replication r draws data from stream (seed, r, "data") and MCMC/bootstrap
    seeds from their own streams, so results are independent of ``threads``
    and of which methods are requested. A replication that raises is recorded
    in ``failures``; more than 2% failures aborts the study.
    """
    errs = spec.validate()
    if errs:
        raise StudyError("invalid study spec: " + "; ".join(errs))
    threads = spec.threads
    if threads is None:
        threads = int(os.environ.get("QIJ_THREADS", 0)) or os.cpu_count() or 1

    def task(r):
        try:
            res = _replicate(spec, r)
        except Exception as exc:  # recorded, surfaced in StudyResult.failures
            res = exc
        if progress is not None:
            progress(r)
        return res

    if threads <= 1:
        results = [task(r) for r in range(spec.m)]
    else:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(task, range(spec.m)))

    failures = [(r, f"{type(res).__name__}: {res}") for r, res in enumerate(results)
                if isinstance(res, Exception)]
    if len(failures) > 0.02 * spec.m:
        raise StudyError(f"{len(failures)} of {spec.m} replications failed; first: {failures[0][1]}")
    ok = [res for res in results if not isinstance(res, Exception)]

    names = _names(spec)
    rows, estimates, ses = [], {}, {}
    for key in ok[0]:
        meth, tau, slabel = key
        ivs: list[IntervalSet] = [res[key] for res in ok]
        est = np.array([iv.center for iv in ivs])
        se = np.array([iv.se for iv in ivs])
        estimates[key], ses[key] = est, se
        true = truth(spec.dgp, tau)
        for j, name in enumerate(names):
            re = relative_error(se[:, j] ** 2, est[:, j])
            cv = coverage(ivs, true, index=j)
            rows.append(MetricSummary(LABELS[meth], tau, slabel, name, re.r_e, re.mce,
                                      re.lo, re.hi, cv.proportion, cv.lo, cv.hi, len(ivs)))
    return StudyResult(spec, rows, estimates, ses, failures)
