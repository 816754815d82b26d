"""Command-line interface: ``qrij fit``, ``qrij simulate`` and ``qrij engel-demo``.

Every run writes a results table plus ``manifest.json`` holding the full
configuration, seed and package version. Neither file contains timestamps or
the thread count, so a rerun with the same seed reproduces them byte for byte.

Exit codes: 0 success, 2 usage error, 3 unreadable input, 4 bad data or
formula, 5 invalid study specification, 6 computation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ald import as_tau
from .data import DataError, RegressionData, engel_loglog
from .gibbs import PriorConfig, diagnostics, run_sampler, write_draws
from .ijse import (RECORD_FIELDS, ij_cov, ij_influence, intervals, posterior_cov,
                   skew_diagnostic, write_records, yang_adjusted)
from .pointest import bootstrap_cov, fit_check_loss
from .simlab import DGPConfig, StudyError, StudySpec, run_study

log = logging.getLogger("qrij")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DATA, EXIT_SPEC, EXIT_COMPUTE = 0, 2, 3, 4, 5, 6
FIT_METHODS = ("ald", "ijf", "ij", "yang", "boot")
FIT_FIELDS = ("tau",) + RECORD_FIELDS
SKEW_FIELDS = ("sigma", "mean", "median", "mode", "mean_minus_median")


class UsageError(Exception):
    """Inconsistent command-line options."""


# --------------------------------------------------------------------------
# input

_TERM = re.compile(r"^(?:log\((?P<log>[^()]+)\)|(?P<raw>[^()]+))$")


def parse_formula(formula: str) -> tuple[tuple[str, bool], list[tuple[str, bool]], bool]:
    """Parse ``"y ~ x1 + log(x2)"`` into (response, covariates, intercept).

    Each variable is ``(column, take_log)``. ``1`` alone keeps only the
    intercept; a ``- 1`` or ``+ 0`` term drops it.
    """
    if formula.count("~") != 1:
        raise DataError(f"formula needs exactly one '~': {formula!r}")
    lhs, rhs = (s.strip() for s in formula.split("~"))

    def term(t):
        m = _TERM.match(t.strip())
        if not m or not t.strip():
            raise DataError(f"cannot parse formula term {t!r}")
        return (m["log"].strip(), True) if m["log"] else (m["raw"].strip(), False)

    response = term(lhs)
    intercept = True
    rhs = re.sub(r"-\s*1\b", "+ 0", rhs)
    covs = []
    for t in rhs.split("+"):
        t = t.strip()
        if t == "0":
            intercept = False
        elif t != "1":
            covs.append(term(t))
    return response, covs, intercept


def ingest_csv(path, formula: str, cluster: str | None = None) -> RegressionData:
    """Read a comma-separated file with a header row into RegressionData.

    Numbers are parsed with ``float`` (decimal point, no locale). Cluster
    labels may be any strings; they are relabelled densely (0..J-1) in sorted
    label order.
    """
    response, covs, intercept = parse_formula(formula)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    needed = [response[0]] + [c for c, _ in covs] + ([cluster] if cluster else [])
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}; have {', '.join(header)}")

    def column(name, take_log):
        j = header.index(name)
        out = np.empty(len(body))
        for i, row in enumerate(body):
            try:
                out[i] = float(row[j])
            except (ValueError, IndexError):
                cell = row[j] if j < len(row) else ""
                raise DataError(f"{path}: row {i + 2}, column {name!r}: not a number: {cell!r}")
        if take_log:
            if np.any(out <= 0):
                raise DataError(f"{path}: log({name}) needs positive values")
            out = np.log(out)
        return out

    y = column(*response)
    cols, names = [], []
    if intercept:
        cols.append(np.ones(len(body)))
        names.append("intercept")
    for name, take_log in covs:
        cols.append(column(name, take_log))
        names.append(f"log({name})" if take_log else name)
    if not cols:
        raise DataError("formula has no covariates and no intercept")
    labels = None
    if cluster:
        j = header.index(cluster)
        labels = np.array([row[j].strip() if j < len(row) else "" for row in body])
    return RegressionData(y, np.column_stack(cols), labels, tuple(names))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# fitting

def sigma_mle(data: RegressionData, tau: float) -> float:
    """AL maximum-likelihood scale at the check-loss fit: mean check loss."""
    fit = fit_check_loss(data, tau)
    return max(fit.objective / data.n, 1e-12)


def _prior_for(sigma_opt, data, tau, scale):
    if sigma_opt is None:
        return PriorConfig.half_t3(scale)
    if sigma_opt == "mle":
        return PriorConfig.fixed(sigma_mle(data, tau))
    return PriorConfig.fixed(float(sigma_opt))


def fit_records(data: RegressionData, tau: float, methods, sigma_opt, *, chains, warmup,
                draws, seed, boot_b, level, threads, sigma_scale=2.5, dump=None) -> list[dict]:
    """Estimates, standard errors and intervals for each requested method."""
    names = data.names
    records = []
    bayes = [m for m in methods if m != "boot"]
    if bayes:
        prior = _prior_for(sigma_opt, data, tau, sigma_scale)
        post = run_sampler(data, tau, prior, chains, warmup, draws, seed, threads)
        diag = diagnostics(post)
        if diag.rhat is not None and np.any(diag.rhat > 1.05):
            log.warning("tau=%s: split R-hat up to %.3f; consider more draws", tau, diag.rhat.max())
        if dump is not None:
            write_draws(post, dump)
        center = post.beta.mean(axis=0)
        for meth in bayes:
            if meth == "ald":
                cov = posterior_cov(post)
            elif meth == "yang":
                cov = yang_adjusted(post, data)
            else:
                cov = ij_cov(ij_influence(post, data.cluster))
            records += _records(tau, meth, names, intervals(center, cov, level))
    if "boot" in methods:
        fit = fit_check_loss(data, tau)
        scheme = "cluster" if data.cluster is not None else "pair"
        cov = bootstrap_cov(data, tau, boot_b, scheme, seed, threads)
        records += _records(tau, "boot", names, intervals(fit.beta_hat, cov, level))
    return records


def _records(tau, method, names, ivs):
    return [{"tau": tau, "method": method, "coefficient": name, "estimate": ivs.center[j],
             "se": ivs.se[j], "lower": ivs.lower[j], "upper": ivs.upper[j]}
            for j, name in enumerate(names)]


def _check_methods(methods, sigma_opt):
    for m in methods:
        if m in ("ijf", "yang") and sigma_opt is None:
            raise UsageError(f"method {m} needs a fixed --sigma")
        if m == "ij" and sigma_opt is not None:
            raise UsageError("method ij needs --estimate-sigma (use ijf with a fixed --sigma)")


def _write_manifest(out: Path, config: dict) -> None:
    doc = {"program": "qrij", "version": __version__, "config": config}
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
    (out / "manifest.json").write_text(text, encoding="utf-8")


def _sigma_config(args):
    return None if args.estimate_sigma else args.sigma


def cmd_fit(args) -> int:
    taus = [as_tau(t) for t in (args.tau or [0.5])]
    methods = list(dict.fromkeys(args.method or ["ij"]))
    sigma_opt = _sigma_config(args)
    _check_methods(methods, sigma_opt)
    if not os.path.isfile(args.data):
        raise FileNotFoundError(args.data)
    data = ingest_csv(args.data, args.formula, args.cluster)
    if args.cluster:
        log.info("clusters: J=%d", data.n_clusters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k, tau in enumerate(taus):
        dump = out / f"draws_tau{tau!r}.csv" if args.dump_draws else None
        records += fit_records(data, tau, methods, sigma_opt, chains=args.chains,
                               warmup=args.warmup, draws=args.draws, seed=args.seed + k,
                               boot_b=args.boot_b, level=args.level, threads=args.threads,
                               dump=dump)
    write_records(out / "results.csv", records, FIT_FIELDS)
    _write_manifest(out, {
        "subcommand": "fit", "data": str(args.data), "data_sha256": _sha256(args.data),
        "formula": args.formula, "cluster": args.cluster, "n": data.n,
        "n_clusters": data.n_clusters if data.cluster is not None else None,
        "taus": taus, "methods": methods, "sigma": sigma_opt if sigma_opt is not None else "estimated",
        "chains": args.chains, "warmup": args.warmup, "draws": args.draws, "seed": args.seed,
        "boot_b": args.boot_b, "level": args.level,
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# simulation

def _study_from_args(args) -> StudySpec:
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            d = json.load(fh)
        d.setdefault("seed", args.seed)
        if args.seed is not None:
            d["seed"] = args.seed
        d["threads"] = args.threads
        try:
            return StudySpec.from_dict(d)
        except (TypeError, KeyError, ValueError) as exc:
            raise StudyError(f"bad spec file: {exc}")
    try:
        dgp = DGPConfig(args.dgp, n=args.n, I=args.I, J=args.J, rho=args.rho, u_icc=args.u_icc)
    except ValueError as exc:
        raise StudyError(str(exc))
    sigmas = "estimated" if args.estimate_sigma else tuple(float(s) for s in (args.sigma or [1.0]))
    return StudySpec(dgp, taus=tuple(args.tau or [0.5]), sigmas=sigmas,
                     methods=tuple(dict.fromkeys(args.method or ["ald", "ijf"])), m=args.m,
                     seed=args.seed, chains=args.chains, warmup=args.warmup, draws=args.draws,
                     boot_b=args.boot_b, level=args.level, threads=args.threads)


def cmd_simulate(args) -> int:
    if args.seed is None and not args.spec:
        raise UsageError("simulate needs --seed")
    spec = _study_from_args(args)
    if spec.seed is None:
        raise UsageError("simulate needs --seed (or a seed in the spec file)")
    errs = spec.validate()
    if errs:
        raise StudyError("invalid study specification:\n  " + "\n  ".join(errs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    done = [0]

    def progress(_):
        done[0] += 1
        log.info("replication %d/%d", done[0], spec.m)

    res = run_study(spec, progress)
    res.to_csv(out / "results.csv")
    cfg = spec.to_dict()
    cfg.pop("threads")
    _write_manifest(out, {"subcommand": "simulate", "study": cfg,
                          "failed_replications": [list(f) for f in res.failures]})
    return EXIT_OK


# --------------------------------------------------------------------------
# Engel demo

DEMO_SIGMAS = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0)


def cmd_engel_demo(args) -> int:
    data = engel_loglog()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    taus = [as_tau(t) for t in (args.tau or [0.25, 0.5, 0.75])]
    kw = dict(chains=args.chains, warmup=args.warmup, draws=args.draws, boot_b=args.boot_b,
              level=args.level, threads=args.threads)
    records = []
    for k, tau in enumerate(taus):
        seed = args.seed + k
        records += fit_records(data, tau, ["boot"], None, seed=seed, **kw)
        records += fit_records(data, tau, ["ald", "yang", "ijf"], "mle", seed=seed, **kw)
        records += fit_records(data, tau, ["ij"], None, seed=seed, **kw)
    write_records(out / "results.csv", records, FIT_FIELDS)

    # posterior skew of the intercept against a fixed-sigma grid at tau = 0.75;
    # with a flat prior the posterior mode is the check-loss fit
    mode = fit_check_loss(data, 0.75).beta_hat[0]
    skew = []
    for i, s in enumerate(DEMO_SIGMAS):
        post = run_sampler(data, 0.75, PriorConfig.fixed(s), args.chains, args.warmup,
                           args.draws, args.seed + 100 + i, args.threads)
        b0 = post.beta[:, 0]
        skew.append({"sigma": s, "mean": float(b0.mean()), "median": float(np.median(b0)),
                     "mode": float(mode), "mean_minus_median": float(skew_diagnostic(post)[0])})
    write_records(out / "skew.csv", skew, SKEW_FIELDS)
    _write_manifest(out, {"subcommand": "engel-demo", "taus": taus, "seed": args.seed,
                          "sigma_grid": list(DEMO_SIGMAS), "units": "thousands of francs",
                          "chains": args.chains, "warmup": args.warmup, "draws": args.draws,
                          "boot_b": args.boot_b, "level": args.level})
    for r in records:
        if r["coefficient"] == "log(income)" and r["method"] == "boot":
            print(f"tau={r['tau']}: slope {r['estimate']:.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def _sigma_arg(text):
    if text == "mle":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sigma takes a positive number or 'mle', got {text!r}")
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError("--sigma must be positive")
    return v


def _threads_default():
    env = os.environ.get("QIJ_THREADS")
    return int(env) if env else None


def _common(p, *, sampler=True):
    p.add_argument("--tau", type=float, action="append", help="quantile level (repeatable)")
    if sampler:
        p.add_argument("--chains", type=int, default=4)
        p.add_argument("--warmup", type=int, default=1000)
        p.add_argument("--draws", type=int, default=1000, help="retained draws per chain")
    p.add_argument("--boot-b", type=int, default=200, help="bootstrap replicates")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=_threads_default(),
                   help="worker cap (default: QIJ_THREADS or all cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qrij", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"qrij {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a dataset")
    f.add_argument("data", help="CSV file with a header row")
    f.add_argument("--formula", required=True, help='e.g. "log(foodexp) ~ log(income)"')
    f.add_argument("--cluster", help="cluster column: clustered IJ and cluster bootstrap")
    sig = f.add_mutually_exclusive_group()
    sig.add_argument("--sigma", type=_sigma_arg, help="fixed AL scale, or 'mle'")
    sig.add_argument("--estimate-sigma", action="store_true", help="half-t(3) prior on sigma (default)")
    f.add_argument("--method", choices=FIT_METHODS, action="append")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--dump-draws", action="store_true", help="write the retained draws per tau")
    _common(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--spec", help="JSON study specification (overrides the DGP flags)")
    s.add_argument("--dgp", choices=("model1", "model2", "clustered"), default="model1")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--I", type=int, default=10, help="units per cluster")
    s.add_argument("--J", type=int, default=50, help="number of clusters")
    s.add_argument("--rho", type=float, default=0.3, help="intraclass correlation of x")
    s.add_argument("--u-icc", type=float, default=0.0,
                   help="intraclass correlation of the errors (default 0: independent)")
    sig = s.add_mutually_exclusive_group()
    sig.add_argument("--sigma", type=float, action="append", help="fixed AL scale (repeatable)")
    sig.add_argument("--estimate-sigma", action="store_true")
    s.add_argument("--method", action="append",
                   choices=("ald", "ijf", "ij", "yang", "boot", "ijf_cl", "ij_cl", "boot_cl"))
    s.add_argument("--m", type=int, default=100, help="replications")
    s.add_argument("--seed", type=int)
    s.add_argument("--level", type=float, default=0.9)
    _common(s)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("engel-demo", help="Engel food-expenditure comparison and skew table")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--level", type=float, default=0.95)
    _common(e)
    e.set_defaults(func=cmd_engel_demo)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        print("qrij: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qrij: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError, UnicodeDecodeError) as exc:
        print(f"qrij: cannot read input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DataError as exc:
        print(f"qrij: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StudyError as exc:
        print(f"qrij: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"qrij: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
