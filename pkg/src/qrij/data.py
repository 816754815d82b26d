"""Regression data container and bundled datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np


class DataError(ValueError):
    """Raised for malformed regression data."""


@dataclass(frozen=True)
class RegressionData:
    """Response ``y``, design matrix ``X`` and optional cluster labels.

    Cluster labels are relabelled densely to ``0..J-1`` in sorted order of the
    original labels, so labels ``0..n-1`` on units ``0..n-1`` are kept as-is.
    """

    y: np.ndarray
    X: np.ndarray
    cluster: np.ndarray | None = None
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError(f"X has shape {X.shape}, expected ({y.shape[0]}, p)")
        n, p = X.shape
        if p < 1:
            raise DataError("design matrix has no columns")
        if n < p:
            raise DataError(f"n={n} is smaller than p={p}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise DataError("non-finite values in y or X")
        cluster = self.cluster
        if cluster is not None:
            cluster = np.asarray(cluster).reshape(-1)
            if cluster.shape[0] != n:
                raise DataError("cluster labels must have length n")
            _, cluster = np.unique(cluster, return_inverse=True)
            cluster = cluster.astype(np.intp)
            if cluster.max() + 1 < 2:
                raise DataError("cluster labels must define at least 2 groups")
        names = tuple(self.names) if self.names else tuple(f"x{j}" for j in range(p))
        if len(names) != p:
            raise DataError("names must have one entry per column of X")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "cluster", cluster)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_clusters(self) -> int | None:
        if self.cluster is None:
            return None
        return int(self.cluster.max()) + 1

    def has_full_rank(self) -> bool:
        return np.linalg.matrix_rank(self.X) == self.p

    def take(self, idx) -> RegressionData:
        """Rows ``idx`` as a new dataset (cluster labels dropped)."""
        idx = np.asarray(idx)
        return RegressionData(self.y[idx], self.X[idx], None, self.names)


def load_engel() -> dict[str, np.ndarray]:
    """Engel's 235 household records: annual ``income`` and ``foodexp``."""
    text = resources.files("qrij").joinpath("data/engel.csv").read_text("utf-8")
    arr = np.loadtxt(text.splitlines(), delimiter=",", skiprows=1)
    return {"income": arr[:, 0], "foodexp": arr[:, 1]}


def engel_loglog(unit: float = 1000.0) -> RegressionData:
    """log(foodexp / unit) on an intercept and log(income / unit).

    The bundled values are in Belgian francs; the default ``unit`` expresses
    them in thousands of francs. The slope does not depend on ``unit``, the
    intercept does.
    """
    d = load_engel()
    X = np.column_stack([np.ones(d["income"].size), np.log(d["income"] / unit)])
    return RegressionData(np.log(d["foodexp"] / unit), X, names=("intercept", "log(income)"))
