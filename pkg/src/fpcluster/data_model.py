"""Population/sample structure shared by estimation and simulation.

Rows carry a cluster label on two dimensions (G and H).  One-way clustered
data is represented with ``h == g`` so that all downstream variance code has
a single path.  Labels are canonicalized to dense integer codes in order of
first appearance.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InputError

__all__ = [
    "ClusterIndex",
    "ObservedDataset",
    "DesignDescriptor",
    "canonicalize",
    "intersection_cells",
    "make_dataset",
]


def _dense_codes(labels) -> tuple[np.ndarray, int]:
    """Relabel arbitrary hashable labels to 0..C-1 in first-appearance order."""
    mapping: dict = {}
    codes = np.empty(len(labels), dtype=np.intp)
    for i, lab in enumerate(labels):
        codes[i] = mapping.setdefault(lab, len(mapping))
    return codes, len(mapping)


@dataclass(frozen=True)
class ClusterIndex:
    """Dense per-row cluster codes on the G and H dimensions.

    Immutable after construction; safe to share across threads.
    """

    g: np.ndarray
    h: np.ndarray
    n_clusters_g: int
    n_clusters_h: int

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.intp)
        h = np.asarray(self.h, dtype=np.intp)
        if g.shape != h.shape or g.ndim != 1:
            raise InputError("cluster code vectors must be equal-length 1-d arrays")
        if g.size == 0:
            raise InputError("cluster index requires at least one row")
        for codes, count, name in ((g, self.n_clusters_g, "g"), (h, self.n_clusters_h, "h")):
            if count <= 0:
                raise InputError(f"cluster count on {name} must be positive")
            if codes.min() < 0 or codes.max() >= count:
                raise InputError(f"cluster codes on {name} out of range 0..{count - 1}")
            if np.bincount(codes, minlength=count).min() == 0:
                raise InputError(f"empty cluster on dimension {name}")
        g.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)

    @classmethod
    def from_labels(cls, g_labels, h_labels=None) -> "ClusterIndex":
        return canonicalize(g_labels, h_labels)

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @cached_property
    def sizes_g(self) -> np.ndarray:
        return np.bincount(self.g, minlength=self.n_clusters_g)

    @cached_property
    def sizes_h(self) -> np.ndarray:
        return np.bincount(self.h, minlength=self.n_clusters_h)

    @cached_property
    def cell_codes(self) -> np.ndarray:
        """Dense codes for the nonempty (g, h) intersection cells."""
        combined = self.g * self.n_clusters_h + self.h
        _, inverse = np.unique(combined, return_inverse=True)
        inverse = inverse.astype(np.intp)
        inverse.setflags(write=False)
        return inverse

    @cached_property
    def n_cells(self) -> int:
        return int(self.cell_codes.max()) + 1 if self.n else 0

    def codes(self, dim: str) -> tuple[np.ndarray, int]:
        """Return (codes, count) for dim in {'g', 'h', 'cell'}."""
        if dim == "g":
            return self.g, self.n_clusters_g
        if dim == "h":
            return self.h, self.n_clusters_h
        if dim == "cell":
            return self.cell_codes, self.n_cells
        raise InputError(f"unknown cluster dimension {dim!r}")


def canonicalize(raw_g_labels, raw_h_labels=None) -> ClusterIndex:
    """Relabel raw cluster labels to dense codes; missing h means one-way (h := g)."""
    if raw_h_labels is not None and len(raw_g_labels) != len(raw_h_labels):
        raise InputError(
            f"cluster label vectors have mismatched lengths "
            f"({len(raw_g_labels)} vs {len(raw_h_labels)})"
        )
    g, n_g = _dense_codes(raw_g_labels)
    if raw_h_labels is None:
        return ClusterIndex(g=g, h=g.copy(), n_clusters_g=n_g, n_clusters_h=n_g)
    h, n_h = _dense_codes(raw_h_labels)
    return ClusterIndex(g=g, h=h, n_clusters_g=n_g, n_clusters_h=n_h)


def intersection_cells(index: ClusterIndex) -> dict[tuple[int, int], np.ndarray]:
    """Partition row ids into the nonempty (g, h) intersection cells."""
    cells: dict[tuple[int, int], list[int]] = {}
    for i, (g, h) in enumerate(zip(index.g.tolist(), index.h.tolist())):
        cells.setdefault((g, h), []).append(i)
    return {key: np.asarray(rows, dtype=np.intp) for key, rows in cells.items()}


@dataclass(frozen=True)
class ObservedDataset:
    """Sampled rows plus the population bookkeeping needed for finite-population corrections.

    ``X`` holds the assignment columns, ``Z`` the fixed attributes.  Population
    size and total cluster counts default to the sample quantities (the
    full-population case); ``metadata_defaulted`` records that the defaults
    were used.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    clusters: ClusterIndex
    population_size: int
    total_clusters_g: int
    total_clusters_h: int
    metadata_defaulted: bool = False
    period: np.ndarray | None = None
    x_names: tuple[str, ...] | None = None
    z_names: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Z = np.zeros((y.shape[0], 0)) if self.Z is None else np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        n = y.shape[0]
        if X.shape[0] != n or Z.shape[0] != n or self.clusters.n != n:
            raise InputError("y, X, Z and cluster codes must have the same number of rows")
        if n > self.population_size:
            raise InputError(f"sample size {n} exceeds population size {self.population_size}")
        if self.clusters.n_clusters_g > self.total_clusters_g:
            raise InputError("sampled G-cluster count exceeds the population total")
        if self.clusters.n_clusters_h > self.total_clusters_h:
            raise InputError("sampled H-cluster count exceeds the population total")
        if self.period is not None:
            period = np.asarray(self.period)
            if period.shape[0] != n:
                raise InputError("period column length mismatch")
            object.__setattr__(self, "period", period)
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def sampled_clusters_g(self) -> int:
        return self.clusters.n_clusters_g

    @property
    def sampled_clusters_h(self) -> int:
        return self.clusters.n_clusters_h


def make_dataset(
    y,
    x,
    z=None,
    g=None,
    h=None,
    *,
    population_size=None,
    total_clusters_g=None,
    total_clusters_h=None,
    period=None,
    x_names=None,
    z_names=None,
) -> ObservedDataset:
    """Build an ObservedDataset from raw columns, canonicalizing cluster labels."""
    if g is None:
        raise InputError("a G-dimension cluster label vector is required")
    clusters = canonicalize(g, h)
    n = len(np.asarray(y).reshape(-1))
    defaulted = population_size is None or total_clusters_g is None or (
        h is not None and total_clusters_h is None
    )
    return ObservedDataset(
        y=y,
        X=x,
        Z=z,
        clusters=clusters,
        population_size=n if population_size is None else int(population_size),
        total_clusters_g=clusters.n_clusters_g if total_clusters_g is None else int(total_clusters_g),
        total_clusters_h=clusters.n_clusters_h if total_clusters_h is None else int(total_clusters_h),
        metadata_defaulted=bool(defaulted),
        period=period,
        x_names=tuple(x_names) if x_names is not None else None,
        z_names=tuple(z_names) if z_names is not None else None,
    )


_SAMPLING_KINDS = ("population", "unit-bernoulli", "oneway-cluster", "twoway-cluster")
_ASSIGNMENT_KINDS = ("independent", "oneway-g", "oneway-h", "twoway", "intersection")


@dataclass(frozen=True)
class DesignDescriptor:
    """Sampling and assignment design of the data-generating process."""

    sampling: str = "population"
    assignment: str = "independent"
    rho_u: float = 1.0
    rho_g: float = 1.0
    rho_h: float = 1.0

    def __post_init__(self):
        if self.sampling not in _SAMPLING_KINDS:
            raise InputError(f"sampling must be one of {_SAMPLING_KINDS}")
        if self.assignment not in _ASSIGNMENT_KINDS:
            raise InputError(f"assignment must be one of {_ASSIGNMENT_KINDS}")
        for name in ("rho_u", "rho_g", "rho_h"):
            rho = getattr(self, name)
            if not 0.0 < rho <= 1.0:
                raise InputError(f"{name} must lie in (0, 1], got {rho}")
        all_one = self.rho_u == self.rho_g == self.rho_h == 1.0
        if (self.sampling == "population") != all_one:
            raise InputError("sampling='population' if and only if all probabilities equal 1")

    @property
    def has_cluster_sampling(self) -> bool:
        return self.sampling in ("oneway-cluster", "twoway-cluster")

    @property
    def has_cluster_assignment(self) -> bool:
        return self.assignment != "independent"
