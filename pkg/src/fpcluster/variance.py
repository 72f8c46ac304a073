"""Meat matrices and classical sandwich variance estimators.

All meats are normalized by the number of sampled rows N and refer to the
variance of sqrt(N) * (theta_hat - theta*); per-coefficient standard errors
are sqrt(diag(V) / N).  Cluster meats collect the off-diagonal within-cluster
score cross products and are computed through cluster-sum outer products,
which is algebraically identical to the double sum over pairs but runs in
O(n k + C k^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data_model import ClusterIndex
from .errors import InputError, SingularHessianError

__all__ = [
    "MeatMatrix",
    "VarianceReport",
    "cluster_sums",
    "meat_ehw",
    "meat_cluster",
    "lz_meat",
    "cgm_meat",
    "cgm2_meat",
    "sandwich",
    "v_ehw",
    "v_lz_oneway",
    "v_cgm",
    "v_cgm2",
    "critical_value",
]


@dataclass(frozen=True)
class MeatMatrix:
    """Symmetric k x k meat component with a provenance label."""

    value: np.ndarray
    kind: str
    normalization: int

    def __post_init__(self):
        value = np.asarray(self.value, dtype=float)
        value = (value + value.T) / 2.0
        value.setflags(write=False)
        object.__setattr__(self, "value", value)

    def __add__(self, other):
        v = other.value if isinstance(other, MeatMatrix) else other
        return MeatMatrix(self.value + v, kind="combined", normalization=self.normalization)

    def __sub__(self, other):
        v = other.value if isinstance(other, MeatMatrix) else other
        return MeatMatrix(self.value - v, kind="combined", normalization=self.normalization)

    def __mul__(self, scalar):
        return MeatMatrix(self.value * scalar, kind=self.kind, normalization=self.normalization)

    __rmul__ = __mul__


@dataclass(frozen=True)
class VarianceReport:
    """Sandwich variance for sqrt(N)(theta_hat - theta*) and derived standard errors."""

    V: np.ndarray
    se: np.ndarray
    family: str
    dof: int
    n_obs: int
    negative_variance: bool = False
    notes: tuple[str, ...] = ()


def cluster_sums(values: np.ndarray, codes: np.ndarray, n_clusters: int) -> np.ndarray:
    """Sum rows of ``values`` (n x k) by cluster code; returns (n_clusters x k)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    k = values.shape[1]
    if k <= 16:
        out = np.empty((n_clusters, k))
        for j in range(k):
            out[:, j] = np.bincount(codes, weights=values[:, j], minlength=n_clusters)
        return out
    out = np.zeros((n_clusters, k))
    np.add.at(out, codes, values)
    return out


def _as_matrix(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    return scores


def meat_ehw(scores: np.ndarray) -> MeatMatrix:
    """Heteroskedasticity-robust meat: (1/N) sum of per-row score outer products."""
    s = _as_matrix(scores)
    if s.shape[0] == 0:
        raise InputError("meat_ehw requires at least one score row")
    n = s.shape[0]
    return MeatMatrix(s.T @ s / n, kind="ehw", normalization=n)


def _within_meat(scores: np.ndarray, codes: np.ndarray, n_clusters: int) -> np.ndarray:
    """(1/N) sum over clusters of the squared within-cluster score sums (PSD)."""
    s = _as_matrix(scores)
    sums = cluster_sums(s, codes, n_clusters)
    return sums.T @ sums / s.shape[0]


def meat_cluster(scores: np.ndarray, clusters: ClusterIndex, dim: str = "g") -> MeatMatrix:
    """Off-diagonal within-cluster cross products on ``dim`` in {'g','h','cell'}."""
    s = _as_matrix(scores)
    if s.shape[0] != clusters.n:
        raise InputError("scores and cluster index have different row counts")
    codes, count = clusters.codes(dim)
    value = _within_meat(s, codes, count) - meat_ehw(s).value
    return MeatMatrix(value, kind=f"cluster-{dim}", normalization=s.shape[0])


def lz_meat(scores: np.ndarray, clusters: ClusterIndex, dim: str = "g") -> MeatMatrix:
    """EHW plus within-cluster cross products; equals the cluster-sum outer product."""
    codes, count = clusters.codes(dim)
    return MeatMatrix(_within_meat(scores, codes, count), kind=f"lz-{dim}",
                      normalization=_as_matrix(scores).shape[0])


def cgm_meat(scores: np.ndarray, clusters: ClusterIndex) -> MeatMatrix:
    """Inclusion-exclusion two-way meat: ehw + cluster_G + cluster_H - cluster_cell."""
    s = _as_matrix(scores)
    value = (
        _within_meat(s, *clusters.codes("g"))
        + _within_meat(s, *clusters.codes("h"))
        - _within_meat(s, *clusters.codes("cell"))
    )
    return MeatMatrix(value, kind="cgm", normalization=s.shape[0])


def cgm2_meat(scores: np.ndarray, clusters: ClusterIndex) -> MeatMatrix:
    """Conservative two-way meat: 2 ehw + cluster_G + cluster_H (sum of two PSD one-way meats)."""
    s = _as_matrix(scores)
    value = _within_meat(s, *clusters.codes("g")) + _within_meat(s, *clusters.codes("h"))
    return MeatMatrix(value, kind="cgm2", normalization=s.shape[0])


def sandwich(
    meat_total,
    hessian_avg: np.ndarray | None,
    n_obs: int,
    family: str,
    dof: int,
    notes: tuple[str, ...] = (),
) -> VarianceReport:
    """Compose L^-1 meat L^-1 via symmetric solves; ``hessian_avg=None`` means identity.

    Negative diagonal entries (possible for CGM and adjusted meats) yield NaN
    standard errors and a flagged report, never a silent abs().
    """
    meat = meat_total.value if isinstance(meat_total, MeatMatrix) else np.asarray(meat_total, float)
    if hessian_avg is None:
        V = meat.copy()
    else:
        L = np.asarray(hessian_avg, dtype=float)
        cond = np.linalg.cond(L)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularHessianError(cond)
        half = np.linalg.solve(L, meat)
        V = np.linalg.solve(L, half.T).T
    V = (V + V.T) / 2.0
    diag = np.diag(V)
    negative = bool((diag < 0).any())
    with np.errstate(invalid="ignore"):
        se = np.where(diag >= 0, np.sqrt(np.maximum(diag, 0.0) / n_obs), np.nan)
    if negative:
        notes = notes + ("negative-variance",)
    return VarianceReport(
        V=V, se=se, family=family, dof=int(dof), n_obs=int(n_obs),
        negative_variance=negative, notes=notes,
    )


def v_ehw(scores, hessian_avg, dof: int, family: str = "ehw") -> VarianceReport:
    s = _as_matrix(scores)
    return sandwich(meat_ehw(s), hessian_avg, s.shape[0], family, dof)


def v_lz_oneway(scores, hessian_avg, clusters: ClusterIndex, dim: str = "g",
                small_sample: bool = False) -> VarianceReport:
    """Usual one-way CRVE: sandwich of ehw + cluster(dim); dof = C_N - 1.

    ``small_sample`` multiplies the meat by the Stata-style factor
    C/(C-1) * (N-1)/(N-k) for external comparison; the plain formulas carry
    no such correction and it is off by default.
    """
    s = _as_matrix(scores)
    n, k = s.shape
    _, count = clusters.codes(dim)
    meat = lz_meat(s, clusters, dim)
    notes: tuple[str, ...] = ()
    if small_sample:
        meat = meat * (count / (count - 1) * (n - 1) / max(n - k, 1))
        notes = ("small-sample factor applied",)
    return sandwich(meat, hessian_avg, n, f"lz-{dim}", count - 1, notes)


def _twoway_dof(clusters: ClusterIndex) -> int:
    return min(clusters.n_clusters_g, clusters.n_clusters_h) - 1


def v_cgm(scores, hessian_avg, clusters: ClusterIndex) -> VarianceReport:
    """Two-way CGM variance; may be indefinite, in which case the report is flagged."""
    s = _as_matrix(scores)
    return sandwich(cgm_meat(s, clusters), hessian_avg, s.shape[0], "cgm", _twoway_dof(clusters))


def v_cgm2(scores, hessian_avg, clusters: ClusterIndex) -> VarianceReport:
    """Two-way CGM2 variance; meat is PSD by construction."""
    s = _as_matrix(scores)
    return sandwich(cgm2_meat(s, clusters), hessian_avg, s.shape[0], "cgm2", _twoway_dof(clusters))


def critical_value(dof, level: float) -> float:
    """Student-t quantile used for confidence intervals; dof=inf gives the normal quantile."""
    if not 0.0 < level < 1.0:
        raise InputError(f"level must lie in (0, 1), got {level}")
    if np.isinf(dof):
        return float(stats.norm.ppf(level))
    if dof < 1:
        raise InputError(f"dof must be >= 1, got {dof}")
    return float(stats.t.ppf(level, dof))
