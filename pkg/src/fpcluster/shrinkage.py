"""Covariate-projection shrinkage corrections and the adjusted variance estimators.

The unidentified finite-population terms are bounded from below by projecting
per-unit scores (or their cluster sums) on fixed attributes; the projections
produce PSD adjustment meats that are subtracted from the conservative
classical meats.  Case numbering follows the one-way table (1: cluster
sampling only, 2: cluster assignment only, 3: both, 4: neither) and the
two-way table (1: two-way sampling only, 2: two-way assignment).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr as _qr

from .data_model import ClusterIndex, DesignDescriptor, ObservedDataset
from .errors import InputError, MetadataRequiredError, SingularAttributesError
from .variance import MeatMatrix, VarianceReport, cluster_sums, meat_cluster, meat_ehw, sandwich

__all__ = [
    "AdjustmentInputs",
    "AdjustedVariance",
    "delta_z",
    "delta_z_ce",
    "delta_z_dim",
    "adjusted_oneway",
    "adjusted_twoway",
    "oneway_case_for",
    "twoway_case_for",
]

_PIVOT_RTOL = 1e-10


def _with_intercept(z: np.ndarray, add_intercept: bool) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if add_intercept:
        return np.column_stack([np.ones(z.shape[0]), z])
    return z


def _project(z: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares fitted values of ``targets`` on the columns of ``z``.

    Near-singular Grams are handled by pivoted QR: columns with relative
    pivot below 1e-10 are dropped with a warning; an all-degenerate matrix
    raises.
    """
    q, r, piv = _qr(z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise SingularAttributesError(range(z.shape[1]))
    rank = int((diag > _PIVOT_RTOL * diag[0]).sum())
    if rank < z.shape[1]:
        warnings.warn(
            f"dropping {z.shape[1] - rank} collinear attribute column(s): "
            f"{sorted(piv[rank:].tolist())}",
            stacklevel=3,
        )
    q1 = q[:, :rank]
    return q1 @ (q1.T @ targets)


def delta_z(scores: np.ndarray, z_attr: np.ndarray, n_divisor: int,
            add_intercept: bool = True) -> MeatMatrix:
    """Unit-level projection meat: (1/N) * (fitted scores)' (fitted scores), PSD."""
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    z = _with_intercept(z_attr, add_intercept)
    fitted = _project(z, s)
    return MeatMatrix(fitted.T @ fitted / n_divisor, kind="shrink-z", normalization=n_divisor)


def _cluster_level(scores, z_attr, clusters: ClusterIndex, dim: str, add_intercept: bool):
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    z = _with_intercept(z_attr, add_intercept)
    codes, count = clusters.codes(dim)
    z_sum = cluster_sums(z, codes, count)
    m_sum = cluster_sums(s, codes, count)
    if z_sum.shape[1] > count:
        warnings.warn(
            f"attribute columns ({z_sum.shape[1]}) exceed sampled clusters ({count}) "
            f"on dimension {dim}; the cluster-level projection is saturated",
            stacklevel=3,
        )
    return z_sum, m_sum


def delta_z_ce(scores, z_attr, clusters: ClusterIndex, dim: str, n_divisor: int,
               add_intercept: bool = True) -> MeatMatrix:
    """Cluster-sum projection meat (1/N) sum_g (ztilde P)'(ztilde P); PSD."""
    z_sum, m_sum = _cluster_level(scores, z_attr, clusters, dim, add_intercept)
    fitted = _project(z_sum, m_sum)
    return MeatMatrix(fitted.T @ fitted / n_divisor, kind="shrink-z-ce", normalization=n_divisor)


def delta_z_dim(scores, z_attr, clusters: ClusterIndex, dim: str, m_divisor: int,
                add_intercept: bool = True, sampling_scale: float = 1.0) -> MeatMatrix:
    """Per-dimension cluster projection meat with population divisor M.

    Intended for the full-population case; when sampling accompanies two-way
    clustered assignment the caller passes ``sampling_scale = N/M`` and the
    meat is divided by it (see the two-way table remark).
    """
    if not 0.0 < sampling_scale <= 1.0:
        raise InputError("sampling_scale must lie in (0, 1]")
    z_sum, m_sum = _cluster_level(scores, z_attr, clusters, dim, add_intercept)
    fitted = _project(z_sum, m_sum)
    kind = "shrink-z-ge" if dim == "g" else "shrink-z-he"
    value = fitted.T @ fitted / (m_divisor * sampling_scale)
    return MeatMatrix(value, kind=kind, normalization=m_divisor)


@dataclass
class AdjustmentInputs:
    """Scores, attributes and population ratios needed by the adjusted estimators."""

    scores: np.ndarray
    z_attr: np.ndarray
    clusters: ClusterIndex
    n: int
    population_size: int
    total_clusters_g: int
    total_clusters_h: int
    add_intercept: bool = True
    notes: tuple[str, ...] = ()

    @classmethod
    def from_dataset(cls, data: ObservedDataset, scores: np.ndarray,
                     z_attr: np.ndarray | None = None,
                     add_intercept: bool = True) -> "AdjustmentInputs":
        notes = ("population-metadata-defaulted",) if data.metadata_defaulted else ()
        z = data.Z if z_attr is None else z_attr
        if z is None or np.asarray(z).size == 0:
            raise MetadataRequiredError("adjusted estimators need attribute columns")
        return cls(
            scores=scores, z_attr=z, clusters=data.clusters, n=data.n,
            population_size=data.population_size,
            total_clusters_g=data.total_clusters_g,
            total_clusters_h=data.total_clusters_h,
            add_intercept=add_intercept, notes=notes,
        )

    def ratio_nm(self) -> float:
        return self.n / self.population_size

    def ratio_clusters(self, dim: str) -> float:
        _, count = self.clusters.codes(dim)
        total = self.total_clusters_g if dim == "g" else self.total_clusters_h
        return count / total


@dataclass(frozen=True)
class AdjustedVariance:
    """Adjusted variance report plus the meat components actually used."""

    report: VarianceReport
    case_id: int
    components: dict[str, MeatMatrix] = field(default_factory=dict)


def oneway_case_for(design: DesignDescriptor) -> int:
    sampling = design.has_cluster_sampling
    assignment = design.has_cluster_assignment
    if sampling and assignment:
        return 3
    if assignment:
        return 2
    if sampling:
        return 1
    return 4


def twoway_case_for(design: DesignDescriptor) -> int:
    return 1 if design.sampling == "twoway-cluster" and not design.has_cluster_assignment else 2


def _check_metadata(inputs: AdjustmentInputs):
    if inputs.population_size is None:
        raise MetadataRequiredError("population size M is required for adjusted estimators")


def adjusted_oneway(inputs: AdjustmentInputs, case: int, hessian_avg: np.ndarray | None,
                    dim: str = "g") -> AdjustedVariance:
    """One-way adjusted variance per the case table (sampling/assignment combinations)."""
    if case not in (1, 2, 3, 4):
        raise InputError("one-way case must be 1, 2, 3 or 4")
    _check_metadata(inputs)
    s = inputs.scores
    ehw = meat_ehw(s)
    clu = meat_cluster(s, inputs.clusters, dim)
    rnm = inputs.ratio_nm()
    notes = inputs.notes
    components = {"ehw": ehw, f"cluster-{dim}": clu}
    if case == 1:
        dz = delta_z(s, inputs.z_attr, inputs.n, inputs.add_intercept)
        rc = inputs.ratio_clusters(dim)
        meat = ehw.value + (1.0 - rc) * clu.value - rnm * dz.value
        components["shrink-z"] = dz
    elif case in (2, 3):
        dzce = delta_z_ce(s, inputs.z_attr, inputs.clusters, dim, inputs.n, inputs.add_intercept)
        meat = ehw.value + clu.value - rnm * dzce.value
        components["shrink-z-ce"] = dzce
        if case == 3:
            notes = notes + ("cluster-sum projection applied under cluster sampling",)
    else:
        dz = delta_z(s, inputs.z_attr, inputs.n, inputs.add_intercept)
        meat = ehw.value - rnm * dz.value
        components["shrink-z"] = dz
    _, count = inputs.clusters.codes(dim)
    report = sandwich(meat, hessian_avg, inputs.n, f"adj-oneway-{dim}-case{case}",
                      count - 1, notes)
    return AdjustedVariance(report=report, case_id=case, components=components)


def adjusted_twoway(inputs: AdjustmentInputs, case: int, hessian_avg: np.ndarray | None,
                    base: str = "cgm2") -> AdjustedVariance:
    """Two-way adjusted variance; case 1 is sampling-only, case 2 assignment-based.

    ``base`` selects the unadjusted two-way meat the case-2 correction is
    applied to: 'cgm2' (the conservative default) or 'cgm'.
    """
    if case not in (1, 2):
        raise InputError("two-way case must be 1 or 2")
    if base not in ("cgm2", "cgm"):
        raise InputError("base must be 'cgm2' or 'cgm'")
    _check_metadata(inputs)
    s = inputs.scores
    clusters = inputs.clusters
    ehw = meat_ehw(s)
    clu_g = meat_cluster(s, clusters, "g")
    clu_h = meat_cluster(s, clusters, "h")
    clu_cell = meat_cluster(s, clusters, "cell")
    rnm = inputs.ratio_nm()
    notes = inputs.notes
    components = {"ehw": ehw, "cluster-g": clu_g, "cluster-h": clu_h, "cluster-cell": clu_cell}
    dof = min(clusters.n_clusters_g, clusters.n_clusters_h) - 1
    if case == 1:
        dz = delta_z(s, inputs.z_attr, inputs.n, inputs.add_intercept)
        rg = inputs.ratio_clusters("g")
        rh = inputs.ratio_clusters("h")
        meat = (
            ehw.value
            + (1.0 - rg) * (clu_g.value - clu_cell.value)
            + (1.0 - rh) * (clu_h.value - clu_cell.value)
            + (1.0 - rg * rh) * clu_cell.value
            - rnm * dz.value
        )
        components["shrink-z"] = dz
        family = "adj-twoway-case1"
    else:
        scale = rnm if rnm < 1.0 else 1.0
        dz_ge = delta_z_dim(s, inputs.z_attr, clusters, "g", inputs.population_size,
                            inputs.add_intercept, sampling_scale=scale)
        dz_he = delta_z_dim(s, inputs.z_attr, clusters, "h", inputs.population_size,
                            inputs.add_intercept, sampling_scale=scale)
        adjustment = rnm * (dz_ge.value + dz_he.value)
        if base == "cgm2":
            meat = 2.0 * ehw.value + clu_g.value + clu_h.value - adjustment
            family = "cgm2-adj"
        else:
            meat = ehw.value + clu_g.value + clu_h.value - clu_cell.value - adjustment
            family = "cgm-adj"
        components["shrink-z-ge"] = dz_ge
        components["shrink-z-he"] = dz_he
        if scale < 1.0:
            notes = notes + ("per-dimension projections rescaled by N/M under sampling",)
    report = sandwich(meat, hessian_avg, inputs.n, family, dof, notes)
    return AdjustedVariance(report=report, case_id=case, components=components)
