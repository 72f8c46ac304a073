"""Average partial effects for probit with delta-method adjusted residuals.

The APE residual psi_i = f_i(theta_hat) - gamma_hat + F_hat L_hat^{-1} s_i
(with s_i the mean-zero score rows of this package's sign convention) folds
the estimation error of theta_hat into the per-unit contributions, so every
variance family is computed on psi directly with no outer sandwich.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .data_model import ClusterIndex
from .errors import InputError
from .mestimation import FittedModel, probit_scores
from .shrinkage import AdjustmentInputs, adjusted_oneway, adjusted_twoway
from .variance import (
    VarianceReport,
    cgm2_meat,
    cgm_meat,
    lz_meat,
    meat_ehw,
    sandwich,
)

__all__ = ["ApeResult", "probit_ape_binary", "generic_ape", "ape_variance", "ape_adjustment_inputs"]


def _phi(v: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * v * v) / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ApeResult:
    """Point estimate, adjusted residuals and Jacobian average of an APE."""

    gamma: np.ndarray
    psi: np.ndarray
    f_values: np.ndarray
    F_hat: np.ndarray


def _assemble(f_values: np.ndarray, grads: np.ndarray, bundle) -> ApeResult:
    f_values = f_values if f_values.ndim == 2 else f_values[:, None]
    n = f_values.shape[0]
    gamma = f_values.mean(axis=0)
    F_hat = grads.reshape(n, f_values.shape[1], -1).mean(axis=0)
    correction = bundle.scores @ np.linalg.solve(bundle.hessian_avg, F_hat.T)
    psi = f_values - gamma + correction
    return ApeResult(gamma=gamma, psi=psi, f_values=f_values, F_hat=F_hat)


def probit_ape_binary(model: FittedModel, treatment_col: int, treated_only: bool = False) -> ApeResult:
    """Difference of probit probabilities at treatment 1 versus 0, averaged over units.

    ``treated_only`` restricts the averaging set to the treated rows (the
    treated-units variant); the delta-method gradient treats the realized
    share of treated rows as fixed.
    """
    if model.model_kind != "probit":
        raise InputError("probit_ape_binary requires a fitted probit model")
    D = np.asarray(model.design)
    d1 = D.copy()
    d0 = D.copy()
    d1[:, treatment_col] = 1.0
    d0[:, treatment_col] = 0.0
    v1 = d1 @ model.theta
    v0 = d0 @ model.theta
    f = ndtr(v1) - ndtr(v0)
    grads = _phi(v1)[:, None] * d1 - _phi(v0)[:, None] * d0
    if treated_only:
        treated = D[:, treatment_col] > 0.5
        if not treated.any():
            raise InputError("treated_only requested but no treated rows present")
        w = treated * (model.n / treated.sum())
        f = f * w
        grads = grads * w[:, None]
    return _assemble(f, grads, probit_scores(model))


def generic_ape(f_values: np.ndarray, f_grads: np.ndarray, bundle) -> ApeResult:
    """APE machinery for a caller-supplied f and its gradient (n x q and n x q x k)."""
    f_values = np.asarray(f_values, dtype=float)
    f_grads = np.asarray(f_grads, dtype=float)
    return _assemble(f_values, f_grads, bundle)


def ape_adjustment_inputs(ape: ApeResult, z_attr, clusters: ClusterIndex, n: int,
                          population_size: int, total_clusters_g: int, total_clusters_h: int,
                          add_intercept: bool = True) -> AdjustmentInputs:
    """Shrinkage inputs with the APE residuals playing the role of the scores."""
    return AdjustmentInputs(
        scores=ape.psi, z_attr=z_attr, clusters=clusters, n=n,
        population_size=population_size, total_clusters_g=total_clusters_g,
        total_clusters_h=total_clusters_h, add_intercept=add_intercept,
    )


def ape_variance(ape: ApeResult, clusters: ClusterIndex, family: str,
                 shrink: AdjustmentInputs | None = None) -> VarianceReport:
    """Variance report for the APE under the requested family.

    Families mirror the coefficient-level estimators evaluated on psi:
    'ehw', 'lz-g', 'lz-h', 'cgm', 'cgm2', 'adj-oneway-<dim>-case<c>',
    'cgm-adj', 'cgm2-adj', 'adj-twoway-case1'.  Adjusted families require
    ``shrink`` built by :func:`ape_adjustment_inputs`.
    """
    psi = ape.psi
    n = psi.shape[0]
    dof_two = min(clusters.n_clusters_g, clusters.n_clusters_h) - 1
    if family == "ehw":
        return sandwich(meat_ehw(psi), None, n, "ehw", dof_two)
    if family in ("lz-g", "lz-h"):
        dim = family[-1]
        _, count = clusters.codes(dim)
        return sandwich(lz_meat(psi, clusters, dim), None, n, family, count - 1)
    if family == "cgm":
        return sandwich(cgm_meat(psi, clusters), None, n, "cgm", dof_two)
    if family == "cgm2":
        return sandwich(cgm2_meat(psi, clusters), None, n, "cgm2", dof_two)
    if shrink is None:
        raise InputError(f"family {family!r} needs shrinkage inputs (see ape_adjustment_inputs)")
    if family.startswith("adj-oneway-"):
        dim = family.split("-")[2]
        case = int(family.rsplit("case", 1)[1])
        return adjusted_oneway(shrink, case, None, dim=dim).report
    if family == "cgm-adj":
        return adjusted_twoway(shrink, 2, None, base="cgm").report
    if family == "cgm2-adj":
        return adjusted_twoway(shrink, 2, None, base="cgm2").report
    if family == "adj-twoway-case1":
        return adjusted_twoway(shrink, 1, None).report
    raise InputError(f"unknown APE variance family {family!r}")
