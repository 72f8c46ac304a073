"""Fitting of the supported M-estimators and their score/Hessian bundles.

Sign convention: per-row scores are the gradient of the unit log objective
oriented so that the sample mean score is zero at the fitted parameter
(for least squares, rows are d_i * uhat_i).  ``hessian_avg`` is the average
curvature of the minimization problem, i.e. the Jacobian of the mean
*minimization* score, which is positive definite for OLS and probit.  All
sandwich variances are invariant to a global sign flip of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr as _qr
from scipy.special import log_ndtr, ndtr

from .data_model import ClusterIndex, ObservedDataset
from .errors import (
    ConvergenceError,
    DegenerateDesignError,
    InputError,
    SeparationError,
    SingularDesignError,
)

__all__ = [
    "FittedModel",
    "ScoreBundle",
    "RegressorSpec",
    "fit_ols",
    "fit_ols_design",
    "ols_scores",
    "fit_probit",
    "fit_probit_design",
    "probit_scores",
    "fit_diff_in_means",
    "fit_one_way_fe",
    "owfe_weights",
    "twfe_residualize",
    "fit_two_way_fe",
    "fit_triple_diff",
    "generic_scores",
]

_PIVOT_RTOL = 1e-10


@dataclass(frozen=True)
class FittedModel:
    """Fitted parameter vector together with the design needed for scores."""

    theta: np.ndarray
    model_kind: str
    converged: bool
    iterations: int
    design: np.ndarray
    y: np.ndarray
    names: tuple[str, ...]
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.theta.shape[0]

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class ScoreBundle:
    """Per-row scores m_i(theta_hat) and the average curvature L_hat."""

    scores: np.ndarray
    hessian_avg: np.ndarray


@dataclass(frozen=True)
class RegressorSpec:
    """Which dataset columns enter the design matrix, in order: const, X cols, Z cols."""

    intercept: bool = True
    assignment_cols: tuple[int, ...] = (0,)
    attribute_cols: tuple[int, ...] = ()

    def build(self, data: ObservedDataset) -> tuple[np.ndarray, tuple[str, ...]]:
        cols, names = [], []
        if self.intercept:
            cols.append(np.ones(data.n))
            names.append("const")
        for j in self.assignment_cols:
            cols.append(data.X[:, j])
            names.append(data.x_names[j] if data.x_names else f"x{j}")
        for j in self.attribute_cols:
            cols.append(data.Z[:, j])
            names.append(data.z_names[j] if data.z_names else f"z{j}")
        if not cols:
            raise InputError("regressor spec selects no columns")
        return np.column_stack(cols), tuple(names)


def _rank_revealing_qr(D: np.ndarray):
    """Pivoted QR with relative-pivot rank detection."""
    q, r, piv = _qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        rank = int((diag > _PIVOT_RTOL * diag[0]).sum())
    return q, r, piv, rank


def _solve_ols(D: np.ndarray, y: np.ndarray, names: tuple[str, ...]) -> np.ndarray:
    q, r, piv, rank = _rank_revealing_qr(D)
    k = D.shape[1]
    if rank < k:
        bad = [names[j] for j in piv[rank:]]
        raise SingularDesignError(bad)
    theta_piv = np.linalg.solve(r[:k, :k], q.T @ y)
    theta = np.empty(k)
    theta[piv] = theta_piv
    return theta


def fit_ols_design(D: np.ndarray, y: np.ndarray, names=None, model_kind="ols") -> FittedModel:
    """Least squares on an explicit design matrix."""
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if names is None:
        names = tuple(f"b{j}" for j in range(D.shape[1]))
    theta = _solve_ols(D, y, tuple(names))
    return FittedModel(
        theta=theta, model_kind=model_kind, converged=True, iterations=0,
        design=D, y=y, names=tuple(names),
    )


def fit_ols(data: ObservedDataset, regressors: RegressorSpec = RegressorSpec()) -> FittedModel:
    D, names = regressors.build(data)
    return fit_ols_design(D, data.y, names)


def fit_diff_in_means(data: ObservedDataset, treatment_col: int = 0) -> FittedModel:
    """OLS on a constant and a binary treatment; slope equals the difference in means."""
    spec = RegressorSpec(intercept=True, assignment_cols=(treatment_col,), attribute_cols=())
    D, names = spec.build(data)
    return fit_ols_design(D, data.y, names, model_kind="diff-in-means")


def ols_scores(model: FittedModel) -> ScoreBundle:
    """Rows d_i * uhat_i (mean zero at the optimum) and L_hat = (1/N) D'D."""
    resid = model.y - model.design @ model.theta
    scores = model.design * resid[:, None]
    hessian = model.design.T @ model.design / model.n
    return ScoreBundle(scores=scores, hessian_avg=hessian)


def _probit_lambda(v: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Generalized residual: phi(v)(y - Phi(v)) / (Phi(v)(1 - Phi(v))), computed stably."""
    logphi = -0.5 * v * v - 0.5 * np.log(2.0 * np.pi)
    lam_pos = np.exp(logphi - log_ndtr(v))      # y = 1:  phi/Phi
    lam_neg = -np.exp(logphi - log_ndtr(-v))    # y = 0: -phi/(1-Phi)
    return np.where(y > 0.5, lam_pos, lam_neg)


def _probit_nll(v: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    ll = np.where(y > 0.5, log_ndtr(v), log_ndtr(-v))
    return float(-(w * ll).sum())


def fit_probit_design(
    D: np.ndarray,
    y: np.ndarray,
    names=None,
    max_iter: int = 100,
    tol: float = 1e-8,
    weights: np.ndarray | None = None,
) -> FittedModel:
    """Newton-Raphson with step halving on the probit log likelihood, started at zero.

    ``weights`` supports exact population-moment solves (mixture expectations);
    they rescale the objective and do not change the convergence criterion.
    """
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if not np.isin(y, (0.0, 1.0)).all():
        raise InputError("probit outcome must be binary 0/1")
    if names is None:
        names = tuple(f"b{j}" for j in range(D.shape[1]))
    _, _, piv, rank = _rank_revealing_qr(D)
    if rank < D.shape[1]:
        raise SingularDesignError([names[j] for j in piv[rank:]])
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    wsum = w.sum()

    theta = np.zeros(D.shape[1])
    v = D @ theta
    nll = _probit_nll(v, y, w)
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        lam = _probit_lambda(v, y)
        grad = D.T @ (w * lam) / wsum                     # mean log-likelihood gradient
        grad_norm = float(np.abs(grad).max())
        if grad_norm <= tol:
            p = ndtr(v)
            if np.abs(y - p).max() < 1e-6:
                raise SeparationError(
                    "all outcomes perfectly predicted at the stationary point; "
                    "the probit MLE does not exist"
                )
            extra = {"weights": weights, "perfect_rows": int((np.abs(y - p) < 1e-8).sum())}
            return FittedModel(
                theta=theta, model_kind="probit", converged=True, iterations=it - 1,
                design=D, y=y, names=tuple(names), extra=extra,
            )
        curv = lam * (lam + v)                            # observed information weight, > 0
        H = D.T @ (D * (w * curv)[:, None]) / wsum
        step = np.linalg.solve(H, grad)
        scale = 1.0
        for _ in range(40):
            cand = theta + scale * step
            v_cand = D @ cand
            nll_cand = _probit_nll(v_cand, y, w)
            if nll_cand <= nll + 1e-14 * abs(nll):
                break
            scale /= 2.0
        theta, v, nll = cand, v_cand, nll_cand
        if np.abs(theta).max() > 1e3:
            raise SeparationError(
                "probit estimates diverging (|theta| > 1e3); "
                "perfect separation on the regressors"
            )
    raise ConvergenceError(grad_norm, max_iter)


def fit_probit(
    data: ObservedDataset,
    regressors: RegressorSpec = RegressorSpec(),
    max_iter: int = 100,
    tol: float = 1e-8,
) -> FittedModel:
    D, names = regressors.build(data)
    return fit_probit_design(D, data.y, names, max_iter=max_iter, tol=tol)


def probit_scores(model: FittedModel) -> ScoreBundle:
    """Rows d_i * lambda_i and the observed-information average curvature.

    ``hessian_avg`` is the Jacobian of the mean minimization score, equal to
    (1/N) sum lambda_i (lambda_i + v_i) d_i'd_i; it is positive definite and
    matches a finite-difference Jacobian of the mean score up to sign.
    """
    v = model.design @ model.theta
    lam = _probit_lambda(v, model.y)
    scores = model.design * lam[:, None]
    curv = lam * (lam + v)
    hessian = model.design.T @ (model.design * curv[:, None]) / model.n
    return ScoreBundle(scores=scores, hessian_avg=hessian)


def _dummy_columns(codes: np.ndarray, count: int, prefix: str, drop_first=True):
    """Indicator columns for levels 1..count-1 (reference level 0 dropped)."""
    start = 1 if drop_first else 0
    cols = [(codes == level).astype(float) for level in range(start, count)]
    names = [f"{prefix}{level}" for level in range(start, count)]
    return cols, names


def _prune_collinear(D: np.ndarray, names: list[str], keep_first: int = 0):
    """Drop trailing collinear columns (never the first ``keep_first``) via pivoted QR."""
    _, _, piv, rank = _rank_revealing_qr(D)
    if rank == D.shape[1]:
        return D, tuple(names)
    keep = sorted(set(piv[:rank]) | set(range(keep_first)))
    return D[:, keep], tuple(names[j] for j in keep)


def fit_one_way_fe(data: ObservedDataset, treatment_col: int = 0, fe_dim: str = "g") -> FittedModel:
    """Within estimator: tau = sum Y (X - Xbar_c) / sum X (X - Xbar_c) on ``fe_dim``.

    The full coefficient vector (treatment followed by the intercept and
    cluster dummies) comes from the equivalent dummy regression; its first
    entry coincides with the ratio.
    """
    x = data.X[:, treatment_col].astype(float)
    codes, count = data.clusters.codes(fe_dim)
    sizes = np.bincount(codes, minlength=count).astype(float)
    xbar = (np.bincount(codes, weights=x, minlength=count) / sizes)[codes]
    demeaned = x - xbar
    denom = float(x @ demeaned)
    if abs(denom) <= 1e-12 * max(1.0, float(np.abs(x).sum())):
        raise DegenerateDesignError("no within-cluster treatment variation")
    tau_ratio = float(data.y @ demeaned) / denom

    cols = [x, np.ones(data.n)]
    names = ["tau", "const"]
    dcols, dnames = _dummy_columns(codes, count, f"fe_{fe_dim}")
    cols += dcols
    names += dnames
    D, names = _prune_collinear(np.column_stack(cols), names, keep_first=1)
    model = fit_ols_design(D, data.y, names, model_kind="one-way-fe")
    model.extra["tau_ratio"] = tau_ratio
    model.extra["fe_dim"] = fe_dim
    return model


def owfe_weights(clusters: ClusterIndex, mu_a: float, mu_b: float) -> np.ndarray:
    """Per-unit estimand weights of the one-way FE estimator under product assignment.

    omega_i = mu_A mu_B (1 - (M_cell + (M_g - M_cell) mu_B) / M_g), evaluated on
    the population cluster layout; all weights are nonnegative for mu_B in [0,1].
    """
    if not (0.0 <= mu_a <= 1.0 and 0.0 <= mu_b <= 1.0):
        raise InputError("mu_a and mu_b must lie in [0, 1]")
    cell_sizes = np.bincount(clusters.cell_codes, minlength=clusters.n_cells)
    m_cell = cell_sizes[clusters.cell_codes].astype(float)
    m_g = clusters.sizes_g[clusters.g].astype(float)
    return mu_a * mu_b * (1.0 - (m_cell + (m_g - m_cell) * mu_b) / m_g)


def twfe_residualize(x: np.ndarray, clusters: ClusterIndex) -> np.ndarray:
    """Two-way within transform: x - mean_g - mean_h + grand mean.

    Exact residualization against the two dummy sets only for balanced
    layouts; unbalanced grids should go through the dummy regression in
    ``fit_two_way_fe``.
    """
    x = np.asarray(x, dtype=float)
    mean_g = (cluster_sums_1d(x, clusters.g, clusters.n_clusters_g)
              / clusters.sizes_g)[clusters.g]
    mean_h = (cluster_sums_1d(x, clusters.h, clusters.n_clusters_h)
              / clusters.sizes_h)[clusters.h]
    return x - mean_g - mean_h + x.mean()


def cluster_sums_1d(values: np.ndarray, codes: np.ndarray, count: int) -> np.ndarray:
    return np.bincount(codes, weights=values, minlength=count)


def is_balanced_grid(clusters: ClusterIndex) -> bool:
    """True when every (g, h) intersection cell has the same size and all cells exist."""
    sizes = np.bincount(clusters.cell_codes, minlength=clusters.n_cells)
    full = clusters.n_cells == clusters.n_clusters_g * clusters.n_clusters_h
    return full and sizes.min() == sizes.max()


def fit_two_way_fe(data: ObservedDataset, treatment_col: int = 0) -> FittedModel:
    """TWFE ratio estimator; closed-form transform on balanced grids, dummies otherwise."""
    x = data.X[:, treatment_col].astype(float)
    balanced = is_balanced_grid(data.clusters)
    cols = [x, np.ones(data.n)]
    names = ["tau", "const"]
    for dim in ("g", "h"):
        codes, count = data.clusters.codes(dim)
        dcols, dnames = _dummy_columns(codes, count, f"fe_{dim}")
        cols += dcols
        names += dnames
    D, names = _prune_collinear(np.column_stack(cols), names, keep_first=1)
    model = fit_ols_design(D, data.y, names, model_kind="two-way-fe")
    if balanced:
        xt = twfe_residualize(x, data.clusters)
        denom = float(xt @ x)
        if abs(denom) <= 1e-12 * max(1.0, float(np.abs(x).sum())):
            raise DegenerateDesignError("no two-way within variation in the treatment")
        model.extra["tau_ratio"] = float(xt @ data.y) / denom
        model.extra["method"] = "within-transform"
    else:
        model.extra["tau_ratio"] = float(model.theta[0])
        model.extra["method"] = "dummy-regression"
    return model


def _triple_diff_basis(clusters: ClusterIndex, t_codes: np.ndarray, n_t: int):
    """Full-rank basis spanning the alpha_gh, gamma_ht and delta_gt dummy sets."""
    n = clusters.n
    cols = [np.ones(n)]
    names = ["const"]
    cell_cols, cell_names = _dummy_columns(clusters.cell_codes, clusters.n_cells, "cell")
    cols += cell_cols
    names += cell_names
    t_cols, t_names = _dummy_columns(t_codes, n_t, "t")
    cols += t_cols
    names += t_names
    for dim in ("h", "g"):
        codes, count = clusters.codes(dim)
        for level_t in range(1, n_t):
            mask_t = (t_codes == level_t).astype(float)
            for level_c in range(1, count):
                cols.append(((codes == level_c).astype(float)) * mask_t)
                names.append(f"{dim}{level_c}xt{level_t}")
    return np.column_stack(cols), names


def fit_triple_diff(data: ObservedDataset, treatment_col: int = 0) -> FittedModel:
    """OLS of y on D plus group-stratum, stratum-time and group-time fixed effects.

    The treatment coefficient is computed by residualizing D on the dummy
    space (invariant to the reference-level choice); collinear dummy columns
    are pruned so that the stored design has full rank.
    """
    if data.period is None:
        raise InputError("triple-differences estimation requires a period column")
    t_vals, t_codes = np.unique(data.period, return_inverse=True)
    n_t = t_vals.shape[0]
    if n_t < 2:
        raise InputError("triple-differences estimation requires two or more periods")
    d = data.X[:, treatment_col].astype(float)
    basis, basis_names = _triple_diff_basis(data.clusters, t_codes, n_t)
    basis, basis_names = _prune_collinear(basis, basis_names)
    coef, _, _, _ = np.linalg.lstsq(basis, d, rcond=None)
    d_tilde = d - basis @ coef
    denom = float(d_tilde @ d_tilde)
    if denom <= 1e-10 * max(1.0, float(d @ d)):
        raise SingularDesignError(["treatment"], "treatment indicator collinear with the dummy sets")
    names = ("tau",) + tuple(basis_names)
    model = fit_ols_design(np.column_stack([d, basis]), data.y, names, model_kind="triple-diff")
    model.extra["tau_fwl"] = float(d_tilde @ data.y) / denom
    return model


def generic_scores(model: FittedModel) -> ScoreBundle:
    """Dispatch to the model-specific score construction."""
    if model.model_kind == "probit":
        return probit_scores(model)
    return ols_scores(model)
