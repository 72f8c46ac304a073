"""Replication driver producing the simulation summary tables.

Each replication redraws the cluster assignment (the population attributes
stay fixed), refits the design's estimator, and records the point estimates
and every requested standard error.  Aggregation is a commutative reduction
over per-replication records, so results are independent of worker count and
a study can be reproduced from (seed, replication range) partitions.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import dgp
from .ape import ape_adjustment_inputs, ape_variance, probit_ape_binary
from .data_model import ClusterIndex
from .errors import InputError, StudyError
from .mestimation import fit_ols_design, fit_probit_design, ols_scores, probit_scores
from .shrinkage import AdjustmentInputs, adjusted_oneway, adjusted_twoway
from .variance import critical_value, v_cgm, v_cgm2, v_ehw, v_lz_oneway

__all__ = [
    "DESIGN_TARGETS",
    "DESIGN_FAMILIES",
    "ReplicationRecords",
    "SummaryTable",
    "run_study",
    "replication_records",
    "summarize",
    "coverage",
    "truth_for",
]

DESIGN_TARGETS = {
    "probit-oneway": ("coef", "ape"),
    "probit-twoway": ("coef", "ape"),
    "twovar-1": ("x_g", "x_h"),
    "twovar-2": ("x_g", "x_h"),
    "tripled-1": ("tau",),
    "tripled-2": ("tau",),
}

DESIGN_FAMILIES = {
    "probit-oneway": ("ehw", "lz-g", "adj-oneway-g-case2"),
    "probit-twoway": (
        "ehw", "lz-g", "adj-oneway-g-case2", "lz-h", "adj-oneway-h-case2",
        "cgm", "cgm-adj", "cgm2", "cgm2-adj",
    ),
    "twovar-1": ("ehw", "lz-g", "lz-h", "cgm", "cgm2"),
    "twovar-2": ("ehw", "lz-g", "lz-h", "cgm", "cgm2"),
    "tripled-1": ("ehw", "lz-g", "lz-h", "cgm2", "cgm2-adj"),
    "tripled-2": ("ehw", "lz-g", "lz-h", "cgm2", "cgm2-adj"),
}


def family_dof(family: str, clusters: ClusterIndex) -> int:
    """t critical-value dof: C_N - 1 on one-way families, min(G_N, H_N) - 1 otherwise."""
    if family == "lz-g" or family.startswith("adj-oneway-g"):
        return clusters.n_clusters_g - 1
    if family == "lz-h" or family.startswith("adj-oneway-h"):
        return clusters.n_clusters_h - 1
    return min(clusters.n_clusters_g, clusters.n_clusters_h) - 1


# ---------------------------------------------------------------------------
# Per-design replication functions
# ---------------------------------------------------------------------------

def _coef_report(family, bundle, clusters, inputs_factory):
    if family == "ehw":
        return v_ehw(bundle.scores, bundle.hessian_avg,
                     min(clusters.n_clusters_g, clusters.n_clusters_h) - 1)
    if family in ("lz-g", "lz-h"):
        return v_lz_oneway(bundle.scores, bundle.hessian_avg, clusters, family[-1])
    if family == "cgm":
        return v_cgm(bundle.scores, bundle.hessian_avg, clusters)
    if family == "cgm2":
        return v_cgm2(bundle.scores, bundle.hessian_avg, clusters)
    if family.startswith("adj-oneway-"):
        dim = family.split("-")[2]
        case = int(family.rsplit("case", 1)[1])
        return adjusted_oneway(inputs_factory(), case, bundle.hessian_avg, dim=dim).report
    if family == "cgm-adj":
        return adjusted_twoway(inputs_factory(), 2, bundle.hessian_avg, base="cgm").report
    if family == "cgm2-adj":
        return adjusted_twoway(inputs_factory(), 2, bundle.hessian_avg, base="cgm2").report
    raise InputError(f"unknown variance family {family!r}")


def _replicate_probit(pop: dgp.ProbitPopulation, rep: int, families, targets):
    x = dgp.draw_assignment(pop, rep)
    y = dgp.realize_probit(pop, x)
    design = np.column_stack([np.ones(pop.size), x, pop.z])
    model = fit_probit_design(design, y, names=("const", "x", "z"))
    bundle = probit_scores(model)
    clusters = pop.clusters
    z_attr = pop.z[:, None]

    def inputs():
        return AdjustmentInputs(
            scores=bundle.scores, z_attr=z_attr, clusters=clusters, n=pop.size,
            population_size=pop.size, total_clusters_g=clusters.n_clusters_g,
            total_clusters_h=clusters.n_clusters_h,
        )

    estimates, ses = {}, {}
    if "coef" in targets:
        estimates["coef"] = float(model.theta[1])
        for family in families:
            report = _coef_report(family, bundle, clusters, inputs)
            ses[(family, "coef")] = float(report.se[1])
    if "ape" in targets:
        ape = probit_ape_binary(model, treatment_col=1)
        estimates["ape"] = float(ape.gamma[0])
        shrink = ape_adjustment_inputs(
            ape, z_attr, clusters, pop.size, pop.size,
            clusters.n_clusters_g, clusters.n_clusters_h,
        )
        for family in families:
            report = ape_variance(ape, clusters, family, shrink=shrink)
            ses[(family, "ape")] = float(report.se[0])
    return estimates, ses


def _replicate_twovar(pop: dgp.TwoVarPopulation, rep: int, families, targets):
    x_g, x_h = dgp.draw_assignment(pop, rep)
    y = pop.tau1 * x_g + pop.tau2 * x_h + pop.e
    design = np.column_stack([np.ones(pop.size), x_g, x_h])
    model = fit_ols_design(design, y, names=("const", "x_g", "x_h"))
    bundle = ols_scores(model)
    clusters = pop.clusters
    estimates = {"x_g": float(model.theta[1]), "x_h": float(model.theta[2])}
    ses = {}

    def no_inputs():
        raise InputError("adjusted families are not wired for the two-variable designs")

    for family in families:
        report = _coef_report(family, bundle, clusters, no_inputs)
        for target, idx in (("x_g", 1), ("x_h", 2)):
            if target in targets:
                ses[(family, target)] = float(report.se[idx])
    return {t: estimates[t] for t in targets}, ses


def _two_way_demean(grid: np.ndarray) -> np.ndarray:
    return (grid - grid.mean(axis=1, keepdims=True) - grid.mean(axis=0, keepdims=True)
            + grid.mean())


def tripled_fwl_stats(pop: dgp.TripleDiffPopulation, d_g: np.ndarray, d_h: np.ndarray,
                      families) -> tuple[float, dict]:
    """Point estimate and standard errors of the triple-differences regression.

    Uses the Frisch-Waugh reduction of the two-period dummy regression to a
    balanced two-way grid: the treatment coefficient, residuals and per-row
    scores of the full regression have closed forms in grid arrays, which the
    test suite verifies against the explicit dummy regression.
    """
    spec = pop.spec
    n_g, n_h = spec.n_clusters_g, spec.n_clusters_h
    q = np.outer(d_g, d_h)
    q_tilde = np.outer(d_g - d_g.mean(), d_h - d_h.mean())
    denom = float((q_tilde * q_tilde).sum())
    if denom <= 0.0:
        raise InputError("degenerate assignment draw: no two-way variation in the treatment")
    tau_grid = pop.tau.reshape(n_g, n_h)
    deps = (pop.eps[:, 1] - pop.eps[:, 0]).reshape(n_g, n_h)
    dy = tau_grid * q + deps
    tau_hat = float((q_tilde * dy).sum() / denom)
    resid = _two_way_demean(dy) - tau_hat * q_tilde

    n_rows = 2 * pop.size
    cell_score = q_tilde * resid / 4.0       # identical per-row score in both periods
    hessian = denom / 2.0 / n_rows           # (1/n) sum of squared residualized D rows
    sq = float((cell_score ** 2).sum())
    meat_ehw = 2.0 * sq / n_rows
    sums_g = 2.0 * cell_score.sum(axis=1)
    sums_h = 2.0 * cell_score.sum(axis=0)
    within_g = float((sums_g ** 2).sum()) / n_rows
    within_h = float((sums_h ** 2).sum()) / n_rows
    within_cell = 4.0 * sq / n_rows

    meats = {
        "ehw": meat_ehw,
        "lz-g": within_g,
        "lz-h": within_h,
        "cgm": within_g + within_h - within_cell,
        "cgm2": within_g + within_h,
    }
    if any(f in ("cgm2-adj", "cgm-adj") for f in families):
        # attribute rows are (1, tau_i), identical in both periods
        z_g = np.column_stack([np.full(n_g, 2.0 * n_h), 2.0 * tau_grid.sum(axis=1)])
        z_h = np.column_stack([np.full(n_h, 2.0 * n_g), 2.0 * tau_grid.sum(axis=0)])
        adjustment = 0.0
        for z_sums, m_sums in ((z_g, sums_g), (z_h, sums_h)):
            gram = z_sums.T @ z_sums
            proj = z_sums @ np.linalg.solve(gram, z_sums.T @ m_sums)
            adjustment += float((proj ** 2).sum()) / n_rows
        meats["cgm2-adj"] = meats["cgm2"] - adjustment
        meats["cgm-adj"] = meats["cgm"] - adjustment

    ses = {}
    for family in families:
        meat = meats[family]
        variance = meat / hessian / hessian
        ses[family] = math.sqrt(variance / n_rows) if variance >= 0.0 else float("nan")
    return tau_hat, ses


def _replicate_tripled(pop: dgp.TripleDiffPopulation, rep: int, families, targets):
    d_g, d_h = dgp.draw_assignment(pop, rep)
    tau_hat, fam_ses = tripled_fwl_stats(pop, d_g, d_h, families)
    ses = {(family, "tau"): fam_ses[family] for family in families}
    return {"tau": tau_hat}, ses


def _replicate(pop, rep: int, families, targets):
    if isinstance(pop, dgp.ProbitPopulation):
        return _replicate_probit(pop, rep, families, targets)
    if isinstance(pop, dgp.TwoVarPopulation):
        return _replicate_twovar(pop, rep, families, targets)
    return _replicate_tripled(pop, rep, families, targets)


# ---------------------------------------------------------------------------
# Records, parallel execution, aggregation
# ---------------------------------------------------------------------------

@dataclass
class ReplicationRecords:
    """Per-replication estimates and standard errors over a replication range."""

    spec: dgp.PopulationSpec
    targets: tuple[str, ...]
    families: tuple[str, ...]
    rep_start: int
    rep_stop: int
    estimates: dict = field(default_factory=dict)       # target -> (reps,) array
    ses: dict = field(default_factory=dict)             # (family, target) -> array
    failures: list = field(default_factory=list)        # (rep, message)

    @property
    def n_reps(self) -> int:
        return self.rep_stop - self.rep_start

    def merge(self, other: "ReplicationRecords") -> "ReplicationRecords":
        if other.rep_start != self.rep_stop:
            raise InputError("replication ranges must be contiguous to merge")
        merged = ReplicationRecords(
            spec=self.spec, targets=self.targets, families=self.families,
            rep_start=self.rep_start, rep_stop=other.rep_stop,
        )
        merged.estimates = {
            k: np.concatenate([self.estimates[k], other.estimates[k]]) for k in self.estimates
        }
        merged.ses = {k: np.concatenate([self.ses[k], other.ses[k]]) for k in self.ses}
        merged.failures = self.failures + other.failures
        return merged


def _run_range(spec: dgp.PopulationSpec, start: int, stop: int, families, targets) -> ReplicationRecords:
    pop = dgp.build_population(spec)
    n = stop - start
    records = ReplicationRecords(spec=spec, targets=targets, families=families,
                                 rep_start=start, rep_stop=stop)
    records.estimates = {t: np.full(n, np.nan) for t in targets}
    records.ses = {(f, t): np.full(n, np.nan) for f in families for t in targets}
    for offset, rep in enumerate(range(start, stop)):
        try:
            est, ses = _replicate(pop, rep, families, targets)
        except Exception as exc:  # noqa: BLE001 - failed reps are logged and excluded
            records.failures.append((rep, f"{type(exc).__name__}: {exc}"))
            continue
        for target, value in est.items():
            records.estimates[target][offset] = value
        for key, value in ses.items():
            if key in records.ses:
                records.ses[key][offset] = value
    return records


def _run_range_config(config: dict, start: int, stop: int, families, targets):
    return _run_range(dgp.PopulationSpec.from_config(config), start, stop, families, targets)


def replication_records(spec: dgp.PopulationSpec, rep_range: tuple[int, int],
                        families=None, targets=None, workers: int | None = None) -> ReplicationRecords:
    """Run replications for ``rep_range = (start, stop)``; parallel over contiguous chunks."""
    start, stop = rep_range
    if stop <= start:
        raise InputError("empty replication range")
    families = tuple(families) if families is not None else DESIGN_FAMILIES[spec.kind]
    targets = tuple(targets) if targets is not None else DESIGN_TARGETS[spec.kind]
    unknown = set(targets) - set(DESIGN_TARGETS[spec.kind])
    if unknown:
        raise InputError(f"unknown targets for {spec.kind}: {sorted(unknown)}")
    if workers is None or workers <= 1 or stop - start < 2:
        return _run_range(spec, start, stop, families, targets)
    n_chunks = min(stop - start, workers * 8)
    bounds = np.linspace(start, stop, n_chunks + 1).astype(int)
    config = spec.to_config()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_run_range_config, config, int(a), int(b), families, targets)
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a
        ]
        chunks = [f.result() for f in futures]
    merged = chunks[0]
    for chunk in chunks[1:]:
        merged = merged.merge(chunk)
    return merged


def coverage(estimates: np.ndarray, ses: np.ndarray, truth: float, crit: float) -> float:
    """Fraction of replications whose interval estimate +- crit * se covers the truth.

    NaN standard errors (flagged variances) count as non-covering; NaN
    estimates (failed replications) are excluded from the denominator.
    """
    estimates = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    valid = ~np.isnan(estimates)
    if valid.sum() == 0:
        return float("nan")
    err = np.abs(estimates[valid] - truth)
    half = crit * ses[valid]
    covered = np.where(np.isnan(half), False, err <= half)
    return float(covered.mean())


def truth_for(spec_or_pop, target: str) -> float:
    """Estimand value computed from exact assignment expectations.

    Probit designs solve the population first-order condition on the exact
    two-point treatment mixture (weighted Newton); linear designs solve the
    expected normal equations in closed form.
    """
    pop = dgp.build_population(spec_or_pop) if isinstance(spec_or_pop, dgp.PopulationSpec) \
        else spec_or_pop
    if isinstance(pop, dgp.ProbitPopulation):
        theta = _probit_truth_theta(pop)
        if target == "coef":
            return float(theta[1])
        if target == "ape":
            base = theta[0] + theta[2] * pop.z
            return float(np.mean(ndtr(base + theta[1]) - ndtr(base)))
        raise InputError(f"unknown probit target {target!r}")
    if isinstance(pop, dgp.TwoVarPopulation):
        theta = _twovar_truth_theta(pop)
        if target == "x_g":
            return float(theta[1])
        if target == "x_h":
            return float(theta[2])
        raise InputError(f"unknown two-variable target {target!r}")
    if isinstance(pop, dgp.TripleDiffPopulation):
        if target != "tau":
            raise InputError(f"unknown triple-differences target {target!r}")
        if pop.d_g_fixed is None:
            return float(pop.tau.mean())
        treated = pop.d_g_fixed[pop.clusters.g] > 0.5
        return float(pop.tau[treated].mean())
    raise InputError(f"unknown population type {type(pop).__name__}")


def _probit_truth_theta(pop: dgp.ProbitPopulation, probs: np.ndarray | None = None) -> np.ndarray:
    p = np.full(pop.size, pop.treatment_prob) if probs is None else np.asarray(probs, float)
    ones = np.ones(pop.size)
    d1 = np.column_stack([ones, ones, pop.z])
    d0 = np.column_stack([ones, np.zeros(pop.size), pop.z])
    design = np.vstack([d1, d0])
    y = np.concatenate([pop.y1, pop.y0])
    weights = np.concatenate([p, 1.0 - p])
    model = fit_probit_design(design, y, names=("const", "x", "z"),
                              max_iter=200, tol=1e-10, weights=weights)
    return model.theta


def _twovar_truth_theta(pop: dgp.TwoVarPopulation) -> np.ndarray:
    p_a, p_b = pop.spec.p_a, pop.spec.p_b
    m = pop.size
    gram_row = np.array([
        [1.0, p_a, p_b],
        [p_a, p_a, p_a * p_b],
        [p_b, p_a * p_b, p_b],
    ])
    moments = np.zeros(3)
    ey = p_a * pop.tau1 + p_b * pop.tau2 + pop.e
    moments[0] = ey.sum()
    moments[1] = (p_a * pop.tau1 + p_a * p_b * pop.tau2 + p_a * pop.e).sum()
    moments[2] = (p_a * p_b * pop.tau1 + p_b * pop.tau2 + p_b * pop.e).sum()
    return np.linalg.solve(gram_row * m, moments)


@dataclass
class SummaryTable:
    """Monte Carlo summary: SD, mean standard errors and coverage by family.

    ``rows`` is the documented output schema, one dict per target x family
    with keys (target, family, mean_se, coverage, sd, reps); the oracle rows
    carry the Monte Carlo SD as their standard error.
    """

    kind: str
    seed: int
    reps: int
    failed: int
    level: float
    truth: dict
    sd: dict
    rows: list
    flagged: dict

    def row(self, target: str, family: str) -> dict:
        for row in self.rows:
            if row["target"] == target and row["family"] == family:
                return row
        raise KeyError((target, family))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("target,family,mean_se,coverage,sd,reps\n")
            for row in self.rows:
                fh.write(
                    f"{row['target']},{row['family']},{row['mean_se']!r},"
                    f"{row['coverage']!r},{row['sd']!r},{row['reps']}\n"
                )

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.rows, fh, indent=2, allow_nan=True)
            fh.write("\n")


def summarize(records: ReplicationRecords, level: float = 0.95) -> SummaryTable:
    spec = records.spec
    pop = dgp.build_population(spec)
    clusters = pop.clusters
    reps = records.n_reps
    failed = len(records.failures)
    if reps > 0 and failed / reps > 0.01:
        raise StudyError(
            f"{failed} of {reps} replications failed; first: {records.failures[0]}"
        )
    truth = {t: truth_for(pop, t) for t in records.targets}
    base_dof = min(clusters.n_clusters_g, clusters.n_clusters_h) - 1
    rows = []
    sd = {}
    flagged = {}
    single_rep = reps - failed < 2
    for target in records.targets:
        est = records.estimates[target]
        valid = est[~np.isnan(est)]
        sd[target] = float(valid.std(ddof=1)) if valid.size >= 2 else float("nan")
        oracle_cov = (
            coverage(est, np.full_like(est, sd[target]), truth[target],
                     critical_value(base_dof, 1.0 - (1.0 - level) / 2.0))
            if not single_rep else float("nan")
        )
        rows.append({
            "target": target, "family": "oracle", "mean_se": sd[target],
            "coverage": oracle_cov, "sd": sd[target], "reps": reps,
        })
        for family in records.families:
            ses = records.ses[(family, target)]
            ok = ~np.isnan(est)
            nan_ses = int(np.isnan(ses[ok]).sum())
            flagged[(family, target)] = nan_ses
            mean_se = float(np.nanmean(ses[ok])) if ok.any() and not np.isnan(ses[ok]).all() \
                else float("nan")
            crit = critical_value(family_dof(family, clusters), 1.0 - (1.0 - level) / 2.0)
            rows.append({
                "target": target, "family": family, "mean_se": mean_se,
                "coverage": coverage(est, ses, truth[target], crit),
                "sd": sd[target], "reps": reps,
            })
    return SummaryTable(
        kind=spec.kind, seed=spec.seed, reps=reps, failed=failed, level=level,
        truth=truth, sd=sd, rows=rows, flagged=flagged,
    )


def run_study(spec: dgp.PopulationSpec, reps: int, families=None, targets=None,
              level: float = 0.95, workers: int | None = None) -> SummaryTable:
    """Run ``reps`` replications of the design and aggregate the summary table.

    A single-replication study returns the point estimate with NaN SD and
    coverage (flagged by the NaN values); studies with more than 1% failed
    replications raise StudyError.
    """
    if reps < 1:
        raise InputError("reps must be >= 1")
    records = replication_records(spec, (0, reps), families, targets, workers)
    return summarize(records, level=level)
