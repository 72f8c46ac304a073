"""Seeded population generators, assignment/sampling draws and exact oracles.

Randomness is counter-based: every draw comes from a Philox generator keyed
by ``SeedSequence(seed, spawn_key=(purpose, replication))``, so population
construction, per-replication assignment and sampling never share a stream
and identical (seed, spec) pairs reproduce bit-identical data.

The enumeration helpers walk all ``2^(G+H)`` binary cluster-assignment
configurations of a tiny population and return exact expectations; they are
the independent oracles used by the test suite.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .data_model import ClusterIndex, ObservedDataset, canonicalize
from .errors import EnumerationSizeError, InputError
from .mestimation import twfe_residualize

__all__ = [
    "PopulationSpec",
    "default_spec",
    "build_population",
    "ProbitPopulation",
    "TwoVarPopulation",
    "TripleDiffPopulation",
    "build_probit_population",
    "build_twovar_population",
    "build_tripled_population",
    "draw_assignment",
    "bernoulli_two_stage_sample",
    "substream",
    "enumerate_product_assignments",
    "exact_pair_second_moments",
    "exact_treatment_probs",
    "enumerate_diff_in_means",
    "owfe_estimand_enumeration",
    "twfe_estimand_enumeration",
    "enumerate_sampling_moments",
    "build_anticonservative_population",
    "neighbor_product_average",
]

TAG_POPULATION = 0
TAG_ASSIGNMENT = 1
TAG_SAMPLING = 2

_KINDS = ("probit-oneway", "probit-twoway", "twovar-1", "twovar-2", "tripled-1", "tripled-2")
_ENUM_CLUSTER_CAP = 16


def substream(seed: int, tag: int, rep: int = 0) -> np.random.Generator:
    """Independent Philox substream keyed by (seed, purpose tag, replication)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(tag, rep))))


@dataclass(frozen=True)
class PopulationSpec:
    """Declarative simulation blueprint; fully determines a population given the seed."""

    kind: str
    seed: int
    n_clusters_g: int
    n_clusters_h: int
    units_per_cell: int = 1
    p_a: float = 0.5
    p_b: float = 0.5
    rho_g: float = 1.0
    rho_h: float = 1.0
    rho_u: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InputError(f"unknown design kind {self.kind!r}; expected one of {_KINDS}")
        if self.n_clusters_g < 2 or self.n_clusters_h < 2:
            raise InputError("at least two clusters are required on each dimension")
        for name in ("p_a", "p_b"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        for name in ("rho_g", "rho_h", "rho_u"):
            rho = getattr(self, name)
            if not 0.0 < rho <= 1.0:
                raise InputError(f"{name} must lie in (0, 1]")

    def to_config(self) -> dict:
        return asdict(self)

    @classmethod
    def from_config(cls, config: dict) -> "PopulationSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(config) - allowed
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        missing = {"kind", "seed"} - set(config)
        if missing:
            raise InputError(f"missing config keys: {sorted(missing)}")
        return cls(**config)


def default_spec(kind: str, seed: int) -> PopulationSpec:
    """The full-scale blueprint for each named design."""
    if kind.startswith("probit"):
        return PopulationSpec(kind=kind, seed=seed, n_clusters_g=50, n_clusters_h=50)
    return PopulationSpec(kind=kind, seed=seed, n_clusters_g=100, n_clusters_h=100)


def _grid_codes(n_g: int, n_h: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    g = np.repeat(np.arange(n_g, dtype=np.intp), n_h * k)
    h = np.tile(np.repeat(np.arange(n_h, dtype=np.intp), k), n_g)
    return g, h


def _residualize_on(z: np.ndarray, draws: np.ndarray) -> np.ndarray:
    design = np.column_stack([np.ones_like(z), z])
    coef, _, _, _ = np.linalg.lstsq(design, draws, rcond=None)
    return draws - design @ coef


def _pm_draw(rng: np.random.Generator, size: int, magnitude: float) -> np.ndarray:
    return magnitude * (2.0 * (rng.random(size) < 0.5) - 1.0)


@dataclass(frozen=True)
class ProbitPopulation:
    """Fixed attributes and binary potential outcomes for the probit designs."""

    spec: PopulationSpec
    clusters: ClusterIndex
    z: np.ndarray
    e: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def treatment_prob(self) -> float:
        return self.spec.p_a * self.spec.p_b


def build_probit_population(n_clusters_g=50, n_clusters_h=50, units_per_cell=1,
                            mode="oneway", seed=0) -> ProbitPopulation:
    """Binary-response population: y(x) = 1[x + 2 z x + e > 0] on a cluster grid.

    z is the sum of a G-level and an H-level component (plus/minus 2 and 1
    under one-way clustered assignment, plus/minus 1 and 1 under two-way);
    e is a standard-normal draw residualized exactly against (1, z).  Both
    are generated once per seed and kept fixed across replications.
    """
    if mode not in ("oneway", "twoway"):
        raise InputError("mode must be 'oneway' or 'twoway'")
    kind = "probit-oneway" if mode == "oneway" else "probit-twoway"
    spec = PopulationSpec(
        kind=kind, seed=seed, n_clusters_g=n_clusters_g, n_clusters_h=n_clusters_h,
        units_per_cell=units_per_cell, p_a=0.5, p_b=1.0 if mode == "oneway" else 0.5,
    )
    return _build_probit(spec)


def _build_probit(spec: PopulationSpec) -> ProbitPopulation:
    rng = substream(spec.seed, TAG_POPULATION)
    g, h = _grid_codes(spec.n_clusters_g, spec.n_clusters_h, spec.units_per_cell)
    g_magnitude = 2.0 if spec.kind == "probit-oneway" else 1.0
    z_g = _pm_draw(rng, spec.n_clusters_g, g_magnitude)
    z_h = _pm_draw(rng, spec.n_clusters_h, 1.0)
    z = z_g[g] + z_h[h]
    e = _residualize_on(z, rng.standard_normal(z.shape[0]))
    y0 = (e > 0).astype(float)
    y1 = (1.0 + 2.0 * z + e > 0).astype(float)
    clusters = ClusterIndex(g=g, h=h, n_clusters_g=spec.n_clusters_g,
                            n_clusters_h=spec.n_clusters_h)
    return ProbitPopulation(spec=spec, clusters=clusters, z=z, e=e, y0=y0, y1=y1)


@dataclass(frozen=True)
class TwoVarPopulation:
    """Linear population with two assignment variables clustered on different dimensions."""

    spec: PopulationSpec
    clusters: ClusterIndex
    tau1: np.ndarray
    tau2: np.ndarray
    e: np.ndarray

    @property
    def size(self) -> int:
        return self.e.shape[0]


def build_twovar_population(n_clusters_g=100, n_clusters_h=100, seed=0, design=1) -> TwoVarPopulation:
    """y(x_g, x_h) = tau1 x_g + tau2 x_h + e with cluster-level plus/minus 1 effects.

    Design 1 puts the heterogeneity on the opposite dimension of each
    assignment variable (tau1 varies with h, tau2 with g); design 2 aligns
    them with the own dimension.
    """
    if design not in (1, 2):
        raise InputError("design must be 1 or 2")
    spec = PopulationSpec(kind=f"twovar-{design}", seed=seed,
                          n_clusters_g=n_clusters_g, n_clusters_h=n_clusters_h)
    return _build_twovar(spec)


def _build_twovar(spec: PopulationSpec) -> TwoVarPopulation:
    rng = substream(spec.seed, TAG_POPULATION)
    g, h = _grid_codes(spec.n_clusters_g, spec.n_clusters_h, spec.units_per_cell)
    tau_g = _pm_draw(rng, spec.n_clusters_g, 1.0)
    tau_h = _pm_draw(rng, spec.n_clusters_h, 1.0)
    e = rng.standard_normal(g.shape[0])
    if spec.kind == "twovar-1":
        tau1, tau2 = tau_h[h], tau_g[g]
    else:
        tau1, tau2 = tau_g[g], tau_h[h]
    clusters = ClusterIndex(g=g, h=h, n_clusters_g=spec.n_clusters_g,
                            n_clusters_h=spec.n_clusters_h)
    return TwoVarPopulation(spec=spec, clusters=clusters, tau1=tau1, tau2=tau2, e=e)


@dataclass(frozen=True)
class TripleDiffPopulation:
    """Two-period population for the triple-differences design.

    ``tau`` is centered so the triple-differences parallel-trends
    normalization holds (design 1: demeaned over all units; design 2:
    demeaned over units in treated-attribute groups).  ``d_g_fixed`` holds
    the nonstochastic group indicator of design 2 (None in design 1).
    """

    spec: PopulationSpec
    clusters: ClusterIndex
    tau: np.ndarray
    eps: np.ndarray            # (units, 2) idiosyncratic terms, fixed across reps
    d_g_fixed: np.ndarray | None

    @property
    def size(self) -> int:
        return self.tau.shape[0]

    @property
    def n_rows(self) -> int:
        return 2 * self.tau.shape[0]


def build_tripled_population(n_clusters_g=100, n_clusters_h=100, seed=0, design=1) -> TripleDiffPopulation:
    if design not in (1, 2):
        raise InputError("design must be 1 or 2")
    spec = PopulationSpec(kind=f"tripled-{design}", seed=seed,
                          n_clusters_g=n_clusters_g, n_clusters_h=n_clusters_h)
    return _build_tripled(spec)


def _build_tripled(spec: PopulationSpec) -> TripleDiffPopulation:
    rng = substream(spec.seed, TAG_POPULATION)
    g, h = _grid_codes(spec.n_clusters_g, spec.n_clusters_h, spec.units_per_cell)
    tau_g = _pm_draw(rng, spec.n_clusters_g, 2.0)
    tau_h = _pm_draw(rng, spec.n_clusters_h, 0.5)
    tau_tilde = tau_g[g] + tau_h[h]
    eps = rng.standard_normal((g.shape[0], 2))
    d_g_fixed = None
    if spec.kind == "tripled-2":
        d_g_fixed = (rng.random(spec.n_clusters_g) < spec.p_a).astype(float)
        if d_g_fixed.sum() == 0:
            d_g_fixed[0] = 1.0  # degenerate draw on tiny grids; keep one treated group
        treated_units = d_g_fixed[g] > 0.5
        tau = tau_tilde - tau_tilde[treated_units].mean()
    else:
        tau = tau_tilde - tau_tilde.mean()
    clusters = ClusterIndex(g=g, h=h, n_clusters_g=spec.n_clusters_g,
                            n_clusters_h=spec.n_clusters_h)
    return TripleDiffPopulation(spec=spec, clusters=clusters, tau=tau, eps=eps,
                                d_g_fixed=d_g_fixed)


def build_population(spec: PopulationSpec):
    if spec.kind.startswith("probit"):
        return _build_probit(spec)
    if spec.kind.startswith("twovar"):
        return _build_twovar(spec)
    return _build_tripled(spec)


def draw_assignment(pop, rep: int):
    """Fresh cluster-level assignment draws for replication ``rep``.

    Returns the per-unit treatment vector for the probit designs, the
    (x_g, x_h) column pair for the two-variable designs, and the
    (d_g, d_h) cluster vectors for the triple-differences designs.
    """
    spec = pop.spec
    rng = substream(spec.seed, TAG_ASSIGNMENT, rep)
    if isinstance(pop, ProbitPopulation):
        a = (rng.random(spec.n_clusters_g) < spec.p_a).astype(float)
        b = np.ones(spec.n_clusters_h)
        if spec.kind == "probit-twoway":
            b = (rng.random(spec.n_clusters_h) < spec.p_b).astype(float)
        return a[pop.clusters.g] * b[pop.clusters.h]
    if isinstance(pop, TwoVarPopulation):
        x_g = (rng.random(spec.n_clusters_g) < spec.p_a).astype(float)
        x_h = (rng.random(spec.n_clusters_h) < spec.p_b).astype(float)
        return x_g[pop.clusters.g], x_h[pop.clusters.h]
    if isinstance(pop, TripleDiffPopulation):
        if pop.d_g_fixed is not None:
            d_g = pop.d_g_fixed
        else:
            d_g = (rng.random(spec.n_clusters_g) < spec.p_a).astype(float)
        d_h = (rng.random(spec.n_clusters_h) < spec.p_b).astype(float)
        return d_g, d_h
    raise InputError(f"unknown population type {type(pop).__name__}")


def realize_probit(pop: ProbitPopulation, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.5, pop.y1, pop.y0)


def tripled_rows(pop: TripleDiffPopulation, d_g: np.ndarray, d_h: np.ndarray):
    """Materialize the 2-period row arrays (y, d, g, h, t) of one replication."""
    q = d_g[pop.clusters.g] * d_h[pop.clusters.h]
    m = pop.size
    y = np.concatenate([pop.eps[:, 0], pop.tau * q + pop.eps[:, 1]])
    d = np.concatenate([np.zeros(m), q])
    g = np.concatenate([pop.clusters.g, pop.clusters.g])
    h = np.concatenate([pop.clusters.h, pop.clusters.h])
    t = np.concatenate([np.zeros(m, dtype=np.intp), np.ones(m, dtype=np.intp)])
    return y, d, g, h, t


def bernoulli_two_stage_sample(population: ObservedDataset, rho_g: float, rho_h: float,
                               rho_u: float, seed_or_rng, on_empty: str = "error") -> ObservedDataset:
    """Two-stage Bernoulli sample: G clusters, then H clusters, then units.

    The input dataset is treated as the full population; the output carries
    the population totals as metadata and canonicalized sampled-cluster codes.
    """
    for name, rho in (("rho_g", rho_g), ("rho_h", rho_h), ("rho_u", rho_u)):
        if not 0.0 < rho <= 1.0:
            raise InputError(f"{name} must lie in (0, 1]")
    if on_empty not in ("error", "resample"):
        raise InputError("on_empty must be 'error' or 'resample'")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else substream(
        int(seed_or_rng), TAG_SAMPLING)
    clusters = population.clusters
    for _ in range(1000):
        keep_g = rng.random(clusters.n_clusters_g) < rho_g
        keep_h = rng.random(clusters.n_clusters_h) < rho_h
        keep = keep_g[clusters.g] & keep_h[clusters.h] & (rng.random(population.n) < rho_u)
        if keep.any():
            break
        if on_empty == "error":
            raise InputError("two-stage sampling produced an empty sample")
    else:
        raise InputError("two-stage sampling failed to produce a nonempty sample")
    idx = np.flatnonzero(keep)
    sampled = canonicalize(clusters.g[idx], clusters.h[idx])
    return ObservedDataset(
        y=population.y[idx], X=population.X[idx], Z=population.Z[idx],
        clusters=sampled,
        population_size=population.n,
        total_clusters_g=clusters.n_clusters_g,
        total_clusters_h=clusters.n_clusters_h,
        metadata_defaulted=False,
        period=None if population.period is None else population.period[idx],
        x_names=population.x_names, z_names=population.z_names,
    )


# ---------------------------------------------------------------------------
# Exhaustive enumeration oracles (tiny populations only)
# ---------------------------------------------------------------------------

def enumerate_product_assignments(n_g: int, n_h: int, p_a: float = 0.5, p_b: float = 0.5):
    """Yield (probability, a, b) over all 2^(G+H) binary cluster configurations."""
    if n_g + n_h > _ENUM_CLUSTER_CAP:
        raise EnumerationSizeError(
            f"enumeration capped at {_ENUM_CLUSTER_CAP} total clusters, got {n_g + n_h}"
        )
    for bits_a in itertools.product((0, 1), repeat=n_g):
        a = np.asarray(bits_a, dtype=float)
        prob_a = float(np.prod(np.where(a > 0.5, p_a, 1.0 - p_a)))
        if prob_a == 0.0:
            continue
        for bits_b in itertools.product((0, 1), repeat=n_h):
            b = np.asarray(bits_b, dtype=float)
            prob = prob_a * float(np.prod(np.where(b > 0.5, p_b, 1.0 - p_b)))
            if prob > 0.0:
                yield prob, a, b


def exact_pair_second_moments(clusters: ClusterIndex, p_a=0.5, p_b=0.5) -> np.ndarray:
    """Exact E[X_i X_j] matrix under X = A_g B_h product assignment."""
    m = clusters.n
    out = np.zeros((m, m))
    for prob, a, b in enumerate_product_assignments(
            clusters.n_clusters_g, clusters.n_clusters_h, p_a, p_b):
        x = a[clusters.g] * b[clusters.h]
        out += prob * np.outer(x, x)
    return out


def exact_treatment_probs(clusters: ClusterIndex, p_a=0.5, p_b=0.5) -> np.ndarray:
    m = clusters.n
    out = np.zeros(m)
    for prob, a, b in enumerate_product_assignments(
            clusters.n_clusters_g, clusters.n_clusters_h, p_a, p_b):
        out += prob * a[clusters.g] * b[clusters.h]
    return out


def neighbor_mask(clusters: ClusterIndex) -> np.ndarray:
    """Boolean (n x n) mask of pairs sharing a G or an H cluster (diagonal included)."""
    same_g = clusters.g[:, None] == clusters.g[None, :]
    same_h = clusters.h[:, None] == clusters.h[None, :]
    return same_g | same_h


@dataclass(frozen=True)
class DiffInMeansEnumeration:
    """Exact design-based objects for the difference-in-means estimator."""

    tau: float
    score_means: np.ndarray          # E[eta_i] = tau_i - tau
    meat_true: float                 # finite-population two-way meat
    meat_cgm: float                  # CGM estimand meat
    meat_cgm2: float                 # CGM2 estimand meat
    neighbor_score_product: float    # (1/M) sum_i sum_{j in N_i} E[eta_i] E[eta_j]


def enumerate_diff_in_means(y0, y1, clusters: ClusterIndex, p_a=0.5, p_b=0.5) -> DiffInMeansEnumeration:
    """Enumerate the score eta of the difference-in-means fit on a tiny population."""
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    m = clusters.n
    b1 = p_a * p_b
    b0 = 1.0 - b1
    if b1 <= 0.0 or b0 <= 0.0:
        raise InputError("degenerate treatment probability for difference in means")
    alpha = y0.mean()
    tau = float((y1 - y0).mean())
    e_eta = np.zeros(m)
    e_outer = np.zeros((m, m))
    for prob, a, b in enumerate_product_assignments(
            clusters.n_clusters_g, clusters.n_clusters_h, p_a, p_b):
        x = a[clusters.g] * b[clusters.h]
        y = np.where(x > 0.5, y1, y0)
        u = y - alpha - tau * x
        eta = (x / b1 - (1.0 - x) / b0) * u
        e_eta += prob * eta
        e_outer += prob * np.outer(eta, eta)
    mask = neighbor_mask(clusters)
    same_cell = (clusters.g[:, None] == clusters.g[None, :]) & (
        clusters.h[:, None] == clusters.h[None, :])
    meat_cgm = float(e_outer[mask].sum() / m)
    product = float(np.outer(e_eta, e_eta)[mask].sum() / m)
    meat_true = meat_cgm - product
    meat_cgm2 = meat_cgm + float(e_outer[same_cell].sum() / m)
    return DiffInMeansEnumeration(
        tau=tau, score_means=e_eta, meat_true=meat_true, meat_cgm=meat_cgm,
        meat_cgm2=meat_cgm2, neighbor_score_product=product,
    )


def owfe_estimand_enumeration(y0, y1, clusters: ClusterIndex, p_a=0.5, p_b=0.5) -> float:
    """Ratio of exact expectations of the one-way FE numerator and denominator."""
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    sizes = clusters.sizes_g.astype(float)
    num = 0.0
    den = 0.0
    for prob, a, b in enumerate_product_assignments(
            clusters.n_clusters_g, clusters.n_clusters_h, p_a, p_b):
        x = a[clusters.g] * b[clusters.h]
        xbar = (np.bincount(clusters.g, weights=x, minlength=clusters.n_clusters_g)
                / sizes)[clusters.g]
        y = np.where(x > 0.5, y1, y0)
        num += prob * float(y @ (x - xbar))
        den += prob * float(x @ (x - xbar))
    return num / den


def twfe_estimand_enumeration(y0, y1, clusters: ClusterIndex, p_a=0.5, p_b=0.5) -> float:
    """Ratio of exact expectations of the TWFE numerator and denominator."""
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    num = 0.0
    den = 0.0
    for prob, a, b in enumerate_product_assignments(
            clusters.n_clusters_g, clusters.n_clusters_h, p_a, p_b):
        x = a[clusters.g] * b[clusters.h]
        xt = twfe_residualize(x, clusters)
        y = np.where(x > 0.5, y1, y0)
        num += prob * float(xt @ y)
        den += prob * float(xt @ x)
    return num / den


def enumerate_sampling_moments(clusters: ClusterIndex, rho_g: float, rho_h: float,
                               rho_u: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact (E[R_i], E[R_i R_j]) under two-stage Bernoulli sampling, by full enumeration."""
    m = clusters.n
    if clusters.n_clusters_g + clusters.n_clusters_h + m > 20:
        raise EnumerationSizeError("sampling enumeration capped at 20 total binary draws")
    marg = np.zeros(m)
    pair = np.zeros((m, m))
    for bits_g in itertools.product((0, 1), repeat=clusters.n_clusters_g):
        s_g = np.asarray(bits_g, dtype=float)
        p_g = float(np.prod(np.where(s_g > 0.5, rho_g, 1.0 - rho_g)))
        for bits_h in itertools.product((0, 1), repeat=clusters.n_clusters_h):
            s_h = np.asarray(bits_h, dtype=float)
            p_h = float(np.prod(np.where(s_h > 0.5, rho_h, 1.0 - rho_h)))
            cluster_keep = s_g[clusters.g] * s_h[clusters.h]
            for bits_u in itertools.product((0, 1), repeat=m):
                u = np.asarray(bits_u, dtype=float)
                p_u = float(np.prod(np.where(u > 0.5, rho_u, 1.0 - rho_u)))
                prob = p_g * p_h * p_u
                if prob == 0.0:
                    continue
                r = cluster_keep * u
                marg += prob * r
                pair += prob * np.outer(r, r)
    return marg, pair


def build_anticonservative_population(n_clusters: int = 4, cell_count: int = 1):
    """Population on which the CGM estimand falls below the true variance.

    Units live only in cells (k, k), (k, k+-1) and (k+-1, k) for odd k (labels
    wrap around), with 4*cell_count units of effect +1 in the diagonal cells
    and cell_count units of effect -1 in the off-diagonal ones.  Returns
    (y0, y1, clusters, tau) with tau averaging to zero.
    """
    if n_clusters % 2 != 0 or n_clusters < 4:
        raise InputError("n_clusters must be an even number >= 4")
    g_labels: list[int] = []
    h_labels: list[int] = []
    tau: list[float] = []
    for k in range(1, n_clusters, 2):
        up = (k + 1) % n_clusters
        down = (k - 1) % n_clusters
        for _ in range(4 * cell_count):
            g_labels.append(k)
            h_labels.append(k)
            tau.append(1.0)
        for other in (up, down):
            for _ in range(cell_count):
                g_labels.append(k)
                h_labels.append(other)
                tau.append(-1.0)
            for _ in range(cell_count):
                g_labels.append(other)
                h_labels.append(k)
                tau.append(-1.0)
    clusters = canonicalize(g_labels, h_labels)
    tau_arr = np.asarray(tau)
    y0 = np.zeros(len(tau))
    y1 = tau_arr.copy()
    return y0, y1, clusters, tau_arr


def neighbor_product_average(values: np.ndarray, clusters: ClusterIndex) -> float:
    """(1/M) sum_i sum_{j in N_i} (v_i - vbar)(v_j - vbar) over neighbor pairs."""
    v = np.asarray(values, dtype=float)
    centered = v - v.mean()
    mask = neighbor_mask(clusters)
    return float(np.outer(centered, centered)[mask].sum() / v.shape[0])
