import numpy as np
import pytest

from fpcluster.data_model import canonicalize, make_dataset
from fpcluster.dgp import (
    PopulationSpec,
    bernoulli_two_stage_sample,
    build_anticonservative_population,
    build_population,
    build_probit_population,
    build_tripled_population,
    build_twovar_population,
    default_spec,
    draw_assignment,
    enumerate_diff_in_means,
    enumerate_product_assignments,
    enumerate_sampling_moments,
    exact_pair_second_moments,
    exact_treatment_probs,
    neighbor_product_average,
    owfe_estimand_enumeration,
    twfe_estimand_enumeration,
    realize_probit,
    substream,
    tripled_rows,
)
from fpcluster.errors import EnumerationSizeError, InputError
from fpcluster.mestimation import owfe_weights


# ---------------------------------------------------------------------------
# Population builders
# ---------------------------------------------------------------------------

def test_probit_population_shape_and_residualization():
    pop = build_probit_population(seed=11, mode="twoway")
    assert pop.size == 2500
    design = np.column_stack([np.ones(pop.size), pop.z])
    assert np.max(np.abs(design.T @ pop.e)) < 1e-10
    # z components: plus/minus 1 each => z in {-2, 0, 2}
    assert set(np.unique(pop.z)) <= {-2.0, 0.0, 2.0}
    one = build_probit_population(seed=11, mode="oneway")
    assert set(np.unique(one.z)) <= {-3.0, -1.0, 1.0, 3.0}


def test_probit_population_deterministic():
    a = build_probit_population(seed=5, mode="twoway")
    b = build_probit_population(seed=5, mode="twoway")
    assert np.array_equal(a.z, b.z) and np.array_equal(a.e, b.e)
    c = build_probit_population(seed=6, mode="twoway")
    assert not np.array_equal(a.z, c.z)


def test_substreams_do_not_alias():
    s1 = substream(3, 0).standard_normal(4)
    s2 = substream(3, 1).standard_normal(4)
    s3 = substream(3, 1, 1).standard_normal(4)
    assert not np.allclose(s1, s2)
    assert not np.allclose(s2, s3)
    assert np.allclose(s1, substream(3, 0).standard_normal(4))


def test_draw_assignment_probit():
    pop = build_probit_population(seed=2, mode="oneway")
    x = draw_assignment(pop, 0)
    # one-way: B fixed to one => X constant within every g cluster
    for g in range(50):
        vals = x[pop.clusters.g == g]
        assert vals.min() == vals.max()
    x2 = draw_assignment(pop, 1)
    assert not np.array_equal(x, x2)
    assert np.array_equal(x, draw_assignment(pop, 0))


def test_draw_assignment_all_probability_one():
    spec = PopulationSpec(kind="probit-twoway", seed=1, n_clusters_g=4, n_clusters_h=4,
                          p_a=1.0, p_b=1.0)
    pop = build_population(spec)
    assert np.all(draw_assignment(pop, 0) == 1.0)


def test_draw_assignment_empirical_rate():
    spec = PopulationSpec(kind="probit-twoway", seed=9, n_clusters_g=10, n_clusters_h=10)
    pop = build_population(spec)
    rates = [draw_assignment(pop, r).mean() for r in range(400)]
    rate = float(np.mean(rates))
    # binomial band on the cluster draws: 400 reps x (10+10) coins
    se = np.sqrt(0.25 * 0.75 / (400))  # conservative per-rep sd of the mean share
    assert abs(rate - 0.25) < 4 * se


def test_realized_outcomes():
    pop = build_probit_population(seed=2, mode="twoway")
    x = draw_assignment(pop, 0)
    y = realize_probit(pop, x)
    assert np.array_equal(y[x > 0.5], pop.y1[x > 0.5])
    assert np.array_equal(y[x < 0.5], pop.y0[x < 0.5])


def test_twovar_population():
    pop = build_twovar_population(seed=4, design=1)
    assert pop.size == 10_000
    assert set(np.unique(pop.tau1)) == {-1.0, 1.0}
    # design 1: tau1 varies with h, constant within h columns
    for h in range(0, 100, 17):
        vals = pop.tau1[pop.clusters.h == h]
        assert vals.min() == vals.max()
    pop2 = build_twovar_population(seed=4, design=2)
    for g in range(0, 100, 17):
        vals = pop2.tau1[pop2.clusters.g == g]
        assert vals.min() == vals.max()


def test_tripled_population():
    pop = build_tripled_population(seed=4, design=1)
    assert pop.size == 10_000
    assert pop.n_rows == 20_000
    assert abs(pop.tau.mean()) < 1e-12
    pop2 = build_tripled_population(seed=4, design=2)
    treated = pop2.d_g_fixed[pop2.clusters.g] > 0.5
    assert abs(pop2.tau[treated].mean()) < 1e-12
    y, d, g, h, t = tripled_rows(pop2, pop2.d_g_fixed, np.ones(100))
    assert y.shape == (20_000,)
    assert np.all(d[t == 0] == 0)


def test_population_spec_config_round_trip():
    spec = default_spec("probit-twoway", 42)
    again = PopulationSpec.from_config(spec.to_config())
    assert again == spec
    with pytest.raises(InputError):
        PopulationSpec.from_config({"kind": "probit-twoway", "seed": 1, "bogus": 2})
    with pytest.raises(InputError):
        PopulationSpec.from_config({"kind": "probit-twoway"})
    with pytest.raises(InputError):
        PopulationSpec(kind="nope", seed=1, n_clusters_g=4, n_clusters_h=4)


# ---------------------------------------------------------------------------
# Two-stage sampling
# ---------------------------------------------------------------------------

def population_dataset(n_g=4, n_h=4, k=2, seed=3):
    rng = np.random.default_rng(seed)
    g = np.repeat(np.arange(n_g), n_h * k)
    h = np.tile(np.repeat(np.arange(n_h), k), n_g)
    n = n_g * n_h * k
    return make_dataset(rng.standard_normal(n), rng.standard_normal((n, 1)),
                        rng.standard_normal((n, 1)), g, h)


def test_two_stage_sampling_full_population():
    data = population_dataset()
    out = bernoulli_two_stage_sample(data, 1.0, 1.0, 1.0, 7)
    assert out.n == data.n
    assert out.population_size == data.n
    assert not out.metadata_defaulted


def test_two_stage_sampling_metadata():
    data = population_dataset()
    out = bernoulli_two_stage_sample(data, 0.9, 0.9, 0.9, 7)
    assert out.population_size == data.n
    assert out.total_clusters_g == 4 and out.total_clusters_h == 4
    assert out.sampled_clusters_g <= 4


def test_two_stage_sampling_expected_size():
    data = population_dataset(n_g=6, n_h=6, k=3)
    rng = substream(11, 2)
    sizes = [bernoulli_two_stage_sample(data, 0.75, 0.75, 0.5, rng).n for _ in range(300)]
    expected = data.n * 0.75 * 0.75 * 0.5
    sd = np.sqrt(data.n * 0.28125 * (1 - 0.28125))  # loose binomial bound
    assert abs(np.mean(sizes) - expected) < 4 * sd / np.sqrt(300)


def test_remark1_sampling_covariance_exact():
    # dyadic probabilities make the float enumeration exact
    g = np.repeat([0, 1], 2)
    h = np.tile([0, 1], 2)
    idx = canonicalize(g, h)
    rho_g, rho_h, rho_u = 0.5, 0.25, 0.5
    marg, pair = enumerate_sampling_moments(idx, rho_g, rho_h, rho_u)
    assert np.allclose(marg, rho_g * rho_h * rho_u)
    for i in range(4):
        for j in range(4):
            if i == j:
                continue
            cov = pair[i, j] - marg[i] * marg[j]
            if g[i] == g[j]:
                assert cov == pytest.approx(rho_g * (1 - rho_g) * rho_h**2 * rho_u**2, abs=1e-15)
            elif h[i] == h[j]:
                assert cov == pytest.approx(rho_h * (1 - rho_h) * rho_g**2 * rho_u**2, abs=1e-15)
            else:
                assert cov == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------------------
# Enumeration oracles
# ---------------------------------------------------------------------------

def test_enumeration_size_cap():
    with pytest.raises(EnumerationSizeError):
        list(enumerate_product_assignments(10, 10))


def test_enumeration_weights_sum_to_one():
    total = sum(p for p, _, _ in enumerate_product_assignments(3, 2, 0.3, 0.7))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_lemma_pair_moments_2x2():
    g = np.repeat([0, 1], 4)
    h = np.tile(np.repeat([0, 1], 2), 2)
    idx = canonicalize(g, h)  # 2x2 grid, 2 units per cell
    m2 = exact_pair_second_moments(idx, 0.5, 0.5)
    same_cell = (g[:, None] == g[None, :]) & (h[:, None] == h[None, :])
    same_g_only = (g[:, None] == g[None, :]) & (h[:, None] != h[None, :])
    same_h_only = (g[:, None] != g[None, :]) & (h[:, None] == h[None, :])
    disjoint = (g[:, None] != g[None, :]) & (h[:, None] != h[None, :])
    assert np.allclose(m2[same_cell], 0.25)      # mu_A mu_B
    assert np.allclose(m2[same_g_only], 0.125)   # mu_A mu_B^2
    assert np.allclose(m2[same_h_only], 0.125)
    assert np.allclose(m2[disjoint], 0.0625)     # mu_A^2 mu_B^2
    assert np.allclose(exact_treatment_probs(idx), 0.25)


def test_diff_in_means_score_expectations(rng):
    g = np.repeat([0, 1], 2)
    h = np.tile([0, 1], 2)
    idx = canonicalize(g, h)
    y0 = rng.standard_normal(4)
    y1 = y0 + rng.standard_normal(4)
    res = enumerate_diff_in_means(y0, y1, idx)
    tau_i = y1 - y0
    assert np.max(np.abs(res.score_means - (tau_i - tau_i.mean()))) < 1e-12
    assert abs(res.score_means.sum()) < 1e-12
    # constant effects: every score mean is zero
    res_const = enumerate_diff_in_means(y0, y0 + 1.7, idx)
    assert np.max(np.abs(res_const.score_means)) < 1e-12


def test_owfe_enumeration_matches_weight_formula(rng):
    g = np.repeat([0, 1], 2)
    h = np.tile([0, 1], 2)
    idx = canonicalize(g, h)
    y0 = rng.standard_normal(4)
    y1 = y0 + rng.standard_normal(4)
    w = owfe_weights(idx, 0.5, 0.5)
    formula = float(w @ (y1 - y0) / w.sum())
    assert owfe_estimand_enumeration(y0, y1, idx) == pytest.approx(formula, abs=1e-12)


def test_twfe_enumeration_equals_ate_on_balanced_grid(rng):
    g = np.repeat(np.arange(2), 4)
    h = np.tile(np.repeat(np.arange(2), 2), 2)
    idx = canonicalize(g, h)  # 2x2 grid, k=2 per cell
    y0 = rng.standard_normal(8)
    y1 = y0 + rng.standard_normal(8)
    tau_m = float((y1 - y0).mean())
    assert twfe_estimand_enumeration(y0, y1, idx) == pytest.approx(tau_m, abs=1e-12)


def test_example_b1_construction():
    y0, y1, idx, tau = build_anticonservative_population(4, 1)
    assert idx.n == 16
    assert abs(tau.mean()) < 1e-15
    assert neighbor_product_average(tau, idx) == pytest.approx(-0.5, abs=1e-12)
    res = enumerate_diff_in_means(y0, y1, idx)
    assert res.neighbor_score_product == pytest.approx(-0.5, abs=1e-12)
    assert res.meat_cgm < res.meat_true < res.meat_cgm2
    # larger even cluster counts keep the constant
    y0b, y1b, idxb, taub = build_anticonservative_population(6, 1)
    assert neighbor_product_average(taub, idxb) == pytest.approx(-0.5, abs=1e-12)
