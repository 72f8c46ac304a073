import numpy as np
import pytest

from fpcluster.data_model import DesignDescriptor, canonicalize, make_dataset
from fpcluster.errors import InputError, MetadataRequiredError, SingularAttributesError
from fpcluster.shrinkage import (
    AdjustmentInputs,
    adjusted_oneway,
    adjusted_twoway,
    delta_z,
    delta_z_ce,
    delta_z_dim,
    oneway_case_for,
    twoway_case_for,
)
from fpcluster.variance import cgm2_meat, lz_meat, meat_ehw

from conftest import random_clusters


def lstsq_fitted(z, s):
    coef, _, _, _ = np.linalg.lstsq(z, s, rcond=None)
    return z @ coef


# ---------------------------------------------------------------------------
# delta_z
# ---------------------------------------------------------------------------

def test_delta_z_orthogonal_attributes_zero(rng):
    n = 30
    z = np.ones((n, 1))
    s = rng.standard_normal((n, 2))
    s -= s.mean(axis=0)  # orthogonal to the constant
    m = delta_z(s, z, n, add_intercept=False)
    assert np.max(np.abs(m.value)) < 1e-12


def test_delta_z_perfect_projection_equals_ehw(rng):
    n = 40
    z = rng.standard_normal((n, 3))
    b = rng.standard_normal((3, 2))
    s = z @ b
    m = delta_z(s, z, n, add_intercept=False)
    assert np.max(np.abs(m.value - meat_ehw(s).value)) < 1e-10


def test_delta_z_hat_matrix_oracle(rng):
    n = 50
    z = rng.standard_normal((n, 2))
    s = rng.standard_normal((n, 3))
    m = delta_z(s, z, n, add_intercept=True)
    z_full = np.column_stack([np.ones(n), z])
    fitted = lstsq_fitted(z_full, s)
    assert np.max(np.abs(m.value - fitted.T @ fitted / n)) < 1e-10


def test_delta_z_singular_attributes(rng):
    with pytest.raises(SingularAttributesError):
        delta_z(rng.standard_normal((10, 2)), np.zeros((10, 2)), 10, add_intercept=False)


def test_delta_z_drops_collinear_with_warning(rng):
    z = rng.standard_normal((20, 1))
    z2 = np.column_stack([z, 2 * z])
    s = rng.standard_normal((20, 2))
    with pytest.warns(UserWarning):
        m = delta_z(s, z2, 20, add_intercept=False)
    base = delta_z(s, z, 20, add_intercept=False)
    assert np.max(np.abs(m.value - base.value)) < 1e-10


# ---------------------------------------------------------------------------
# delta_z_ce / delta_z_dim
# ---------------------------------------------------------------------------

def test_delta_z_ce_singleton_clusters_equals_delta_z(rng):
    n = 25
    idx = canonicalize(np.arange(n))
    z = rng.standard_normal((n, 2))
    s = rng.standard_normal((n, 2))
    a = delta_z_ce(s, z, idx, "g", n)
    b = delta_z(s, z, n)
    assert np.max(np.abs(a.value - b.value)) < 1e-10


def test_delta_z_ce_cluster_oracle(rng):
    n = 18
    codes = np.repeat([0, 1, 2], 6)
    idx = canonicalize(codes)
    z = rng.standard_normal((n, 1))
    s = rng.standard_normal((n, 2))
    m = delta_z_ce(s, z, idx, "g", n)
    z_full = np.column_stack([np.ones(n), z])
    z_sum = np.vstack([z_full[codes == c].sum(axis=0) for c in range(3)])
    s_sum = np.vstack([s[codes == c].sum(axis=0) for c in range(3)])
    fitted = lstsq_fitted(z_sum, s_sum)
    assert np.max(np.abs(m.value - fitted.T @ fitted / n)) < 1e-10


def test_delta_z_ce_warns_when_attributes_exceed_clusters(rng):
    idx = canonicalize([0, 0, 1, 1])
    z = rng.standard_normal((4, 3))
    s = rng.standard_normal((4, 1))
    with pytest.warns(UserWarning):
        delta_z_ce(s, z, idx, "g", 4)


def test_delta_z_dim_same_partition_symmetric(rng):
    codes = np.repeat([0, 1, 2, 3], 5)
    idx = canonicalize(codes, codes)
    z = rng.standard_normal((20, 1))
    s = rng.standard_normal((20, 2))
    ge = delta_z_dim(s, z, idx, "g", 20)
    he = delta_z_dim(s, z, idx, "h", 20)
    assert np.max(np.abs(ge.value - he.value)) < 1e-12


def test_delta_z_dim_between_cluster_oracle(rng):
    idx = random_clusters(rng, 24, 4, 3)
    z = rng.standard_normal((24, 2))
    s = rng.standard_normal((24, 2))
    m = delta_z_dim(s, z, idx, "g", 24)
    z_full = np.column_stack([np.ones(24), z])
    z_sum = np.vstack([z_full[idx.g == c].sum(axis=0) for c in range(4)])
    s_sum = np.vstack([s[idx.g == c].sum(axis=0) for c in range(4)])
    fitted = lstsq_fitted(z_sum, s_sum)
    assert np.max(np.abs(m.value - fitted.T @ fitted / 24)) < 1e-10


# ---------------------------------------------------------------------------
# PSD and ordering invariants
# ---------------------------------------------------------------------------

def test_shrinkage_meats_psd_and_bounded(rng):
    for _ in range(200):
        n = int(rng.integers(8, 40))
        idx = random_clusters(rng, n, 3, 4)
        z = rng.standard_normal((n, 2))
        s = rng.standard_normal((n, 2))
        dz = delta_z(s, z, n).value
        dce = delta_z_ce(s, z, idx, "g", n).value
        dge = delta_z_dim(s, z, idx, "g", n).value
        for m in (dz, dce, dge):
            assert np.linalg.eigvalsh(m).min() > -1e-10
        # projection bounds: unit-level fitted <= total second moment
        assert np.linalg.eigvalsh(meat_ehw(s).value - dz).min() > -1e-10
        assert np.linalg.eigvalsh(lz_meat(s, idx, "g").value - dce).min() > -1e-10


def test_delta_z_monotone_in_attributes(rng):
    n = 30
    z1 = rng.standard_normal((n, 1))
    z2 = np.column_stack([z1, rng.standard_normal(n)])
    s = rng.standard_normal((n, 2))
    a = delta_z(s, z1, n).value
    b = delta_z(s, z2, n).value
    assert np.linalg.eigvalsh(b - a).min() > -1e-10


def test_shrinkage_scale_equivariance(rng):
    n = 20
    idx = random_clusters(rng, n, 3, 3)
    z = rng.standard_normal((n, 2))
    s = rng.standard_normal((n, 2))
    base = delta_z_ce(s, z, idx, "g", n).value
    scaled_scores = delta_z_ce(3.0 * s, z, idx, "g", n).value
    assert np.max(np.abs(scaled_scores - 9.0 * base)) < 1e-9
    scaled_attrs = delta_z_ce(s, z * np.array([2.0, -0.5]), idx, "g", n).value
    assert np.max(np.abs(scaled_attrs - base)) < 1e-9


# ---------------------------------------------------------------------------
# Adjusted estimators
# ---------------------------------------------------------------------------

def inputs_for(rng, n=30, orthogonal=False, full_pop=True):
    idx = random_clusters(rng, n, 4, 5)
    s = rng.standard_normal((n, 2))
    if orthogonal:
        z = np.zeros((n, 1))  # only the intercept survives; scores get demeaned fit
        s -= s.mean(axis=0)
        z = rng.standard_normal((n, 1))
        s -= lstsq_fitted(np.column_stack([np.ones(n), z]), s)
    else:
        z = rng.standard_normal((n, 1))
    return AdjustmentInputs(
        scores=s, z_attr=z, clusters=idx, n=n,
        population_size=n if full_pop else 4 * n,
        total_clusters_g=idx.n_clusters_g if full_pop else 8,
        total_clusters_h=idx.n_clusters_h if full_pop else 10,
    ), s, z, idx


def test_adjusted_oneway_case4_orthogonal_equals_ehw(rng):
    inputs, s, _, idx = inputs_for(rng, orthogonal=True)
    adj = adjusted_oneway(inputs, 4, None, dim="g")
    assert np.max(np.abs(adj.report.V - meat_ehw(s).value)) < 1e-10
    assert adj.case_id == 4


def test_adjusted_oneway_case1_all_clusters_sampled(rng):
    inputs, s, z, idx = inputs_for(rng)
    adj = adjusted_oneway(inputs, 1, None, dim="g")
    expected = meat_ehw(s).value - delta_z(s, z, inputs.n).value
    assert np.max(np.abs(adj.report.V - expected)) < 1e-10


def test_adjusted_oneway_case2_below_lz(rng):
    for _ in range(50):
        inputs, s, _, idx = inputs_for(rng)
        adj = adjusted_oneway(inputs, 2, None, dim="g")
        lz = lz_meat(s, idx, "g").value
        assert np.linalg.eigvalsh(lz - adj.report.V).min() > -1e-10


def test_adjusted_oneway_case3_notes(rng):
    inputs, _, _, _ = inputs_for(rng)
    adj = adjusted_oneway(inputs, 3, None, dim="g")
    assert any("cluster-sum" in note for note in adj.report.notes)
    assert adj.report.family == "adj-oneway-g-case3"


def test_adjusted_twoway_case2_zero_adjustment_equals_cgm2(rng):
    # balanced grid: two-way demeaned scores have exactly zero cluster sums on
    # both dimensions, so both per-dimension projections vanish
    from fpcluster.mestimation import twfe_residualize
    g = np.repeat(np.arange(4), 5)
    h = np.tile(np.arange(5), 4)
    idx = canonicalize(g, h)
    n = 20
    s = np.column_stack([twfe_residualize(rng.standard_normal(n), idx) for _ in range(2)])
    z = rng.standard_normal((n, 1))
    inputs = AdjustmentInputs(scores=s, z_attr=z, clusters=idx, n=n,
                              population_size=n, total_clusters_g=4, total_clusters_h=5)
    adj = adjusted_twoway(inputs, 2, None)
    assert np.max(np.abs(adj.report.V - cgm2_meat(s, idx).value)) < 1e-10
    assert adj.report.family == "cgm2-adj"
    assert np.max(np.abs(adj.components["shrink-z-ge"].value)) < 1e-12


def test_adjusted_all_zero_attributes_rejected(rng):
    inputs, s, z, idx = inputs_for(rng)
    bad = AdjustmentInputs(scores=s, z_attr=np.zeros((inputs.n, 1)), clusters=idx,
                           n=inputs.n, population_size=inputs.n,
                           total_clusters_g=idx.n_clusters_g,
                           total_clusters_h=idx.n_clusters_h, add_intercept=False)
    with pytest.raises(SingularAttributesError):
        adjusted_twoway(bad, 2, None)


def test_adjusted_twoway_case2_below_cgm2(rng):
    for _ in range(50):
        n = int(rng.integers(12, 40))
        idx = random_clusters(rng, n, 3, 4)
        s = rng.standard_normal((n, 2))
        z = rng.standard_normal((n, 1))
        inputs = AdjustmentInputs(scores=s, z_attr=z, clusters=idx, n=n,
                                  population_size=n, total_clusters_g=3, total_clusters_h=4)
        adj = adjusted_twoway(inputs, 2, None)
        diff = cgm2_meat(s, idx).value - adj.report.V
        assert np.linalg.eigvalsh(diff).min() > -1e-10


def test_adjusted_twoway_case1_all_sampled_orthogonal(rng):
    n = 24
    idx = random_clusters(rng, n, 3, 4)
    s = rng.standard_normal((n, 2))
    z = rng.standard_normal((n, 1))
    s = s - lstsq_fitted(np.column_stack([np.ones(n), z]), s)
    inputs = AdjustmentInputs(scores=s, z_attr=z, clusters=idx, n=n,
                              population_size=n, total_clusters_g=3, total_clusters_h=4)
    adj = adjusted_twoway(inputs, 1, None)
    assert np.max(np.abs(adj.report.V - meat_ehw(s).value)) < 1e-10


def test_adjusted_requires_attributes():
    data = make_dataset(np.ones(4), np.ones((4, 1)), None, [0, 0, 1, 1])
    with pytest.raises(MetadataRequiredError):
        AdjustmentInputs.from_dataset(data, np.ones((4, 1)))


def test_case_for_design():
    assert oneway_case_for(DesignDescriptor()) == 4
    assert oneway_case_for(DesignDescriptor(sampling="oneway-cluster", rho_g=0.5)) == 1
    assert oneway_case_for(DesignDescriptor(assignment="oneway-g")) == 2
    assert oneway_case_for(DesignDescriptor(sampling="oneway-cluster", rho_g=0.5,
                                            assignment="oneway-g")) == 3
    assert twoway_case_for(DesignDescriptor(sampling="twoway-cluster",
                                            rho_g=0.5, rho_h=0.5)) == 1
    assert twoway_case_for(DesignDescriptor(assignment="twoway")) == 2


def test_adjusted_case_validation(rng):
    inputs, _, _, _ = inputs_for(rng)
    with pytest.raises(InputError):
        adjusted_oneway(inputs, 5, None)
    with pytest.raises(InputError):
        adjusted_twoway(inputs, 3, None)
