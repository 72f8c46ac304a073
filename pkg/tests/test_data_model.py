import numpy as np
import pytest
from hypothesis import given, strategies as st

from fpcluster.data_model import (
    ClusterIndex,
    DesignDescriptor,
    canonicalize,
    intersection_cells,
    make_dataset,
)
from fpcluster.errors import InputError


def test_canonicalize_dense_first_appearance():
    idx = canonicalize(["a", "a", "b"], ["x", "y", "x"])
    assert idx.g.tolist() == [0, 0, 1]
    assert idx.h.tolist() == [0, 1, 0]
    assert idx.n_clusters_g == 2
    assert idx.n_clusters_h == 2


def test_canonicalize_single_cluster():
    idx = canonicalize([7, 7, 7])
    assert idx.n_clusters_g == idx.n_clusters_h == 1
    assert idx.sizes_g.tolist() == [3]
    assert np.array_equal(idx.g, idx.h)


def test_canonicalize_grid_counts():
    g_labels = np.repeat(np.arange(50), 50)
    h_labels = np.tile(np.arange(50), 50)
    idx = canonicalize(g_labels, h_labels)
    assert idx.n == 2500
    assert idx.sizes_g.tolist() == [50] * 50
    assert idx.sizes_h.tolist() == [50] * 50
    assert idx.n_cells == 2500


def test_canonicalize_mismatched_lengths():
    with pytest.raises(InputError):
        canonicalize([1, 2], [1, 2, 3])


def test_intersection_cells_partition():
    idx = canonicalize([0, 0, 1], [0, 1, 0])
    cells = intersection_cells(idx)
    assert {k: v.tolist() for k, v in cells.items()} == {
        (0, 0): [0], (0, 1): [1], (1, 0): [2],
    }


def test_intersection_cells_oneway_are_g_clusters():
    idx = canonicalize(["a", "a", "b", "b", "b"])
    cells = intersection_cells(idx)
    assert {k: v.tolist() for k, v in cells.items()} == {
        (0, 0): [0, 1], (1, 1): [2, 3, 4],
    }


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_every_row_in_exactly_one_cell_and_cluster(pairs):
    g_labels = [p[0] for p in pairs]
    h_labels = [p[1] for p in pairs]
    idx = canonicalize(g_labels, h_labels)
    cells = intersection_cells(idx)
    seen = np.concatenate([rows for rows in cells.values()])
    assert sorted(seen.tolist()) == list(range(len(pairs)))
    # cell sizes within a g cluster sum to the cluster size
    for g in range(idx.n_clusters_g):
        total = sum(len(rows) for (gg, _), rows in cells.items() if gg == g)
        assert total == idx.sizes_g[g]


def test_cluster_index_rejects_empty_cluster():
    with pytest.raises(InputError):
        ClusterIndex(g=np.array([0, 0]), h=np.array([0, 1]), n_clusters_g=2, n_clusters_h=2)


def test_dataset_defaults_and_flag():
    data = make_dataset([1.0, 2.0], [[1.0], [0.0]], None, ["a", "b"])
    assert data.population_size == 2
    assert data.total_clusters_g == 2
    assert data.metadata_defaulted
    explicit = make_dataset([1.0, 2.0], [[1.0], [0.0]], None, ["a", "b"],
                            population_size=10, total_clusters_g=5)
    assert not explicit.metadata_defaulted
    assert explicit.population_size == 10


def test_dataset_validation():
    with pytest.raises(InputError):
        make_dataset([1.0, 2.0, 3.0], [[1.0], [0.0], [1.0]], None, [0, 1, 2],
                     population_size=2)
    with pytest.raises(InputError):
        make_dataset([1.0, 2.0], [[1.0], [0.0]], None, [0, 1], total_clusters_g=1)


def test_dataset_arrays_are_readonly():
    data = make_dataset([1.0, 2.0], [[1.0], [0.0]], None, [0, 1])
    with pytest.raises(ValueError):
        data.y[0] = 5.0


def test_design_descriptor_validation():
    DesignDescriptor()
    with pytest.raises(InputError):
        DesignDescriptor(sampling="population", rho_g=0.5)
    with pytest.raises(InputError):
        DesignDescriptor(sampling="oneway-cluster", rho_g=1.0, rho_u=1.0, rho_h=1.0)
    with pytest.raises(InputError):
        DesignDescriptor(sampling="oneway-cluster", rho_g=1.5)
    d = DesignDescriptor(sampling="oneway-cluster", rho_g=0.5, assignment="oneway-g")
    assert d.has_cluster_sampling and d.has_cluster_assignment
