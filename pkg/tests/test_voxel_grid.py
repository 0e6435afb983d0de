import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxdiff.errors import DimensionError, EmptyInputError
from voxdiff.voxel_grid import (
    GridSpec,
    SparseTensor,
    densify,
    read_points_csv,
    refine_grid,
    sparsify,
    voxelize,
    write_points_csv,
)

from helpers import random_tensor
from oracles import dense_voxelize, voxelize_bruteforce

UNIT = GridSpec((0, 0, 0), (0.1, 0.1, 0.1), (4, 4, 4))


def test_single_point_single_voxel():
    t, dropped = voxelize([[0.05, 0.05, 0.05]], [[1.0]], UNIT)
    assert dropped == 0
    assert t.coords.tolist() == [[0, 0, 0]]
    assert t.features.tolist() == [[1.0]]


def test_two_points_same_cell_average():
    t, _ = voxelize([[0.01, 0.02, 0.03], [0.07, 0.08, 0.09]], [[1.0], [3.0]], UNIT)
    assert t.num_active == 1
    assert t.features.tolist() == [[2.0]]


def test_coordinate_order_is_z_major():
    # x index 3, y index 1, z index 2
    t, _ = voxelize([[0.35, 0.15, 0.25]], [[1.0]], UNIT)
    assert t.coords.tolist() == [[2, 1, 3]]


def test_random_points_match_groupby_oracle():
    rng = np.random.default_rng(7)
    grid = GridSpec((0, 0, 0), (0.25, 0.25, 0.25), (4, 4, 4))
    pts = rng.uniform(0, 1, size=(100, 3))
    feats = rng.normal(size=(100, 3))
    t, dropped = voxelize(pts, feats, grid)
    expected = voxelize_bruteforce(pts, feats, grid.origin, grid.voxel_size, grid.shape)
    assert dropped == 0
    got = {tuple(c): f for c, f in zip(t.coords.tolist(), t.features.tolist())}
    assert got == expected


def test_out_of_bounds_points_are_counted():
    t, dropped = voxelize([[0.05, 0.05, 0.05], [-1, 0, 0], [0.05, 0.05, 9.0]], [[1], [2], [3]], UNIT)
    assert dropped == 2
    assert t.num_active == 1


def test_no_point_in_bounds():
    with pytest.raises(EmptyInputError):
        voxelize([[5.0, 5.0, 5.0]], [[1.0]], UNIT)


def test_feature_length_mismatch():
    with pytest.raises(DimensionError):
        voxelize([[0.05, 0.05, 0.05], [0.1, 0.1, 0.1]], [[1.0]], UNIT)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200))
def test_voxelize_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 0.4, size=(n, 3))
    feats = rng.normal(size=(n, 2))
    perm = rng.permutation(n)
    a, _ = voxelize(pts, feats, UNIT)
    b, _ = voxelize(pts[perm], feats[perm], UNIT)
    assert a == b


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_voxel_mean_point_lies_inside_voxel(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 0.4, size=(60, 3))
    # use the coordinates themselves as features so the voxel mean is the centroid
    t, _ = voxelize(pts, pts, UNIT)
    lo = t.coords[:, ::-1] * 0.1
    assert (t.features >= lo - 1e-12).all() and (t.features <= lo + 0.1 + 1e-12).all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 500), side=st.integers(1, 8))
def test_densify_of_voxelize_matches_dense_bruteforce(seed, n, side):
    rng = np.random.default_rng(seed)
    grid = GridSpec((0, 0, 0), (0.5, 0.5, 0.5), (side, side, side))
    pts = rng.uniform(0, 0.5 * side, size=(n, 3))
    feats = rng.normal(size=(n, 2))
    t, _ = voxelize(pts, feats, grid)
    np.testing.assert_array_equal(
        densify(t), dense_voxelize(pts, feats, grid.origin, grid.voxel_size, grid.shape)
    )


def test_densify_empty_and_single():
    assert not densify(SparseTensor.empty((3, 3, 3), 2)).any()
    t = SparseTensor([[1, 1, 1]], [[5.0]], (3, 3, 3))
    d = densify(t)
    assert d[1, 1, 1, 0] == 5.0
    d[1, 1, 1, 0] = 0
    assert not d.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_densify_round_trip(seed):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, (5, 6, 7), channels=3)
    assert sparsify(densify(t)) == t


def test_canonical_order_independent_of_construction_order():
    rng = np.random.default_rng(3)
    t = random_tensor(rng, (4, 4, 4), channels=2)
    perm = rng.permutation(t.num_active)
    assert SparseTensor(t.coords[perm], t.features[perm], t.shape) == t


def test_sparse_tensor_rejects_duplicates_and_out_of_bounds():
    with pytest.raises(ValueError):
        SparseTensor([[0, 0, 0], [0, 0, 0]], [[1.0], [2.0]], (2, 2, 2))
    with pytest.raises(DimensionError):
        SparseTensor([[0, 0, 2]], [[1.0]], (2, 2, 2))
    with pytest.raises(DimensionError):
        SparseTensor([[0, 0, 0]], [[1.0], [2.0]], (2, 2, 2))


def test_sparse_tensor_is_read_only():
    t = SparseTensor([[0, 0, 0]], [[1.0]], (2, 2, 2))
    with pytest.raises(ValueError):
        t.features[0, 0] = 3.0


def test_refine_grid_waymo_only_diffusion_size():
    g = GridSpec((0, 0, 0), (0.32, 0.32, 0.1875), (8, 10, 12))
    fine = refine_grid(g, 4)
    assert fine.voxel_size == pytest.approx((0.08, 0.08, 0.1875), abs=1e-15)
    assert fine.shape == (8, 40, 48)
    assert fine.origin == g.origin


def test_refine_grid_identity_and_factor_two():
    g = GridSpec((1, 2, 3), (0.2, 0.2, 0.5), (8, 10, 12))
    assert refine_grid(g, 1) == g
    assert refine_grid(g, 2).shape == (8, 20, 24)
    with pytest.raises(ValueError):
        refine_grid(g, 0)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (0.1, 0.0, 0.1), (1, 1, 1))
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (0.1, 0.1, 0.1), (1, 0, 1))


def test_points_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10, 3))
    feats = rng.normal(size=(10, 2))
    path = tmp_path / "pts.csv"
    write_points_csv(path, pts, feats)
    p2, f2 = read_points_csv(path)
    np.testing.assert_array_equal(p2, pts)
    np.testing.assert_array_equal(f2, feats)


def test_points_csv_without_header(tmp_path):
    path = tmp_path / "pts.csv"
    path.write_text("0.05,0.05,0.05,1.0\n0.15,0.05,0.05,2.0\n")
    pts, feats = read_points_csv(path)
    assert pts.shape == (2, 3) and feats.tolist() == [[1.0], [2.0]]
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,z,f0\n1,2,3\n")
    with pytest.raises(DimensionError):
        read_points_csv(bad)
