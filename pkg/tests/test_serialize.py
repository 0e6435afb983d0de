import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxdiff.errors import DimensionError
from voxdiff.serialize import X_MAJOR, Y_MAJOR, dump_rows, gather, serialize, unserialize
from voxdiff.voxel_grid import SparseTensor

from helpers import random_tensor

THREE = SparseTensor([[0, 0, 0], [0, 0, 1], [0, 1, 0]], [[1.0], [2.0], [3.0]], (1, 2, 2))


def ordered_coords(seq, t):
    return [tuple(t.coords[i]) for i in seq.indices]


def test_x_major_example():
    assert ordered_coords(serialize(THREE, X_MAJOR), THREE) == [(0, 0, 0), (0, 0, 1), (0, 1, 0)]


def test_y_major_example():
    assert ordered_coords(serialize(THREE, Y_MAJOR), THREE) == [(0, 0, 0), (0, 1, 0), (0, 0, 1)]


def swap_xy(t):
    nz, ny, nx = t.shape
    return SparseTensor(t.coords[:, [0, 2, 1]], t.features, (nz, nx, ny))


@pytest.mark.parametrize("seed", range(10))
def test_y_major_is_x_major_of_swapped_tensor(seed):
    t = random_tensor(np.random.default_rng(seed), (3, 5, 7), channels=1)
    s = swap_xy(t)
    y_order = gather(serialize(t, Y_MAJOR), t)
    x_order = gather(serialize(s, X_MAJOR), s)
    np.testing.assert_array_equal(y_order, x_order)


@pytest.mark.parametrize("order", [X_MAJOR, Y_MAJOR])
@pytest.mark.parametrize("seed", range(5))
def test_round_trip_bit_exact(order, seed):
    t = random_tensor(np.random.default_rng(seed), (4, 6, 6), channels=3)
    seq = serialize(t, order, 5)
    assert unserialize(seq, gather(seq, t), t) == t
    assert sorted(seq.indices.tolist()) == list(range(t.num_active))


def test_zero_features():
    t = random_tensor(np.random.default_rng(0), (4, 4, 4), channels=2)
    seq = serialize(t)
    out = unserialize(seq, np.zeros((len(seq), 2)), t)
    np.testing.assert_array_equal(out.coords, t.coords)
    assert not out.features.any()


def test_scatter_oracle():
    rng = np.random.default_rng(1)
    t = random_tensor(rng, (4, 6, 6), channels=2)
    seq = serialize(t, Y_MAJOR, 4)
    f = rng.normal(size=(len(seq), 2))
    out = unserialize(seq, f, t)
    expected = {}
    for pos, row in enumerate(seq.indices.tolist()):
        expected[tuple(t.coords[row])] = f[pos]
    for c, row in zip(out.coords, out.features):
        np.testing.assert_array_equal(row, expected[tuple(c)])


def test_groups():
    t = random_tensor(np.random.default_rng(2), (4, 6, 6), channels=1, density=0.5)
    for g in (1, 3, 7, 64, 1000):
        seq = serialize(t, X_MAJOR, g)
        assert seq.num_groups == -(-t.num_active // g) == len(seq.groups)
        sizes = [s.stop - s.start for s in seq.groups]
        assert all(n == g for n in sizes[:-1]) and 1 <= sizes[-1] <= g
        assert seq.groups[0].start == 0 and seq.groups[-1].stop == len(seq)


def test_empty_tensor():
    t = SparseTensor.empty((2, 2, 2), 3)
    seq = serialize(t, Y_MAJOR, 4)
    assert len(seq) == 0 and seq.num_groups == 0 and seq.groups == []
    assert unserialize(seq, np.zeros((0, 3)), t) == t


def test_errors():
    t = random_tensor(np.random.default_rng(3), (2, 3, 3), channels=1)
    with pytest.raises(ValueError):
        serialize(t, X_MAJOR, 0)
    with pytest.raises(ValueError):
        serialize(t, "z_major")
    with pytest.raises(DimensionError):
        unserialize(serialize(t), np.zeros((t.num_active + 1, 1)), t)


def test_dump_rows():
    rows = list(dump_rows(serialize(THREE, Y_MAJOR, 2), THREE))
    assert rows == [(0, 0, 0, 0, 0), (2, 0, 1, 0, 0), (1, 0, 0, 1, 1)]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), order=st.sampled_from([X_MAJOR, Y_MAJOR]))
def test_order_ignores_row_shuffle(seed, order):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, (3, 4, 5), channels=1)
    perm = rng.permutation(t.num_active)
    shuffled = SparseTensor(t.coords[perm], t.features[perm], t.shape)
    np.testing.assert_array_equal(gather(serialize(t, order), t), gather(serialize(shuffled, order), shuffled))
