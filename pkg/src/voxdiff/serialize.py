"""Flatten sparse grids into 1-D voxel sequences and back."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .voxel_grid import SparseTensor

X_MAJOR = "x_major"
Y_MAJOR = "y_major"
ORDERS = (X_MAJOR, Y_MAJOR)


@dataclass(frozen=True, eq=False)
class VoxelSequence:
    """``indices[j]`` is the tensor row at sequence position ``j``."""

    order: str
    indices: np.ndarray
    group_size: int

    @property
    def groups(self) -> list[slice]:
        n = self.indices.size
        return [slice(s, min(s + self.group_size, n)) for s in range(0, n, self.group_size)]

    @property
    def num_groups(self) -> int:
        return -(-self.indices.size // self.group_size)

    def __len__(self):
        return self.indices.size


def serialize(t: SparseTensor, order: str = X_MAJOR, group_size: int = 64) -> VoxelSequence:
    """Scan active voxels in x-major ``(iz, iy, ix)`` or y-major ``(iz, ix, iy)`` order."""
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    c = t.coords
    if order == X_MAJOR:
        idx = np.lexsort((c[:, 2], c[:, 1], c[:, 0]))
    elif order == Y_MAJOR:
        idx = np.lexsort((c[:, 1], c[:, 2], c[:, 0]))
    else:
        raise ValueError(f"unknown order {order!r}; expected one of {ORDERS}")
    idx = idx.astype(np.int64)
    idx.flags.writeable = False
    return VoxelSequence(order, idx, int(group_size))


def gather(seq: VoxelSequence, t: SparseTensor) -> np.ndarray:
    """Feature rows of ``t`` in sequence order."""
    if seq.indices.size != t.num_active:
        raise DimensionError("sequence and tensor have different active counts")
    return t.features[seq.indices]


def unserialize(seq: VoxelSequence, features, t: SparseTensor) -> SparseTensor:
    """Scatter sequence-ordered ``features`` back onto the rows of ``t``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != seq.indices.size:
        raise DimensionError(
            f"expected {seq.indices.size} feature rows, got shape {features.shape}"
        )
    if seq.indices.size != t.num_active:
        raise DimensionError("sequence and tensor have different active counts")
    out = np.empty_like(features)
    out[seq.indices] = features
    return t.with_features(out)


def dump_rows(seq: VoxelSequence, t: SparseTensor):
    """``(row_index, iz, iy, ix, group)`` tuples in sequence order."""
    for pos, row in enumerate(seq.indices.tolist()):
        iz, iy, ix = t.coords[row].tolist()
        yield row, iz, iy, ix, pos // seq.group_size
