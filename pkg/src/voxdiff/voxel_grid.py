"""Sparse voxel tensors, point-cloud voxelization and dense conversion.

Coordinates are integer triples in ``(iz, iy, ix)`` order everywhere in the
package.  A :class:`SparseTensor` always stores its active coordinates in
lexicographic order so two tensors built from the same data compare equal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyInputError

Shape3 = tuple[int, int, int]


def linear_keys(coords: np.ndarray, shape: Shape3) -> np.ndarray:
    """Row-major linear index of each coordinate; sorts like the coords do."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    _, ny, nx = shape
    return (coords[:, 0] * ny + coords[:, 1]) * nx + coords[:, 2]


def keys_to_coords(keys: np.ndarray, shape: Shape3) -> np.ndarray:
    _, ny, nx = shape
    keys = np.asarray(keys, dtype=np.int64)
    ix = keys % nx
    iy = (keys // nx) % ny
    iz = keys // (nx * ny)
    return np.stack([iz, iy, ix], axis=1)


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel grid.

    ``origin`` and ``voxel_size`` are given in ``(x, y, z)`` metres, ``shape``
    in ``(nz, ny, nx)`` voxels.
    """

    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    shape: Shape3

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.shape) != 3:
            raise DimensionError("origin, voxel_size and shape must have 3 components")
        if min(self.voxel_size) <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if min(self.shape) < 1:
            raise ValueError(f"shape components must be >= 1, got {self.shape}")

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical size in (x, y, z) metres."""
        nz, ny, nx = self.shape
        sx, sy, sz = self.voxel_size
        return (nx * sx, ny * sy, nz * sz)

    def voxel_centers(self, coords: np.ndarray) -> np.ndarray:
        """(M, 3) array of (x, y, z) centers for (iz, iy, ix) coords."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        ox, oy, oz = self.origin
        sx, sy, sz = self.voxel_size
        return np.stack(
            [
                ox + (coords[:, 2] + 0.5) * sx,
                oy + (coords[:, 1] + 0.5) * sy,
                oz + (coords[:, 0] + 0.5) * sz,
            ],
            axis=1,
        )

    def coarsen(self, stride: Shape3, shape: Shape3) -> "GridSpec":
        """Grid seen by a layer stack whose stride product is ``stride`` (z, y, x)."""
        sx, sy, sz = self.voxel_size
        return GridSpec(self.origin, (sx * stride[2], sy * stride[1], sz * stride[0]), shape)


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Active voxel coordinates with one feature row each.

    The constructor sorts rows into canonical order and rejects duplicate or
    out-of-bounds coordinates.  Arrays are stored read-only.
    """

    coords: np.ndarray
    features: np.ndarray
    shape: Shape3
    _keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        coords = np.array(self.coords, dtype=np.int64).reshape(-1, 3)
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {features.shape}")
        if features.shape[0] != coords.shape[0]:
            raise DimensionError(
                f"{features.shape[0]} feature rows for {coords.shape[0]} coordinates"
            )
        if len(shape) != 3 or min(shape) < 1:
            raise DimensionError(f"bad spatial shape {shape}")
        if coords.size and ((coords < 0).any() or (coords >= np.array(shape)).any()):
            raise DimensionError(f"coordinates outside shape {shape}")
        keys = linear_keys(coords, shape)
        if keys.size > 1 and not (np.diff(keys) > 0).all():
            order = np.argsort(keys, kind="stable")
            keys, coords, features = keys[order], coords[order], features[order]
            if (np.diff(keys) == 0).any():
                raise ValueError("duplicate coordinates in sparse tensor")
        for arr in (coords, features, keys):
            arr.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "_keys", keys)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        """Same active set, new features (rows in this tensor's order)."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != self.num_active:
            raise DimensionError(
                f"expected ({self.num_active}, C) features, got {features.shape}"
            )
        return SparseTensor(self.coords, features, self.shape)

    @classmethod
    def empty(cls, shape: Shape3, channels: int) -> "SparseTensor":
        return cls(np.zeros((0, 3), np.int64), np.zeros((0, channels)), shape)

    def __eq__(self, other):
        if not isinstance(other, SparseTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.features.shape == other.features.shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"SparseTensor(num_active={self.num_active}, channels={self.channels}, "
            f"shape={self.shape})"
        )


def voxelize(points, features, grid: GridSpec) -> tuple[SparseTensor, int]:
    """Mean-pool point features into the cells of ``grid``.

    Returns the sparse tensor and the number of points dropped for lying
    outside the grid.
    """
    points = np.asarray(points, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionError(f"points must be (N, 3), got {points.shape}")
    if features.ndim == 1:
        features = features[:, None]
    if features.ndim != 2 or features.shape[0] != points.shape[0]:
        raise DimensionError(
            f"features must be (N, F) with N={points.shape[0]}, got {features.shape}"
        )
    if not np.isfinite(points).all():
        raise ValueError("point coordinates must be finite")

    rel = (points - np.asarray(grid.origin)) / np.asarray(grid.voxel_size)
    idx_xyz = np.floor(rel).astype(np.int64)
    nz, ny, nx = grid.shape
    inside = (
        (idx_xyz >= 0).all(axis=1)
        & (idx_xyz[:, 0] < nx)
        & (idx_xyz[:, 1] < ny)
        & (idx_xyz[:, 2] < nz)
    )
    dropped = int((~inside).sum())
    if not inside.any():
        raise EmptyInputError("no point falls inside the grid")

    coords = idx_xyz[inside][:, ::-1]
    feats = features[inside]
    keys = linear_keys(coords, grid.shape)
    order = np.argsort(keys, kind="stable")
    keys, feats = keys[order], feats[order]

    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    bounds = np.r_[starts, keys.size]
    # correctly rounded sums: the mean cannot depend on point order
    means = np.array(
        [
            [math.fsum(col) / (hi - lo) for col in feats[lo:hi].T]
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ],
        dtype=np.float64,
    ).reshape(starts.size, feats.shape[1])
    cell_coords = keys_to_coords(keys[starts], grid.shape)
    return SparseTensor(cell_coords, means, grid.shape), dropped


def densify(t: SparseTensor) -> np.ndarray:
    """Dense ``(nz, ny, nx, C)`` array, zero at inactive sites."""
    dense = np.zeros(t.shape + (t.channels,), dtype=np.float64)
    if t.num_active:
        c = t.coords
        dense[c[:, 0], c[:, 1], c[:, 2]] = t.features
    return dense


def sparsify(dense: np.ndarray) -> SparseTensor:
    """Inverse of :func:`densify` for tensors with no all-zero active rows."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 4:
        raise DimensionError(f"expected (nz, ny, nx, C) array, got {dense.shape}")
    mask = (dense != 0).any(axis=-1)
    coords = np.argwhere(mask)
    return SparseTensor(coords, dense[mask], dense.shape[:3])


def refine_grid(grid: GridSpec, factor_xy: int) -> GridSpec:
    """Split every voxel into ``factor_xy`` x ``factor_xy`` columns in x and y."""
    if factor_xy < 1 or int(factor_xy) != factor_xy:
        raise ValueError(f"factor_xy must be a positive integer, got {factor_xy}")
    f = int(factor_xy)
    sx, sy, sz = grid.voxel_size
    nz, ny, nx = grid.shape
    return GridSpec(grid.origin, (sx / f, sy / f, sz), (nz, ny * f, nx * f))


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``x,y,z,f0[,f1,...]`` rows; a non-numeric first field marks a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            if i == 0:
                try:
                    float(row[0])
                except ValueError:
                    continue
            rows.append([float(v) for v in row])
    if not rows:
        raise EmptyInputError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or widths.pop() < 4:
        raise DimensionError(f"{path}: rows must all have the form x,y,z,f0[,f1,...]")
    arr = np.array(rows, dtype=np.float64)
    return arr[:, :3], arr[:, 3:]


def write_points_csv(path, points, features) -> None:
    points = np.asarray(points, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64).reshape(points.shape[0], -1)
    header = ["x", "y", "z"] + [f"f{i}" for i in range(features.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p, f in zip(points, features):
            w.writerow([repr(float(v)) for v in (*p, *f)])
