"""Overall / foreground voxel counting before and after a pipeline stage.

Counts are averaged per frame: the total over all frames divided by the
number of frames.  A voxel is foreground when its center lies inside any
ground-truth box.
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyInputError
from .voxel_grid import GridSpec, Shape3, SparseTensor, voxelize


@dataclass(frozen=True)
class Box3D:
    """Box with ``center`` (x, y, z), ``size`` (l, w, h) and ``yaw`` about z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", float(self.yaw))
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")

    def contains(self, xyz) -> np.ndarray:
        """Boolean mask for (M, 3) points; boundaries count as inside."""
        p = np.asarray(xyz, dtype=np.float64).reshape(-1, 3) - np.asarray(self.center)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local_x = c * p[:, 0] + s * p[:, 1]
        local_y = -s * p[:, 0] + c * p[:, 1]
        l, w, h = self.size
        return (
            (np.abs(local_x) <= l / 2) & (np.abs(local_y) <= w / 2) & (np.abs(p[:, 2]) <= h / 2)
        )

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw}


def foreground_mask(coords, grid: GridSpec, boxes) -> np.ndarray:
    centers = grid.voxel_centers(coords)
    mask = np.zeros(centers.shape[0], dtype=bool)
    for box in boxes:
        mask |= box.contains(centers)
    return mask


def is_foreground(coord, grid: GridSpec, boxes) -> bool:
    return bool(foreground_mask(np.asarray(coord).reshape(1, 3), grid, boxes)[0])


@dataclass(frozen=True)
class Stage:
    """A pipeline step whose output active set gets counted.

    ``stride`` is the product of all layer strides in (z, y, x); it fixes the
    voxel size of the output grid used for the foreground test.
    """

    name: str
    fn: Callable[[SparseTensor], SparseTensor]
    stride: Shape3 = (1, 1, 1)

    def __call__(self, t: SparseTensor) -> SparseTensor:
        return self.fn(t)


def identity_stage() -> Stage:
    return Stage("identity", lambda t: t, (1, 1, 1))


def vdm_stage(spec, name: str | None = None) -> Stage:
    from .vdm import vdm_forward

    if name is None:
        name = "only_diffusion" if spec.only_diffusion else "vdm"
    return Stage(name, lambda t: vdm_forward(t, spec), spec.stride_product())


@dataclass(frozen=True)
class FrameCounts:
    overall_before: int
    foreground_before: int
    overall_after: int
    foreground_after: int


@dataclass(frozen=True)
class DiffusionReport:
    frames: int
    overall_before: float
    overall_after: float
    foreground_before: float
    foreground_after: float
    stage: str = ""
    per_frame: tuple[FrameCounts, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "overall_before": self.overall_before,
            "overall_after": self.overall_after,
            "foreground_before": self.foreground_before,
            "foreground_after": self.foreground_after,
            "stage": self.stage,
            "per_frame": [vars(f) for f in self.per_frame],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_frames(cls, frames, stage: str = "") -> "DiffusionReport":
        frames = tuple(frames)
        if not frames:
            raise EmptyInputError("report needs at least one frame")
        n = len(frames)
        # integer totals first, one division each
        return cls(
            frames=n,
            overall_before=sum(f.overall_before for f in frames) / n,
            overall_after=sum(f.overall_after for f in frames) / n,
            foreground_before=sum(f.foreground_before for f in frames) / n,
            foreground_after=sum(f.foreground_after for f in frames) / n,
            stage=stage,
            per_frame=frames,
        )


def count_frame(scene, grid: GridSpec, stage: Stage) -> tuple[FrameCounts, SparseTensor, SparseTensor]:
    """Counts for one scene plus the input and output tensors."""
    t_in, _ = voxelize(scene.points, scene.features, grid)
    fg_in = int(foreground_mask(t_in.coords, grid, scene.boxes).sum())
    t_out = stage(t_in)
    out_grid = grid.coarsen(stage.stride, t_out.shape)
    fg_out = int(foreground_mask(t_out.coords, out_grid, scene.boxes).sum())
    counts = FrameCounts(t_in.num_active, fg_in, t_out.num_active, fg_out)
    return counts, t_in, t_out


def report(scenes, grid: GridSpec, stage: Stage | None = None, workers: int = 1) -> DiffusionReport:
    """Per-frame mean voxel counts before and after ``stage``.

    Scenes may be processed on ``workers`` threads; the accumulation order is
    always the scene order.
    """
    scenes = list(scenes)
    if not scenes:
        raise EmptyInputError("report needs at least one scene")
    stage = stage or identity_stage()

    def one(scene):
        return count_frame(scene, grid, stage)[0]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(one, scenes))
    else:
        frames = [one(s) for s in scenes]
    return DiffusionReport.from_frames(frames, stage.name)


def format_table(rows) -> str:
    """Plain-text table in the layout: method | overall count | foreground count.

    ``rows`` is an iterable of ``(label, overall, foreground)``.
    """
    rows = [(str(a), f"{b:.2f}" if isinstance(b, float) else str(b),
             f"{c:.2f}" if isinstance(c, float) else str(c)) for a, b, c in rows]
    head = ("Method", "Overall Voxel Count", "Foreground Voxel Count")
    widths = [max(len(r[i]) for r in rows + [head]) for i in range(3)]
    line = "-+-".join("-" * w for w in widths)
    fmt = lambda r: " | ".join(v.ljust(w) for v, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(head), line] + [fmt(r) for r in rows]) + "\n"


def report_table(rep: DiffusionReport) -> str:
    return format_table([
        ("input (before)", rep.overall_before, rep.foreground_before),
        (f"{rep.stage} (after)", rep.overall_after, rep.foreground_after),
    ])


def slice_images(t: SparseTensor, fg: np.ndarray) -> list[np.ndarray]:
    """One uint8 (ny, nx) image per z slice: 255 foreground, 128 other actives."""
    nz, ny, nx = t.shape
    vol = np.zeros((nz, ny, nx), dtype=np.uint8)
    c = t.coords
    vol[c[:, 0], c[:, 1], c[:, 2]] = np.where(fg, 255, 128).astype(np.uint8)
    return list(vol)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def write_slices(out_dir, prefix: str, t: SparseTensor, grid: GridSpec, boxes) -> list[str]:
    """Write every z slice of ``t`` as ``<prefix>_z<k>.pgm``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    fg = foreground_mask(t.coords, grid, boxes)
    paths = []
    for k, img in enumerate(slice_images(t, fg)):
        path = os.path.join(out_dir, f"{prefix}_z{k:03d}.pgm")
        write_pgm(path, img)
        paths.append(path)
    return paths
