"""Seeded synthetic scenes: oriented boxes with points inside and clutter outside.

Randomness comes from numpy's ``PCG64`` bit generator.  Per-scene seeds are
derived from a run seed with ``SeedSequence([run_seed, index])`` so scenes
can be regenerated independently and in any order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .stats import Box3D
from .voxel_grid import GridSpec, read_points_csv, write_points_csv


@dataclass(frozen=True)
class SceneParams:
    grid: GridSpec
    num_boxes: int = 3
    points_per_box: int = 60
    background_points: int = 200
    feature_dim: int = 2
    box_size: tuple[float, float] = (0.2, 0.35)
    """Box length/width range as a fraction of the smaller xy extent."""
    box_height: tuple[float, float] = (0.4, 0.8)
    """Box height range as a fraction of the z extent."""
    max_retries: int = 1000

    def __post_init__(self):
        for name in ("num_boxes", "points_per_box", "background_points"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


@dataclass(frozen=True, eq=False)
class Scene:
    points: np.ndarray
    features: np.ndarray
    boxes: tuple[Box3D, ...]
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.boxes == other.boxes
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


def scene_seed(run_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(run_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _box_corners_xy(box: Box3D) -> np.ndarray:
    l, w, _ = box.size
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local = np.array([[l, w], [l, -w], [-l, w], [-l, -w]]) / 2
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center[:2])


def _inside_any(xyz: np.ndarray, boxes) -> np.ndarray:
    mask = np.zeros(xyz.shape[0], dtype=bool)
    for b in boxes:
        mask |= b.contains(xyz)
    return mask


def gen_scene(params: SceneParams, seed: int) -> Scene:
    """Place non-overlapping boxes, then sample points inside and outside them."""
    rng = np.random.Generator(np.random.PCG64(seed))
    g = params.grid
    lo = np.asarray(g.origin)
    ext = np.asarray(g.extent)
    hi = lo + ext
    span_xy = min(ext[0], ext[1])

    boxes: list[Box3D] = []
    radii: list[float] = []
    tries = 0
    while len(boxes) < params.num_boxes:
        tries += 1
        if tries > params.max_retries:
            raise GenerationError(
                f"placed {len(boxes)} of {params.num_boxes} boxes after {params.max_retries} tries"
            )
        l, w = rng.uniform(*params.box_size, size=2) * span_xy
        h = rng.uniform(*params.box_height) * ext[2]
        yaw = rng.uniform(-np.pi, np.pi)
        cx, cy = rng.uniform(lo[:2], hi[:2])
        cz = rng.uniform(lo[2] + h / 2, hi[2] - h / 2)
        box = Box3D((cx, cy, cz), (l, w, h), yaw)
        corners = _box_corners_xy(box)
        if (corners < lo[:2]).any() or (corners > hi[:2]).any():
            continue
        r = 0.5 * np.hypot(l, w)
        if any(np.hypot(cx - b.center[0], cy - b.center[1]) < r + rb for b, rb in zip(boxes, radii)):
            continue
        boxes.append(box)
        radii.append(r)

    pts, feats = [], []
    for box in boxes:
        n = params.points_per_box
        local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.asarray(box.size)
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        world = np.empty_like(local)
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
        world[:, 2] = local[:, 2] + box.center[2]
        pts.append(world)
        feats.append(_features(rng, n, params.feature_dim))

    need = params.background_points
    bg = np.zeros((0, 3))
    for _ in range(params.max_retries):
        if bg.shape[0] >= need:
            break
        cand = rng.uniform(lo, hi, size=(max(need - bg.shape[0], 1) * 2, 3))
        cand = cand[~_inside_any(cand, boxes)]
        bg = np.concatenate([bg, cand])
    if bg.shape[0] < need:
        raise GenerationError("could not place background points outside the boxes")
    bg = bg[:need]
    pts.append(bg)
    feats.append(_features(rng, need, params.feature_dim))

    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    features = np.concatenate(feats) if feats else np.zeros((0, params.feature_dim))
    return Scene(points, features, tuple(boxes), int(seed))


def _features(rng, n, dim):
    f = np.empty((n, dim))
    f[:, 0] = rng.uniform(0.0, 1.0, n)
    if dim > 1:
        f[:, 1:] = rng.normal(size=(n, dim - 1))
    return f


def gen_scenes(params: SceneParams, run_seed: int, count: int) -> list[Scene]:
    return [gen_scene(params, scene_seed(run_seed, i)) for i in range(count)]


def save_scene(scene: Scene, points_path, boxes_path) -> None:
    write_points_csv(points_path, scene.points, scene.features)
    with open(boxes_path, "w") as fh:
        json.dump({"seed": scene.seed, "boxes": [b.to_dict() for b in scene.boxes]}, fh, indent=2)
        fh.write("\n")


def load_scene(points_path, boxes_path=None) -> Scene:
    points, features = read_points_csv(points_path)
    boxes, seed = (), 0
    if boxes_path is not None:
        with open(boxes_path) as fh:
            data = json.load(fh)
        seed = int(data.get("seed", 0))
        boxes = tuple(Box3D(b["center"], b["size"], b.get("yaw", 0.0)) for b in data["boxes"])
    return Scene(points, features, boxes, seed)
