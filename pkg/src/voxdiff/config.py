"""Run configuration: flat ``key = value`` text with dotted section keys.

Example::

    preset = waymo
    grid.shape = 4,32,32
    vdm.channel_plan = 64:32,32:64,64:128
    pipeline = vdm_ssm
    serialize.group_size = 64

Values are comma-separated for tuples.  ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .scene import SceneParams
from .serialize import ORDERS, X_MAJOR
from .vdm import DEFAULT_CHANNEL_PLAN, DEFAULT_LIFT_CHANNELS
from .voxel_grid import GridSpec

# voxel sizes in (x, y, z) metres
PRESETS = {
    "waymo": (0.08, 0.08, 0.1875),
    "nuscenes": (0.075, 0.075, 0.25),
    "argoverse2": (0.1, 0.1, 0.25),
    "once": (0.1, 0.1, 0.25),
}

PIPELINES = ("vdm_ssm", "vdm_attn", "only_diffusion")


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = field(
        default_factory=lambda: GridSpec((0.0, 0.0, 0.0), PRESETS["waymo"], (4, 32, 32))
    )
    preset: str = ""
    lift_channels: int = DEFAULT_LIFT_CHANNELS
    channel_plan: tuple[tuple[int, int], ...] = DEFAULT_CHANNEL_PLAN
    z_stride: int = 1
    pipeline: str = "vdm_ssm"
    order: str = X_MAJOR
    group_size: int = 64
    seq_blocks: int = 2
    ssm_state_dim: int = 4
    ssm_delta: float = 0.1
    attn_d_k: int = 16
    seed: int = 0
    num_scenes: int = 4
    num_boxes: int = 3
    points_per_box: int = 60
    background_points: int = 200
    feature_dim: int = 2
    output_dir: str = "out"

    def __post_init__(self):
        object.__setattr__(
            self, "channel_plan", tuple(tuple(int(c) for c in p) for p in self.channel_plan)
        )
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.order not in ORDERS:
            raise ConfigError(f"serialize.order must be one of {ORDERS}, got {self.order!r}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        for name in ("group_size", "seq_blocks", "ssm_state_dim", "attn_d_k",
                     "lift_channels", "z_stride", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("num_scenes", "num_boxes", "points_per_box", "background_points", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.ssm_delta <= 0:
            raise ConfigError("ssm.delta must be positive")
        if len(self.channel_plan) < 2:
            raise ConfigError("vdm.channel_plan needs at least two stages")
        width = self.lift_channels
        for i, (cin, cout) in enumerate(self.channel_plan):
            if cin != width:
                raise ConfigError(
                    f"vdm.channel_plan stage {i} takes {cin} channels but receives {width}"
                )
            width = cout

    @property
    def only_diffusion(self) -> bool:
        return self.pipeline == "only_diffusion"

    def scene_params(self) -> SceneParams:
        return SceneParams(
            self.grid,
            num_boxes=self.num_boxes,
            points_per_box=self.points_per_box,
            background_points=self.background_points,
            feature_dim=self.feature_dim,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _ints(v):
    return tuple(int(x) for x in v.split(","))


def _floats(v):
    return tuple(float(x) for x in v.split(","))


def _plan(v):
    try:
        return tuple(tuple(int(c) for c in pair.split(":")) for pair in v.split(","))
    except ValueError as e:
        raise ConfigError(f"bad channel plan {v!r}; expected e.g. 64:32,32:64") from e


def _fmt_tuple(t):
    return ",".join(repr(x) for x in t)


# config key -> (field name, parser, formatter)
_KEYS = {
    "preset": ("preset", str, str),
    "vdm.lift_channels": ("lift_channels", int, str),
    "vdm.channel_plan": ("channel_plan", _plan, lambda p: ",".join(f"{a}:{b}" for a, b in p)),
    "vdm.z_stride": ("z_stride", int, str),
    "pipeline": ("pipeline", str, str),
    "serialize.order": ("order", str, str),
    "serialize.group_size": ("group_size", int, str),
    "serialize.blocks": ("seq_blocks", int, str),
    "ssm.state_dim": ("ssm_state_dim", int, str),
    "ssm.delta": ("ssm_delta", float, repr),
    "attn.d_k": ("attn_d_k", int, str),
    "seed": ("seed", int, str),
    "scene.count": ("num_scenes", int, str),
    "scene.boxes": ("num_boxes", int, str),
    "scene.points_per_box": ("points_per_box", int, str),
    "scene.background_points": ("background_points", int, str),
    "scene.feature_dim": ("feature_dim", int, str),
    "output_dir": ("output_dir", str, str),
}
_GRID_KEYS = {"grid.origin": "origin", "grid.voxel_size": "voxel_size", "grid.shape": "shape"}


def parse_config(text: str) -> RunConfig:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS and key not in _GRID_KEYS and key != "vdm.only_diffusion":
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    return config_from_values(values)


def config_from_values(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    kwargs = {}
    grid = {"origin": base.grid.origin, "voxel_size": base.grid.voxel_size, "shape": base.grid.shape}
    try:
        preset = values.get("preset", base.preset)
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            grid["voxel_size"] = PRESETS[preset]
        for key, field_name in _GRID_KEYS.items():
            if key in values:
                parse = _ints if field_name == "shape" else _floats
                grid[field_name] = parse(values[key])
        for key, value in values.items():
            if key in _KEYS:
                name, parse, _ = _KEYS[key]
                kwargs[name] = parse(value)
        if values.get("vdm.only_diffusion", "").lower() in ("1", "true", "yes"):
            kwargs["pipeline"] = "only_diffusion"
        kwargs["grid"] = GridSpec(**grid)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    return dataclasses.replace(base, **kwargs)


def dump_config(cfg: RunConfig) -> str:
    lines = [
        f"grid.origin = {_fmt_tuple(cfg.grid.origin)}",
        f"grid.voxel_size = {_fmt_tuple(cfg.grid.voxel_size)}",
        f"grid.shape = {_fmt_tuple(cfg.grid.shape)}",
    ]
    for key, (name, _, fmt) in _KEYS.items():
        value = getattr(cfg, name)
        if key == "preset" and not value:
            continue
        lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
