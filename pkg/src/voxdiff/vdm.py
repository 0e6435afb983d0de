"""Voxel diffusion stack: sparse residual blocks and the staged module.

Full mode runs::

    lift -> [subm -> SRB -> spconv] x stages

with relu after every convolution and after each residual add.  The first
two stages end in a stride-2 regular convolution (y and x halved each time),
later stages in a stride-1 regular convolution.  Only-diffusion mode replaces
the whole stack with a single stride-1 regular convolution after the lift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .sparse_conv import (
    REGULAR,
    SUBMANIFOLD,
    ConvSpec,
    Rulebook,
    build_rulebook,
    conv_backward,
    conv_forward,
    out_shape,
)
from .voxel_grid import Shape3, SparseTensor

DEFAULT_CHANNEL_PLAN = ((64, 32), (32, 64), (64, 128))
DEFAULT_LIFT_CHANNELS = 64


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass(frozen=True, eq=False)
class SRBSpec:
    conv1: ConvSpec
    conv2: ConvSpec

    def __post_init__(self):
        for c in (self.conv1, self.conv2):
            if c.mode != SUBMANIFOLD:
                raise ConfigError("SRB convolutions must be submanifold")
        c = self.conv1.in_channels
        if not (self.conv1.out_channels == self.conv2.in_channels and self.conv2.out_channels == c):
            raise ConfigError("SRB convolutions must map channels -> channels")

    @property
    def channels(self) -> int:
        return self.conv1.in_channels

    @classmethod
    def create(cls, channels: int, rng=None, kernel=3) -> "SRBSpec":
        return cls(
            ConvSpec.create(channels, channels, kernel, mode=SUBMANIFOLD, rng=rng),
            ConvSpec.create(channels, channels, kernel, mode=SUBMANIFOLD, rng=rng),
        )


@dataclass(frozen=True, eq=False)
class VDMStage:
    subm: ConvSpec
    srb: SRBSpec
    spconv: ConvSpec | None = None


@dataclass(frozen=True, eq=False)
class VDMSpec:
    """Parameters and wiring of one diffusion module.

    ``lift`` is a bias-free ``(in_channels, lift_channels)`` matrix.  In
    only-diffusion mode ``stages`` is empty and ``diffusion`` holds the
    single regular convolution.
    """

    lift: np.ndarray
    stages: tuple[VDMStage, ...] = ()
    only_diffusion: bool = False
    diffusion: ConvSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "lift", np.asarray(self.lift, dtype=np.float64))
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.lift.ndim != 2:
            raise DimensionError("lift must be a 2-D matrix")
        width = self.lift.shape[1]
        if self.only_diffusion:
            if self.diffusion is None or self.stages:
                raise ConfigError("only-diffusion spec needs exactly one diffusion conv")
            d = self.diffusion
            if d.mode != REGULAR or d.stride != (1, 1, 1):
                raise ConfigError("diffusion conv must be regular with stride 1")
            if d.in_channels != width:
                raise ConfigError("diffusion conv width does not match lift")
            return
        downs = 0
        for i, st in enumerate(self.stages):
            if st.subm.in_channels != width:
                raise ConfigError(
                    f"stage {i} expects {st.subm.in_channels} channels, previous width is {width}"
                )
            width = st.subm.out_channels
            if st.srb.channels != width:
                raise ConfigError(f"stage {i} SRB width {st.srb.channels} != {width}")
            if st.spconv is not None:
                if st.spconv.in_channels != width or st.spconv.mode != REGULAR:
                    raise ConfigError(f"stage {i} spconv must be regular with width {width}")
                width = st.spconv.out_channels
                downs += st.spconv.stride[1] > 1 or st.spconv.stride[2] > 1
        if downs != 2:
            raise ConfigError(f"expected exactly two strided stages, found {downs}")

    @property
    def in_channels(self) -> int:
        return self.lift.shape[0]

    @property
    def out_channels(self) -> int:
        if self.only_diffusion:
            return self.diffusion.out_channels
        last = self.stages[-1]
        return (last.spconv or last.srb.conv2).out_channels

    def layers(self):
        """``(name, ConvSpec)`` pairs in execution order."""
        if self.only_diffusion:
            yield "diffusion", self.diffusion
            return
        for i, st in enumerate(self.stages):
            yield f"stage{i}.subm", st.subm
            yield f"stage{i}.srb.conv1", st.srb.conv1
            yield f"stage{i}.srb.conv2", st.srb.conv2
            if st.spconv is not None:
                yield f"stage{i}.spconv", st.spconv

    def stride_product(self) -> Shape3:
        prod = np.ones(3, dtype=np.int64)
        for _, layer in self.layers():
            prod *= np.asarray(layer.stride)
        return tuple(int(v) for v in prod)


def parameters(spec) -> dict[str, np.ndarray]:
    """Live parameter arrays of a VDMSpec, SRBSpec or ConvSpec, by name."""
    if isinstance(spec, ConvSpec):
        return {"weight": spec.weights, "bias": spec.bias}
    if isinstance(spec, SRBSpec):
        return {
            "conv1.weight": spec.conv1.weights,
            "conv1.bias": spec.conv1.bias,
            "conv2.weight": spec.conv2.weights,
            "conv2.bias": spec.conv2.bias,
        }
    params = {"lift": spec.lift}
    for name, layer in spec.layers():
        params[f"{name}.weight"] = layer.weights
        params[f"{name}.bias"] = layer.bias
    return params


def build_vdm(
    in_channels: int,
    rng: np.random.Generator | None = None,
    channel_plan=DEFAULT_CHANNEL_PLAN,
    lift_channels: int = DEFAULT_LIFT_CHANNELS,
    z_stride: int = 1,
    only_diffusion: bool = False,
    kernel: int = 3,
) -> VDMSpec:
    """Assemble a module with the reference wiring.

    Each ``(cin, cout)`` pair of ``channel_plan`` sets the width change of one
    stage's submanifold layer; the SRB and the closing regular conv keep
    ``cout``.  Stages 0 and 1 close with stride ``(z_stride, 2, 2)``, the rest
    with stride 1.  ``rng=None`` yields all-zero parameters.
    """
    if rng is None:
        lift = np.zeros((in_channels, lift_channels))
    else:
        bound = 1.0 / np.sqrt(in_channels)
        lift = rng.uniform(-bound, bound, size=(in_channels, lift_channels))
    if only_diffusion:
        conv = ConvSpec.create(lift_channels, lift_channels, kernel, 1, mode=REGULAR, rng=rng)
        return VDMSpec(lift, (), True, conv)

    plan = [tuple(int(c) for c in pair) for pair in channel_plan]
    if len(plan) < 2:
        raise ConfigError("channel plan needs at least two stages")
    width = lift_channels
    stages = []
    for i, (cin, cout) in enumerate(plan):
        if cin != width:
            raise ConfigError(f"channel plan breaks at stage {i}: {cin} != {width}")
        subm = ConvSpec.create(cin, cout, kernel, mode=SUBMANIFOLD, rng=rng)
        srb = SRBSpec.create(cout, rng=rng, kernel=kernel)
        stride = (z_stride, 2, 2) if i < 2 else (1, 1, 1)
        spconv = ConvSpec.create(cout, cout, kernel, stride, mode=REGULAR, rng=rng)
        stages.append(VDMStage(subm, srb, spconv))
        width = cout
    return VDMSpec(lift, tuple(stages))


# -- forward / backward --------------------------------------------------------
#
# The forward pass records a tape of (kind, payload) entries; the backward pass
# replays it in reverse.  Submanifold rulebooks are shared between all layers
# that see the same active set.  Rulebooks depend only on the active set, so a
# caller running many forwards on one input can pass a ``cache`` dict that is
# filled on the first pass and reused afterwards.


def _conv_step(tape, name, t, spec, rb, act, cache=None):
    if rb is None:
        rb = cache.get(name) if cache is not None else None
        if rb is None:
            rb = build_rulebook(t, spec)
            if cache is not None:
                cache[name] = rb
    out = conv_forward(t, spec, rb)
    tape.append(("conv", (name, t, spec, rb)))
    if act:
        tape.append(("relu", out.features))
        out = out.with_features(relu(out.features))
    return out, rb


def _srb_step(tape, prefix, t, spec: SRBSpec, rb=None, cache=None):
    h, rb = _conv_step(tape, f"{prefix}conv1", t, spec.conv1, rb, True, cache)
    h, _ = _conv_step(tape, f"{prefix}conv2", h, spec.conv2, rb, False)
    tape.append(("skip_add", None))
    pre = t.features + h.features
    tape.append(("relu", pre))
    return t.with_features(relu(pre)), rb


def _lifted(t: SparseTensor, spec: VDMSpec) -> tuple[SparseTensor, bool]:
    if t.channels == spec.lift.shape[0]:
        return t.with_features(t.features @ spec.lift), True
    if t.channels == spec.lift.shape[1]:
        return t, False
    raise DimensionError(
        f"input has {t.channels} channels; module takes {spec.lift.shape[0]} "
        f"(raw) or {spec.lift.shape[1]} (lifted)"
    )


def _vdm_tape(t: SparseTensor, spec: VDMSpec, cache=None):
    tape = []
    x, did_lift = _lifted(t, spec)
    if did_lift:
        tape.append(("lift", t))
    if spec.only_diffusion:
        x, _ = _conv_step(tape, "diffusion", x, spec.diffusion, None, False, cache)
        return x, tape
    for i, st in enumerate(spec.stages):
        x, rb = _conv_step(tape, f"stage{i}.subm", x, st.subm, None, True, cache)
        x, _ = _srb_step(tape, f"stage{i}.srb.", x, st.srb, rb)
        if st.spconv is not None:
            x, _ = _conv_step(tape, f"stage{i}.spconv", x, st.spconv, None, True, cache)
    return x, tape


def _replay_backward(tape, grad, lift=None):
    """Walk a tape in reverse; returns (grad wrt tape input, {param: grad})."""
    grads: dict[str, np.ndarray] = {}
    skip_stack = []
    # the gradient reaching a residual add feeds both the branch and the skip;
    # the skip part rejoins at the input of the SRB's conv1
    for kind, payload in reversed(tape):
        if kind == "relu":
            grad = grad * (payload > 0)
        elif kind == "skip_add":
            skip_stack.append(grad)
        elif kind == "conv":
            name, t_in, spec, rb = payload
            grad, gw, gb = conv_backward(t_in, spec, rb, grad)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
            if name.endswith("conv1") and skip_stack:
                grad = grad + skip_stack.pop()
        elif kind == "lift":
            t_raw = payload
            grads["lift"] = t_raw.features.T @ grad
            grad = grad @ lift.T
    return grad, grads


def _relu_margin(tape) -> float:
    pres = [np.abs(p).min() for kind, p in tape if kind == "relu" and p.size]
    return float(min(pres)) if pres else float("inf")


def srb_forward(t: SparseTensor, spec: SRBSpec, cache=None) -> SparseTensor:
    if t.channels != spec.channels:
        raise DimensionError(f"SRB expects {spec.channels} channels, got {t.channels}")
    out, _ = _srb_step([], "", t, spec, cache=cache)
    return out


def srb_backward(t: SparseTensor, spec: SRBSpec, grad_out):
    """Returns ``(grad_in, {param_name: grad})`` with names as in :func:`parameters`."""
    if t.channels != spec.channels:
        raise DimensionError(f"SRB expects {spec.channels} channels, got {t.channels}")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != t.features.shape:
        raise DimensionError(f"grad_out must be {t.features.shape}, got {grad_out.shape}")
    tape = []
    _srb_step(tape, "", t, spec)
    return _replay_backward(tape, grad_out)


def vdm_forward(t: SparseTensor, spec: VDMSpec, cache: dict | None = None) -> SparseTensor:
    out, _ = _vdm_tape(t, spec, cache)
    return out


def vdm_backward(t: SparseTensor, spec: VDMSpec, grad_out, cache: dict | None = None):
    """Reverse-mode gradients of the whole module.

    Returns ``(grad_in, {param_name: grad})``; parameter names match
    :func:`parameters`.
    """
    out, tape = _vdm_tape(t, spec, cache)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != out.features.shape:
        raise DimensionError(
            f"grad_out must be {out.features.shape} to match the module output, "
            f"got {grad_out.shape}"
        )
    grad_in, grads = _replay_backward(tape, grad_out, spec.lift)
    for name, arr in parameters(spec).items():
        grads.setdefault(name, np.zeros_like(arr))
    return grad_in, {name: grads[name] for name in parameters(spec)}


def relu_margin(t: SparseTensor, spec) -> float:
    """Smallest |relu input| over a forward pass (inf when there is no relu).

    Finite differences are only meaningful when this exceeds the step times
    the local parameter sensitivity.
    """
    tape = []
    if isinstance(spec, SRBSpec):
        _srb_step(tape, "", t, spec)
    else:
        _, tape = _vdm_tape(t, spec)
    return _relu_margin(tape)


def vdm_output_shape(in_shape: Shape3, spec: VDMSpec) -> Shape3:
    shape = tuple(in_shape)
    for _, layer in spec.layers():
        shape = out_shape(shape, layer)
    return shape


def only_diffusion_spec(conv: ConvSpec, lift: np.ndarray | None = None) -> VDMSpec:
    """Wrap a single regular stride-1 conv as a module (identity lift by default)."""
    if lift is None:
        lift = np.eye(conv.in_channels)
    return VDMSpec(lift, (), True, conv)


def rulebooks(t: SparseTensor, spec: VDMSpec) -> list[tuple[str, Rulebook]]:
    """Rulebooks used by each layer during a forward pass on ``t``."""
    _, tape = _vdm_tape(t, spec)
    return [(p[0], p[3]) for kind, p in tape if kind == "conv"]
