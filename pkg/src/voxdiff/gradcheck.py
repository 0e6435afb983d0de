"""Finite-difference verification of the hand-written backward passes.

Every parameter entry is perturbed by +-step and the central difference of
the loss ``sum(output ** 2)`` is compared with the analytic gradient.  The
relative error of an entry is ``|a - n| / max(|a| + |n|, floor)``.

Central differences are meaningless across a relu kink, so random instances
whose smallest relu input is below ``KINK_MARGIN`` are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GradCheckError
from .sparse_conv import REGULAR, ConvSpec, build_rulebook, conv_backward, conv_forward
from .vdm import (
    SRBSpec,
    build_vdm,
    parameters,
    relu_margin,
    srb_backward,
    srb_forward,
    vdm_backward,
    vdm_forward,
)
from .voxel_grid import SparseTensor

STEP = 1e-5
FLOOR = 1e-8
TINY_SHAPE = (4, 8, 8)
TINY_PLAN = ((3, 2), (2, 3), (3, 4))
KINK_MARGIN = 1e-4
MAX_DRAWS = 100


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def numerical_grad(loss, param: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. every entry of ``param`` (in place)."""
    g = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        old = param[idx]
        param[idx] = old + step
        up = loss()
        param[idx] = old - step
        down = loss()
        param[idx] = old
        g[idx] = (up - down) / (2 * step)
    return g


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float] | None:
        if not self.errors:
            return None
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def raise_if_failed(self) -> None:
        if not self.passed:
            name, err = self.worst
            raise GradCheckError(
                f"parameter {name} relative error {err:.3e} exceeds {self.tolerance:.1e}"
            )

    def to_dict(self) -> dict:
        worst = self.worst
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst": None if worst is None else {"parameter": worst[0], "error": worst[1]},
            "errors": dict(self.errors),
        }


def check(forward, backward, params: dict[str, np.ndarray], tolerance: float,
          prefix: str = "", report: GradCheckReport | None = None) -> GradCheckReport:
    """Compare analytic and numerical gradients of ``sum(forward() ** 2)``.

    ``backward(grad_out)`` must return ``{name: grad}`` for the names in
    ``params``.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    report = report or GradCheckReport(tolerance)
    if not params:
        return report
    out = forward()
    analytic = backward(2.0 * out)

    def loss():
        return float(np.sum(forward() ** 2))

    for name, p in params.items():
        num = numerical_grad(loss, p)
        err = relative_error(analytic[name], num)
        report.errors[prefix + name] = float(err.max()) if err.size else 0.0
    return report


def random_input(rng, shape=TINY_SHAPE, channels=2, density=0.3) -> SparseTensor:
    n = int(np.prod(shape))
    keys = np.flatnonzero(rng.random(n) < density)
    if keys.size == 0:
        keys = np.array([n // 2])
    coords = np.stack(np.unravel_index(keys, shape), axis=1)
    return SparseTensor(coords, rng.normal(size=(keys.size, channels)), shape)


def check_conv(t: SparseTensor, spec: ConvSpec, tolerance: float, report=None, prefix="conv."):
    rb = build_rulebook(t, spec)

    def backward(g):
        _, gw, gb = conv_backward(t, spec, rb, g)
        return {"weight": gw, "bias": gb}

    return check(lambda: conv_forward(t, spec, rb).features, backward,
                 parameters(spec), tolerance, prefix, report)


def check_srb(t: SparseTensor, spec: SRBSpec, tolerance: float, report=None, prefix="srb."):
    cache = {}
    return check(lambda: srb_forward(t, spec, cache).features,
                 lambda g: srb_backward(t, spec, g)[1],
                 parameters(spec), tolerance, prefix, report)


def check_vdm(t: SparseTensor, spec, tolerance: float, report=None, prefix="vdm."):
    cache = {}
    return check(lambda: vdm_forward(t, spec, cache).features,
                 lambda g: vdm_backward(t, spec, g, cache)[1],
                 parameters(spec), tolerance, prefix, report)


def _draw(seed: int, make):
    """First ``make(rng)`` instance, over derived seeds, that keeps clear of relu kinks."""
    for attempt in range(MAX_DRAWS):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, attempt])))
        t, spec = make(rng)
        if relu_margin(t, spec) > KINK_MARGIN:
            return t, spec
    raise GradCheckError(f"no kink-free instance found in {MAX_DRAWS} draws")


def gradcheck(cfg=None, tolerance: float = 1e-4, seed: int | None = None) -> GradCheckReport:
    """Check a regular conv, a strided conv, an SRB and a reduced-width VDM stack.

    The instance is a random active set on a 4x8x8 grid.  Channel widths are
    shrunk (``TINY_PLAN``) so every parameter entry can be perturbed within a
    few seconds; the layer wiring is the same as the full-width module.
    """
    if seed is None:
        seed = 0 if cfg is None else cfg.seed
    z_stride = 1 if cfg is None else cfg.z_stride
    rng = np.random.Generator(np.random.PCG64(seed))
    report = GradCheckReport(tolerance)

    t = random_input(rng, TINY_SHAPE, channels=2)
    check_conv(t, ConvSpec.create(2, 3, 3, 1, mode=REGULAR, rng=rng), tolerance, report, "conv.")
    check_conv(t, ConvSpec.create(2, 2, 3, (z_stride, 2, 2), mode=REGULAR, rng=rng),
               tolerance, report, "conv_s2.")

    t, srb = _draw(seed, lambda r: (random_input(r, TINY_SHAPE, 2), SRBSpec.create(2, rng=r)))
    check_srb(t, srb, tolerance, report, "srb.")

    def make_vdm(r):
        x = random_input(r, TINY_SHAPE, 2)
        return x, build_vdm(2, rng=r, channel_plan=TINY_PLAN, lift_channels=3, z_stride=z_stride)

    t, vdm = _draw(seed + 1, make_vdm)
    check_vdm(t, vdm, tolerance, report, "vdm.")
    t = random_input(rng, TINY_SHAPE, channels=2)
    od = build_vdm(2, rng=rng, lift_channels=3, only_diffusion=True)
    check_vdm(t, od, tolerance, report, "only_diffusion.")
    return report
