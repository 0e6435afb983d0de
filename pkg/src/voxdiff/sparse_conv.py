"""Rulebook-driven sparse 3D convolution.

A convolution is compiled into a :class:`Rulebook`: for every kernel offset a
list of ``(input_row, output_row)`` pairs.  Forward and backward passes are
then plain gather / matmul / scatter loops over the offsets.

Both modes share one indexing rule, the one used by a dense strided
cross-correlation::

    out[o] = bias + sum_k in[o * stride - padding + offset_k] @ W[k]

with ``offset_k`` running over ``range(kz) x range(ky) x range(kx)`` in
z-major order.  Submanifold mode additionally pins stride to 1 and padding
to the kernel half-width and keeps only outputs at the input's active sites.
Regular mode keeps every output that has at least one active witness, which
is what grows (diffuses) the active set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .voxel_grid import Shape3, SparseTensor, keys_to_coords, linear_keys

SUBMANIFOLD = "submanifold"
REGULAR = "regular"

WEIGHT_MAGIC = b"VDMW"
WEIGHT_VERSION = 1


def _triple(v) -> Shape3:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 components, got {v}")
    return v


def kernel_offsets(kernel: Shape3) -> np.ndarray:
    """(K, 3) offsets in z-major order; row k matches ``weights[k]``."""
    kz, ky, kx = kernel
    grid = np.meshgrid(np.arange(kz), np.arange(ky), np.arange(kx), indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """One sparse convolution layer: geometry plus parameters.

    ``weights`` has shape ``(kz*ky*kx, in_channels, out_channels)``.  The
    arrays are owned by the spec and may be updated in place by training or
    finite-difference code; the geometry fields never change.
    """

    kernel: Shape3
    stride: Shape3
    padding: Shape3
    mode: str
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        kernel, stride, padding = _triple(self.kernel), _triple(self.stride), _triple(self.padding)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        if any(k < 1 or k % 2 == 0 for k in kernel):
            raise ConfigError(f"kernel sizes must be odd and positive, got {kernel}")
        if min(stride) < 1 or min(padding) < 0:
            raise ConfigError(f"bad stride {stride} / padding {padding}")
        if self.mode not in (SUBMANIFOLD, REGULAR):
            raise ConfigError(f"unknown conv mode {self.mode!r}")
        if self.mode == SUBMANIFOLD:
            if stride != (1, 1, 1):
                raise ConfigError("submanifold convolution requires stride 1")
            if padding != tuple((k - 1) // 2 for k in kernel):
                raise ConfigError("submanifold convolution requires 'same' padding")
        w = self.weights
        if w.ndim != 3 or w.shape[0] != int(np.prod(kernel)):
            raise DimensionError(
                f"weights must be ({int(np.prod(kernel))}, Cin, Cout), got {w.shape}"
            )
        if self.bias.shape != (w.shape[2],):
            raise DimensionError(f"bias must have shape ({w.shape[2]},), got {self.bias.shape}")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def num_offsets(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel=3,
        stride=1,
        padding=None,
        mode: str = REGULAR,
        rng: np.random.Generator | None = None,
        bias: bool = True,
    ) -> "ConvSpec":
        """Layer with weights uniform in +-1/sqrt(fan_in); zeros if ``rng`` is None.

        ``padding`` defaults to the kernel half-width.
        """
        kernel = _triple(kernel)
        if padding is None:
            padding = tuple((k - 1) // 2 for k in kernel)
        shape = (int(np.prod(kernel)), in_channels, out_channels)
        if rng is None:
            w = np.zeros(shape)
            b = np.zeros(out_channels)
        else:
            bound = 1.0 / np.sqrt(shape[0] * in_channels)
            w = rng.uniform(-bound, bound, size=shape)
            b = rng.uniform(-bound, bound, size=out_channels) if bias else np.zeros(out_channels)
        return cls(kernel, _triple(stride), _triple(padding), mode, w, b)

    def copy(self) -> "ConvSpec":
        return ConvSpec(
            self.kernel, self.stride, self.padding, self.mode,
            self.weights.copy(), self.bias.copy(),
        )


@dataclass(frozen=True, eq=False)
class Rulebook:
    """Per-offset ``(input_row, output_row)`` pairs for one layer application."""

    in_rows: tuple[np.ndarray, ...]
    out_rows: tuple[np.ndarray, ...]
    out_coords: np.ndarray
    out_shape: Shape3

    @property
    def num_out(self) -> int:
        return self.out_coords.shape[0]

    @property
    def num_pairs(self) -> int:
        return int(sum(r.size for r in self.in_rows))

    def pairs(self):
        """Iterate ``(k, input_row, output_row)`` triples."""
        for k, (ins, outs) in enumerate(zip(self.in_rows, self.out_rows)):
            for i, o in zip(ins.tolist(), outs.tolist()):
                yield k, i, o


def out_shape(in_shape: Shape3, spec: ConvSpec) -> Shape3:
    if spec.mode == SUBMANIFOLD:
        return tuple(int(s) for s in in_shape)
    shape = []
    for n, k, s, p in zip(in_shape, spec.kernel, spec.stride, spec.padding):
        span = n + 2 * p - k
        if span < 0:
            raise ConfigError(
                f"kernel {spec.kernel} with padding {spec.padding} does not fit input {in_shape}"
            )
        shape.append(span // s + 1)
    return tuple(shape)


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row of each query key in ``sorted_keys``, or -1 when absent."""
    if sorted_keys.size == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, sorted_keys.size - 1)
    return np.where(sorted_keys[pos_c] == query, pos_c, -1)


def build_rulebook(t: SparseTensor, spec: ConvSpec) -> Rulebook:
    if spec.in_channels != t.channels:
        raise DimensionError(
            f"layer expects {spec.in_channels} input channels, tensor has {t.channels}"
        )
    oshape = out_shape(t.shape, spec)
    offsets = kernel_offsets(spec.kernel)
    coords = t.coords
    shape_arr = np.asarray(t.shape)

    if spec.mode == SUBMANIFOLD:
        center = np.asarray([(k - 1) // 2 for k in spec.kernel])
        out_all = np.arange(t.num_active, dtype=np.int64)
        in_rows, out_rows = [], []
        for off in offsets:
            nb = coords + (off - center)
            ok = ((nb >= 0) & (nb < shape_arr)).all(axis=1)
            rows = np.full(t.num_active, -1, dtype=np.int64)
            rows[ok] = _lookup(t.keys, linear_keys(nb[ok], t.shape))
            hit = rows >= 0
            in_rows.append(rows[hit])
            out_rows.append(out_all[hit])
        return Rulebook(tuple(in_rows), tuple(out_rows), coords, oshape)

    stride = np.asarray(spec.stride)
    pad = np.asarray(spec.padding)
    oshape_arr = np.asarray(oshape)
    in_all = np.arange(t.num_active, dtype=np.int64)
    cand_rows, cand_keys = [], []
    for off in offsets:
        num = coords + pad - off
        ok = ((num % stride) == 0).all(axis=1)
        o = num // stride
        ok &= ((o >= 0) & (o < oshape_arr)).all(axis=1)
        cand_rows.append(in_all[ok])
        cand_keys.append(linear_keys(o[ok], oshape))
    all_keys = np.concatenate(cand_keys) if cand_keys else np.zeros(0, np.int64)
    out_keys = np.unique(all_keys)
    out_rows = [np.searchsorted(out_keys, ck) for ck in cand_keys]
    return Rulebook(
        tuple(cand_rows), tuple(out_rows), keys_to_coords(out_keys, oshape), oshape
    )


def conv_forward(t: SparseTensor, spec: ConvSpec, rb: Rulebook | None = None) -> SparseTensor:
    """Apply one layer; builds the rulebook when none is passed."""
    if spec.in_channels != t.channels:
        raise DimensionError(
            f"layer expects {spec.in_channels} input channels, tensor has {t.channels}"
        )
    if rb is None:
        rb = build_rulebook(t, spec)
    out = np.tile(spec.bias, (rb.num_out, 1))
    feats = t.features
    # within one offset every output row appears at most once, so a fancy-index
    # add is exact and the accumulation order is fixed by the offset order
    for k, (ins, outs) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if ins.size:
            out[outs] += feats[ins] @ spec.weights[k]
    return SparseTensor(rb.out_coords, out, rb.out_shape)


def conv_backward(t: SparseTensor, spec: ConvSpec, rb: Rulebook, grad_out):
    """Adjoint of :func:`conv_forward`.

    Returns ``(grad_in, grad_weights, grad_bias)`` for an upstream gradient
    ``grad_out`` with one row per output coordinate.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (rb.num_out, spec.out_channels):
        raise DimensionError(
            f"grad_out must be ({rb.num_out}, {spec.out_channels}), got {grad_out.shape}"
        )
    if t.channels != spec.in_channels:
        raise DimensionError("input tensor does not match layer channels")
    grad_in = np.zeros_like(t.features)
    grad_w = np.zeros_like(spec.weights)
    feats = t.features
    for k, (ins, outs) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if ins.size:
            g = grad_out[outs]
            grad_in[ins] += g @ spec.weights[k].T
            grad_w[k] = feats[ins].T @ g
    grad_b = grad_out.sum(axis=0)
    return grad_in, grad_w, grad_b


def diffusion_count(t: SparseTensor, spec: ConvSpec) -> tuple[int, int]:
    """Active-site counts before and after a regular convolution."""
    if spec.mode != REGULAR:
        raise ConfigError("diffusion_count needs a regular-mode layer")
    return t.num_active, build_rulebook(t, spec).num_out


def weights_to_bytes(spec: ConvSpec) -> bytes:
    kz, ky, kx = spec.kernel
    header = WEIGHT_MAGIC + struct.pack(
        "<6I", WEIGHT_VERSION, kz, ky, kx, spec.in_channels, spec.out_channels
    )
    return (
        header
        + spec.weights.astype("<f8").tobytes(order="C")
        + spec.bias.astype("<f8").tobytes()
    )


def weights_from_bytes(blob: bytes) -> tuple[Shape3, np.ndarray, np.ndarray]:
    """Decode a weight blob into ``(kernel, weights, bias)``."""
    if blob[:4] != WEIGHT_MAGIC:
        raise ValueError("not a VDMW weight blob")
    version, kz, ky, kx, cin, cout = struct.unpack_from("<6I", blob, 4)
    if version != WEIGHT_VERSION:
        raise ValueError(f"unsupported weight blob version {version}")
    k = kz * ky * kx
    n_w = k * cin * cout
    expected = 28 + 8 * (n_w + cout)
    if len(blob) != expected:
        raise ValueError(f"weight blob is {len(blob)} bytes, expected {expected}")
    w = np.frombuffer(blob, dtype="<f8", count=n_w, offset=28).reshape(k, cin, cout)
    b = np.frombuffer(blob, dtype="<f8", count=cout, offset=28 + 8 * n_w)
    return (kz, ky, kx), w.astype(np.float64), b.astype(np.float64)


def save_weights(path, spec: ConvSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(spec))


def load_weights(path, spec: ConvSpec) -> None:
    """Overwrite ``spec``'s parameters in place from a blob with matching geometry."""
    with open(path, "rb") as fh:
        kernel, w, b = weights_from_bytes(fh.read())
    if kernel != spec.kernel or w.shape != spec.weights.shape:
        raise DimensionError(
            f"{path}: blob geometry {kernel}/{w.shape} does not match layer "
            f"{spec.kernel}/{spec.weights.shape}"
        )
    spec.weights[...] = w
    spec.bias[...] = b
