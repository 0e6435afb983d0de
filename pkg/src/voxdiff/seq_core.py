"""Sequence operators applied to serialized voxel groups.

Scaled dot-product attention and a diagonal linear state space model with
zero-order-hold discretization.  Both are deliberately small: fixed
parameters, one head, no gating or selectivity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

ZOH_EPS = 1e-8


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass(frozen=True, eq=False)
class AttentionSpec:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d_model = self.w_q.shape[0]
        if self.w_k.shape != self.w_q.shape:
            raise DimensionError("W_Q and W_K must share shape (d_model, d_k)")
        if self.w_v.shape[0] != d_model or self.w_o.shape != (self.w_v.shape[1], d_model):
            raise DimensionError("W_V must be (d_model, d_v) and W_O (d_v, d_model)")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1]

    @classmethod
    def create(cls, d_model: int, d_k: int, d_v: int | None = None, rng=None) -> "AttentionSpec":
        d_v = d_k if d_v is None else d_v
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            rng.normal(0, d_model ** -0.5, (d_model, d_k)),
            rng.normal(0, d_model ** -0.5, (d_model, d_k)),
            rng.normal(0, d_model ** -0.5, (d_model, d_v)),
            rng.normal(0, d_v ** -0.5, (d_v, d_model)),
        )


def attention_weights(x: np.ndarray, spec: AttentionSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d_model or x.shape[0] < 1:
        raise DimensionError(f"expected (L>=1, {spec.d_model}) input, got {x.shape}")
    q = x @ spec.w_q
    k = x @ spec.w_k
    return softmax(q @ k.T / np.sqrt(spec.d_k), axis=-1)


def attention(x: np.ndarray, spec: AttentionSpec) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) V, projected back to d_model by W_O."""
    w = attention_weights(x, spec)
    v = np.asarray(x, dtype=np.float64) @ spec.w_v
    return (w @ v) @ spec.w_o


@dataclass(frozen=True, eq=False)
class SSMSpec:
    """Single-input single-output diagonal SSM.

    ``a`` holds the diagonal of the continuous state matrix (all < 0),
    ``b`` and ``c`` the input and output vectors, ``delta`` the step size.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if not (a.size == b.size == c.size) or a.size < 1:
            raise DimensionError("a, b, c must be vectors of equal length N >= 1")
        if not (a < 0).all():
            raise ValueError("diagonal of A must be strictly negative")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def state_dim(self) -> int:
        return self.a.size

    @classmethod
    def create(cls, state_dim: int, rng=None, delta: float = 0.1) -> "SSMSpec":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            -rng.uniform(0.5, 2.0, state_dim),
            rng.normal(0, 1, state_dim),
            rng.normal(0, state_dim ** -0.5, state_dim),
            delta,
        )


def discretize(spec: SSMSpec) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold: A' = exp(delta a), B' = (exp(delta a) - 1) / a * b."""
    da = spec.delta * spec.a
    a_bar = np.exp(da)
    small = np.abs(spec.a) < ZOH_EPS
    safe_a = np.where(small, 1.0, spec.a)
    b_bar = np.where(small, spec.delta * spec.b, np.expm1(da) / safe_a * spec.b)
    return a_bar, b_bar


def scan(x, a_bar: np.ndarray, b_bar: np.ndarray, c: np.ndarray) -> np.ndarray:
    """h_t = a_bar * h_{t-1} + b_bar * x_t, y_t = c . h_t, starting from h_0 = 0."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = np.zeros_like(a_bar)
    y = np.empty(x.size)
    for t, xt in enumerate(x):
        h = a_bar * h + b_bar * xt
        y[t] = c @ h
    return y


def ssm_scan(x, spec: SSMSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise DimensionError("ssm_scan needs at least one input step")
    a_bar, b_bar = discretize(spec)
    return scan(x, a_bar, b_bar, spec.c)


def ssm_channelwise(x: np.ndarray, specs) -> np.ndarray:
    """Run one independent SSM per column of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    specs = list(specs)
    if x.ndim != 2 or x.shape[1] != len(specs):
        raise DimensionError(f"{len(specs)} SSM specs for input of shape {x.shape}")
    if x.shape[0] == 0:
        return np.zeros_like(x)
    # vectorised over channels: state is (d, N); results match per-column scans
    disc = [discretize(s) for s in specs]
    a_bar = np.stack([d[0] for d in disc]) if _uniform_n(specs) else None
    if a_bar is None:
        return np.stack([ssm_scan(x[:, j], s) for j, s in enumerate(specs)], axis=1)
    b_bar = np.stack([d[1] for d in disc])
    c = np.stack([s.c for s in specs])
    h = np.zeros_like(a_bar)
    y = np.empty_like(x)
    for t in range(x.shape[0]):
        h = a_bar * h + b_bar * x[t][:, None]
        y[t] = (c * h).sum(axis=1)
    return y


def _uniform_n(specs) -> bool:
    return len({s.state_dim for s in specs}) == 1
