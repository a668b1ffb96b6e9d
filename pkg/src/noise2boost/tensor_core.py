"""Dense float64 tensor primitives.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64``.  Layout is
channel-first: ``(channels, *spatial)`` for a single signal and
``(batch, channels, *spatial)`` for a batch.  The number of spatial axes is
taken from the kernel (``weights.ndim - 2``) or passed explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SQRT2 = math.sqrt(2.0)
BN_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


@dataclass(frozen=True)
class KernelSpec:
    """Center-anchored multi-channel kernel, ``weights[out, in, *taps]``."""

    weights: np.ndarray

    def __post_init__(self):
        w = as_tensor(self.weights)
        if w.ndim < 3:
            raise DimensionError(f"kernel weights need shape [out, in, r, ...], got {w.shape}")
        taps = w.shape[2:]
        if any(t % 2 == 0 for t in taps) or len(set(taps)) != 1:
            raise DimensionError(f"kernel taps must be odd and equal per axis, got {taps}")
        object.__setattr__(self, "weights", w)

    @property
    def taps(self) -> int:
        return self.weights.shape[2]

    @property
    def spatial_ndim(self) -> int:
        return self.weights.ndim - 2

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class PoolSpec:
    factor: int = 2
    kind: str = "orthonormal-average"


def im2col(x: np.ndarray, taps: int) -> np.ndarray:
    """Circular patches of a batch ``(B, C, *sp)`` as a ``(B*N, C*taps**d)`` matrix.

    Column ``(c, u)`` of row ``(b, i)`` holds ``x[b, c, i + u - taps // 2]``
    with wrap-around.
    """
    nd = x.ndim - 2
    h = taps // 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(h, h)] * nd, mode="wrap")
    V = sliding_window_view(xp, (taps,) * nd, axis=tuple(range(2, 2 + nd)))
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    return V.transpose(perm).reshape(x.shape[0] * int(np.prod(x.shape[2:])), -1)


def _oriented(w: np.ndarray, flipped: bool) -> np.ndarray:
    # patches are correlation-ordered; direct convolution reverses the taps
    return w if flipped else w[(...,) + (slice(None, None, -1),) * (w.ndim - 2)]


def _conv_core(x: np.ndarray, w: np.ndarray, flipped: bool, cols: np.ndarray | None = None) -> np.ndarray:
    # x: (B, C_in, *sp), w: (C_out, C_in, *taps)
    if cols is None:
        cols = im2col(x, w.shape[2])
    y = cols @ _oriented(w, flipped).reshape(w.shape[0], -1).T
    y = y.reshape((x.shape[0],) + x.shape[2:] + (w.shape[0],))
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def periodic_conv(x, k: KernelSpec | np.ndarray, flipped: bool = False) -> np.ndarray:
    """Multi-channel periodic convolution.

    With ``flipped=False`` the kernel is applied directly,
    ``y[i] = sum_t k[t] x[i - t]``; with ``flipped=True`` it is applied
    time-reversed, ``y[i] = sum_t k[t] x[i + t]``.  Indices wrap around.
    ``x`` is ``(C_in, *spatial)`` or ``(B, C_in, *spatial)``.
    """
    if not isinstance(k, KernelSpec):
        k = KernelSpec(k)
    x = as_tensor(x)
    ndim = k.spatial_ndim
    if x.ndim not in (ndim + 1, ndim + 2):
        raise DimensionError(
            f"input shape {x.shape} incompatible with kernel shape {k.weights.shape}")
    single = x.ndim == ndim + 1
    xb = x[None] if single else x
    if xb.shape[1] != k.in_channels:
        raise DimensionError(
            f"input shape {x.shape} has {xb.shape[1]} channels, kernel shape "
            f"{k.weights.shape} expects {k.in_channels}")
    if any(e < k.taps for e in xb.shape[2:]):
        raise DimensionError(f"input shape {x.shape} smaller than kernel taps {k.taps}")
    out = _conv_core(xb, k.weights, flipped)
    return out[0] if single else out


def conv_adjoint(g: np.ndarray, w: np.ndarray, flipped: bool) -> np.ndarray:
    """Adjoint of ``periodic_conv(., w, flipped)`` applied to ``g`` (batched)."""
    return _conv_core(g, np.swapaxes(w, 0, 1), not flipped)


def conv_weight_grad(x: np.ndarray, g: np.ndarray, taps: int, flipped: bool,
                     cols: np.ndarray | None = None) -> np.ndarray:
    """d<g, conv(x, w)>/dw for batched x, g."""
    if cols is None:
        cols = im2col(x, taps)
    G = np.moveaxis(g, 1, -1).reshape(-1, g.shape[1])
    dw = (G.T @ cols).reshape((g.shape[1], x.shape[1]) + (taps,) * (x.ndim - 2))
    return _oriented(dw, flipped)


def pool(x, spatial_ndim: int = 1) -> np.ndarray:
    """Orthonormal 2x average pooling over the trailing ``spatial_ndim`` axes."""
    x = as_tensor(x)
    lead = x.ndim - spatial_ndim
    if any(e % 2 for e in x.shape[lead:]):
        raise DimensionError(f"cannot pool odd extent in shape {x.shape}")
    split = x.shape[:lead] + sum(((e // 2, 2) for e in x.shape[lead:]), ())
    pairs = tuple(lead + 2 * i + 1 for i in range(spatial_ndim))
    return x.reshape(split).sum(axis=pairs) / SQRT2 ** spatial_ndim


def unpool(x, spatial_ndim: int = 1) -> np.ndarray:
    """Exact adjoint of :func:`pool`: duplicate each sample and scale by 1/sqrt(2)."""
    x = as_tensor(x)
    lead = x.ndim - spatial_ndim
    out = x / SQRT2 ** spatial_ndim
    for ax in range(lead, x.ndim):
        out = np.repeat(out, 2, axis=ax)
    return out


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x, scale, mode: str, stats: BatchNormStats | None = None,
               eps: float = BN_EPS) -> tuple[np.ndarray, BatchNormStats]:
    """Per-channel batch normalization without a learned shift.

    ``mode="train"`` normalizes over batch and spatial axes and returns
    updated running statistics; ``mode="linear_eval"`` multiplies each
    channel by ``scale / sqrt(running_var + eps)`` and leaves the statistics
    untouched.  ``x`` is ``(B, C, *spatial)``.
    """
    x = as_tensor(x)
    scale = as_tensor(scale)
    C = x.shape[1]
    if scale.shape != (C,):
        raise DimensionError(f"scale shape {scale.shape} does not match channels of {x.shape}")
    if stats is None:
        stats = BatchNormStats.fresh(C)
    if mode == "linear_eval":
        gain = scale / np.sqrt(stats.var + eps)
        return x * _channel_view(gain, x.ndim), stats
    if mode != "train":
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    if x.shape[0] < 2:
        raise DimensionError(f"train-mode batch norm needs batch >= 2, got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    y = (x - _channel_view(mean, x.ndim)) / _channel_view(np.sqrt(var + eps), x.ndim)
    y = y * _channel_view(scale, x.ndim)
    count = x.size // C
    unbiased = var * count / max(count - 1, 1)
    m = stats.momentum
    new = BatchNormStats((1 - m) * stats.mean + m * mean,
                         (1 - m) * stats.var + m * unbiased, m)
    return y, new


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState | None, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are not modified.

    Parameters absent from ``grads`` are carried over unchanged.
    """
    if state is None:
        state = AdamState()
    t = state.t + 1
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name}: shape {g.shape} vs param {p.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x`` over flattened in/out."""
    x = as_tensor(x)
    flat = x.ravel()
    cols = []
    for j in range(flat.size):
        e = np.zeros_like(flat)
        e[j] = eps
        fp = as_tensor(f((flat + e).reshape(x.shape))).ravel()
        fm = as_tensor(f((flat - e).reshape(x.shape))).ravel()
        cols.append((fp - fm) / (2 * eps))
    return np.stack(cols, axis=1)
