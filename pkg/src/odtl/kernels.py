"""Numerical kernels for the 1D network.

Every kernel takes float32 arrays whose trailing two axes are
``(channels, width)``; any leading axes are treated as a batch.  The
accumulation order of each reduction is fixed (bias first, then input
channels in order, then kernel taps in order) so the vectorised code here is
bit-identical to a naive scalar loop in ``FULL32`` mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .numerics import NumericMode, store

BN_EPSILON = 1e-5
KERNEL_SIZE = 3


class Tensor:
    """A validated ``(channels, width)`` float32 array."""

    __slots__ = ("data",)

    def __init__(self, data, channels: int | None = None, width: int | None = None):
        arr = np.asarray(data, dtype=np.float32)
        if channels is not None and width is not None:
            if arr.size != channels * width:
                raise ShapeError(
                    f"expected {channels}x{width}={channels * width} values, got {arr.size}")
            arr = arr.reshape(channels, width)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"tensor must be 2-D with positive dims, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor contains non-finite values")
        self.data = np.ascontiguousarray(arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"Tensor({self.channels}x{self.width})"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = KERNEL_SIZE
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise DomainError("channel counts must be positive")
        if (self.kernel_size, self.stride, self.padding) != (3, 1, 1):
            raise DomainError("only kernel_size=3, stride=1, padding=1 is supported")


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def conv1d(x, spec: ConvSpec, weights, bias, mode: NumericMode = NumericMode.FULL32):
    """Same-padded 1D convolution.

    ``weights`` has shape ``(out_ch, in_ch, 3)``.  Each output is
    ``bias + sum_ci sum_k w[co, ci, k] * x[ci, w + k - 1]`` accumulated in
    that order in float32, with zeros outside ``[0, width)``.
    """
    x = _as_f32(x)
    w = _as_f32(weights)
    b = _as_f32(bias)
    if x.ndim < 2 or x.shape[-2] != spec.in_channels:
        raise ShapeError(f"conv1d expects {spec.in_channels} input channels, got shape {x.shape}")
    if w.shape != (spec.out_channels, spec.in_channels, KERNEL_SIZE):
        raise ShapeError(f"conv weights shape {w.shape} does not match {spec}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias shape {b.shape} does not match {spec}")
    width = x.shape[-1]
    pad = np.zeros(x.shape[:-1] + (width + 2,), dtype=np.float32)
    pad[..., 1:-1] = x
    # pad[..., None, ci, :] broadcasts one input row against all output channels
    out = np.empty(x.shape[:-2] + (spec.out_channels, width), dtype=np.float32)
    out[...] = b[:, None]
    for ci in range(spec.in_channels):
        row = pad[..., ci:ci + 1, :]
        for k in range(KERNEL_SIZE):
            out += w[:, ci, k, None] * row[..., k:k + width]
    return store(out, mode)


def batch_norm_infer(x, gamma, beta, running_mean, running_var,
                     epsilon: float = BN_EPSILON, mode: NumericMode = NumericMode.FULL32):
    x = _as_f32(x)
    params = [_as_f32(p) for p in (gamma, beta, running_mean, running_var)]
    channels = x.shape[-2]
    for p in params:
        if p.shape != (channels,):
            raise ShapeError(f"batch-norm parameter shape {p.shape} != ({channels},)")
    g, bt, mu, var = (p[:, None] for p in params)
    if np.any(var < 0):
        raise DomainError("running variance must be non-negative")
    denom = np.sqrt(var + np.float32(epsilon))
    out = g * (x - mu) / denom + bt
    return store(out, mode)


def relu(x, mode: NumericMode = NumericMode.FULL32):
    return store(np.maximum(_as_f32(x), np.float32(0)), mode)


def dropout_train(x, rate: float, rng: np.random.Generator,
                  mode: NumericMode = NumericMode.FULL32):
    """Inverted dropout.  Pass a ``np.random.Generator(np.random.Philox(seed))``."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_f32(x)
    keep = rng.random(x.shape) >= rate
    scale = np.float32(1.0 / (1.0 - rate))
    out = np.where(keep, x * scale, np.float32(0))
    return store(out, mode)


def flatten(x) -> np.ndarray:
    """Channel-major flattening of the trailing ``(channels, width)`` axes."""
    x = _as_f32(x)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def dense(x, W, b, mode: NumericMode = NumericMode.FULL32):
    """``out[i] = b[i] + sum_j W[i, j] * x[j]``, summed sequentially over ``j``."""
    x = _as_f32(x)
    W = _as_f32(W)
    b = _as_f32(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape} are incompatible")
    terms = np.empty(x.shape[:-1] + (W.shape[0], W.shape[1] + 1), dtype=np.float32)
    terms[..., 0] = b
    np.multiply(W, x[..., None, :], out=terms[..., 1:])
    # add.accumulate is a strict left-to-right running sum
    out = np.add.accumulate(terms, axis=-1)[..., -1]
    return store(out, mode)


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis, always returned in float32."""
    z = _as_f32(logits)
    if z.shape[-1] < 1:
        raise ShapeError("softmax needs at least one logit")
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax received non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    total = np.add.accumulate(e, axis=-1)[..., -1:]
    return e / total


def fuse_conv_bn(weights, bias, gamma, beta, running_mean, running_var,
                 epsilon: float = BN_EPSILON):
    """Fold an inference batch-norm into the preceding convolution."""
    w = np.asarray(weights, dtype=np.float64)
    scale = np.asarray(gamma, np.float64) / np.sqrt(np.asarray(running_var, np.float64) + epsilon)
    fused_w = w * scale[:, None, None]
    fused_b = (np.asarray(bias, np.float64) - running_mean) * scale + beta
    return fused_w.astype(np.float32), fused_b.astype(np.float32)
