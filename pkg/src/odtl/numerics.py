"""Numeric storage modes.

``FULL32`` keeps IEEE binary32 everywhere.  ``TRUNCATED16`` stores values in
bfloat16 (the upper 16 bits of a binary32) while every multiply-accumulate
still runs in binary32; results are rounded once, on store, with
round-to-nearest-even.  bfloat16 values are carried around as float32 arrays
whose low 16 bits are zero, so widening is free and exact.
"""
from __future__ import annotations

import enum

import numpy as np

# largest finite bfloat16, as a binary32 bit pattern
_BF16_MAX_BITS = np.uint32(0x7F7F0000)


class NumericMode(enum.IntEnum):
    FULL32 = 0
    TRUNCATED16 = 1

    @classmethod
    def parse(cls, value: "str | int | NumericMode") -> "NumericMode":
        if isinstance(value, NumericMode):
            return value
        if isinstance(value, str):
            key = value.lower()
            if key in ("f32", "float32", "full32"):
                return cls.FULL32
            if key in ("bf16", "bfloat16", "truncated16"):
                return cls.TRUNCATED16
            raise ValueError(f"unknown numeric mode {value!r}")
        return cls(int(value))

    @property
    def short_name(self) -> str:
        return "f32" if self is NumericMode.FULL32 else "bf16"


def to_bf16(x) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (ties to even).

    Returns a float32 array holding the rounded values.  Finite inputs that
    would round past the bfloat16 range saturate to the largest finite
    bfloat16 so the result stays finite.
    """
    a = np.ascontiguousarray(x, dtype=np.float32)
    bits = a.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = (bits + (np.uint32(0x7FFF) + lsb)) & np.uint32(0xFFFF0000)
    sign = bits & np.uint32(0x80000000)
    magnitude = rounded & np.uint32(0x7FFFFFFF)
    finite_in = (bits & np.uint32(0x7F800000)) != np.uint32(0x7F800000)
    overflow = finite_in & (magnitude > _BF16_MAX_BITS)
    rounded = np.where(overflow, sign | _BF16_MAX_BITS, rounded)
    # Inf truncates exactly; NaN is truncated and forced quiet so it stays NaN
    is_nan = ~finite_in & ((bits & np.uint32(0x007FFFFF)) != 0)
    special = (bits & np.uint32(0xFFFF0000)) | np.where(
        is_nan, np.uint32(0x00400000), np.uint32(0))
    rounded = np.where(finite_in, rounded, special)
    return rounded.astype(np.uint32).view(np.float32).reshape(a.shape)


def quantize_roundtrip(x: float) -> float:
    """float32 -> bfloat16 -> float32 for a single scalar."""
    return float(to_bf16(np.float32(x)).reshape(()))


def store(x, mode: NumericMode) -> np.ndarray:
    """Narrow ``x`` to the storage format of ``mode`` (a no-op for FULL32)."""
    if mode is NumericMode.TRUNCATED16:
        return to_bf16(x)
    return np.asarray(x, dtype=np.float32)


def is_bf16_exact(x) -> bool:
    """True when every element has zero low mantissa bits."""
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    return bool(np.all((bits & np.uint32(0xFFFF)) == 0))
