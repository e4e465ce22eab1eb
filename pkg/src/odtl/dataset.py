"""Windowed datasets: container, binary file format, and the synthetic generator."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, ChecksumError, DomainError, FormatValidationError,
                     ShapeError, TruncatedError, VersionError)

MAGIC = b"ODDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHI")
_SAMPLE_META = struct.Struct("<HHHH")


@dataclass
class WindowedDataset:
    """Labelled ``(channels, width)`` windows tagged with user and session ids."""

    channels: int
    width: int
    classes: int
    windows: np.ndarray            # (N, channels, width) float32
    labels: np.ndarray             # (N,) int64
    users: np.ndarray              # (N,) int64
    sessions: np.ndarray           # (N,) int64

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.users = np.asarray(self.users, dtype=np.int64)
        self.sessions = np.asarray(self.sessions, dtype=np.int64)
        n = len(self.labels)
        if self.channels < 1 or self.width < 1 or self.classes < 1:
            raise DomainError("channels, width and classes must be positive")
        if self.windows.shape != (n, self.channels, self.width):
            raise ShapeError(f"windows shape {self.windows.shape} != ({n}, {self.channels}, {self.width})")
        if len(self.users) != n or len(self.sessions) != n:
            raise ShapeError("labels, users and sessions must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise FormatValidationError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def user_ids(self) -> list[int]:
        return sorted(int(u) for u in np.unique(self.users))

    def subset(self, indices) -> "WindowedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return WindowedDataset(self.channels, self.width, self.classes, self.windows[idx],
                               self.labels[idx], self.users[idx], self.sessions[idx])

    def equals(self, other: "WindowedDataset") -> bool:
        return ((self.channels, self.width, self.classes) == (other.channels, other.width, other.classes)
                and self.windows.tobytes() == other.windows.tobytes()
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.sessions, other.sessions))


def dumps(ds: WindowedDataset) -> bytes:
    if max(ds.channels, ds.width, ds.classes) > 0xFFFF:
        raise FormatValidationError("dataset dimensions exceed the 16-bit header fields")
    for name in ("users", "sessions"):
        arr = getattr(ds, name)
        if len(arr) and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise FormatValidationError(f"{name} ids must fit in u16")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, ds.channels, ds.width, ds.classes, len(ds))]
    for i in range(len(ds)):
        parts.append(_SAMPLE_META.pack(int(ds.users[i]), int(ds.sessions[i]), int(ds.labels[i]), 0))
        parts.append(ds.windows[i].astype("<f4").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def loads(data: bytes) -> WindowedDataset:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a dataset file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedError("dataset header is truncated")
    _, version, ci, wi, c, count = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset file version {version}")
    if ci < 1 or wi < 1 or c < 1:
        raise FormatValidationError("header dimensions must be positive")
    rec = _SAMPLE_META.size + 4 * ci * wi
    expected = _HEADER.size + count * rec + 4
    if len(data) < expected:
        raise TruncatedError(f"dataset truncated: {len(data)} of {expected} bytes "
                             f"for {count} declared samples")
    if len(data) > expected:
        raise FormatValidationError("trailing bytes after dataset checksum")
    payload = data[:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("dataset checksum mismatch")
    record = np.dtype([("user", "<u2"), ("session", "<u2"), ("label", "<u2"),
                       ("reserved", "<u2"), ("x", "<f4", (ci, wi))])
    recs = np.frombuffer(payload, dtype=record, count=count, offset=_HEADER.size)
    if count and recs["label"].max() >= c:
        raise FormatValidationError(f"sample label {int(recs['label'].max())} outside [0, {c})")
    return WindowedDataset(ci, wi, c, recs["x"].astype(np.float32), recs["label"],
                           recs["user"], recs["session"])


def read(path) -> WindowedDataset:
    with open(path, "rb") as fh:
        return loads(fh.read())


def write(ds: WindowedDataset, path) -> None:
    from .io import atomic_write
    atomic_write(path, dumps(ds))


# ------------------------------------------------------------ synthetic data

@dataclass
class DriftSpec:
    """Parameters of the synthetic user-drift generator.

    Every class owns a prototype waveform per channel.  Every user applies a
    persistent transform to all of their windows: per-channel gain
    ``1 + user_drift * z``, per-channel offset ``user_drift * z`` and a
    time-warp factor ``exp(warp_scale * user_drift * z)``.  Independent
    Gaussian noise of standard deviation ``noise_level`` is added per sample.
    """

    num_users: int = 4
    sessions_per_user: int = 2
    samples_per_class_per_session: int = 10
    num_classes: int = 4
    channels: int = 4
    width: int = 40
    user_drift: float = 0.0
    noise_level: float = 0.1
    warp_scale: float = 0.25
    harmonics: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.user_drift < 0 or self.noise_level < 0:
            raise DomainError("user_drift and noise_level must be non-negative")
        for name in ("num_users", "sessions_per_user", "samples_per_class_per_session",
                     "num_classes", "channels", "width", "harmonics"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")


@dataclass
class _Prototype:
    freq: np.ndarray    # (channels, harmonics)
    phase: np.ndarray
    amp: np.ndarray

    def __call__(self, t):
        # t: (channels, width) time grid, possibly warped per channel
        arg = 2 * np.pi * self.freq[:, :, None] * t[:, None, :] + self.phase[:, :, None]
        return np.sum(self.amp[:, :, None] * np.sin(arg), axis=1)


def synth(spec: DriftSpec) -> WindowedDataset:
    root = np.random.SeedSequence(spec.seed)
    proto_seq, user_seq, noise_seq = root.spawn(3)
    prng = np.random.default_rng(proto_seq)
    shape = (spec.channels, spec.harmonics)
    protos = [_Prototype(freq=prng.integers(1, 5, size=shape).astype(np.float64),
                         phase=prng.uniform(0, 2 * np.pi, size=shape),
                         amp=prng.uniform(0.5, 1.0, size=shape))
              for _ in range(spec.num_classes)]
    t = np.arange(spec.width, dtype=np.float64) / spec.width

    windows, labels, users, sessions = [], [], [], []
    nrng = np.random.default_rng(noise_seq)
    for u, useq in enumerate(user_seq.spawn(spec.num_users)):
        urng = np.random.default_rng(useq)
        gain = 1.0 + spec.user_drift * urng.standard_normal(spec.channels)
        offset = spec.user_drift * urng.standard_normal(spec.channels)
        warp = np.exp(spec.warp_scale * spec.user_drift * urng.standard_normal())
        tw = np.broadcast_to(t * warp, (spec.channels, spec.width))
        clean = [gain[:, None] * p(tw) + offset[:, None] for p in protos]
        for s in range(spec.sessions_per_user):
            for c in range(spec.num_classes):
                for _ in range(spec.samples_per_class_per_session):
                    noise = spec.noise_level * nrng.standard_normal((spec.channels, spec.width))
                    windows.append(clean[c] + noise)
                    labels.append(c)
                    users.append(u)
                    sessions.append(s)
    return WindowedDataset(spec.channels, spec.width, spec.num_classes,
                           np.asarray(windows, dtype=np.float32), labels, users, sessions)
