"""The residual 1D-CNN: topology, parameters, forward pass and model files.

Network: stem conv -> BN -> ReLU -> dropout, then ``num_residual_blocks``
blocks of three conv+BN stages with an identity skip onto the third BN
output, then flatten -> dense -> softmax.  The flattened backbone output is
returned alongside the probabilities; the on-device learner caches it.
"""
from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import (BadMagicError, ChecksumError, FormatValidationError, ShapeError,
                     TruncatedError, VersionError, DomainError)
from .numerics import NumericMode, store

MAGIC = b"ODTL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHBBBB")


@dataclass(frozen=True)
class Topology:
    input_channels: int
    input_width: int
    num_classes: int
    hidden_channels: int = 32
    num_residual_blocks: int = 3
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("input_channels", "input_width", "num_classes",
                     "hidden_channels", "num_residual_blocks"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError("dropout_rate must lie in [0, 1)")

    @property
    def num_conv_layers(self) -> int:
        return 1 + 3 * self.num_residual_blocks

    @property
    def feature_dim(self) -> int:
        return self.hidden_channels * self.input_width

    def conv_specs(self) -> list[K.ConvSpec]:
        specs = [K.ConvSpec(self.input_channels, self.hidden_channels)]
        specs += [K.ConvSpec(self.hidden_channels, self.hidden_channels)] * (3 * self.num_residual_blocks)
        return specs

    @classmethod
    def parse(cls, text: str) -> "Topology":
        """Parse ``"C_i,W_i,C"``."""
        try:
            ci, wi, c = (int(v) for v in text.split(","))
        except ValueError:
            raise ValueError(f"topology must look like C_i,W_i,C, got {text!r}") from None
        return cls(ci, wi, c)


@dataclass
class ConvBN:
    weight: np.ndarray   # (out, in, 3)
    bias: np.ndarray     # (out,)
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.weight, self.bias, self.gamma, self.beta, self.running_mean, self.running_var]


@dataclass
class ModelParams:
    topology: Topology
    layers: list[ConvBN]          # stem first, then 3 per residual block
    W: np.ndarray                 # (C, D)
    b: np.ndarray                 # (C,)
    numeric_mode: NumericMode = NumericMode.FULL32
    frozen: bool = field(default=False, compare=False)

    def backbone_arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]

    def all_arrays(self) -> list[np.ndarray]:
        return self.backbone_arrays() + [self.W, self.b]

    @property
    def num_classifier_params(self) -> int:
        return self.W.size + self.b.size

    def backbone_checksum(self) -> int:
        crc = 0
        for a in self.backbone_arrays():
            crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
        return crc

    def copy(self) -> "ModelParams":
        dup = copy.deepcopy(self)
        for a in dup.all_arrays():
            a.flags.writeable = True
        dup.frozen = False
        return dup

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of topology, mode and every parameter."""
        if self.topology != other.topology or self.numeric_mode != other.numeric_mode:
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.all_arrays(), other.all_arrays()))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build(topology: Topology, seed: int = 0) -> ModelParams:
    """Fresh parameters: uniform fan-in weights, zero biases, identity BN."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in topology.conv_specs():
        n = spec.out_channels
        layers.append(ConvBN(
            weight=_uniform(rng, (n, spec.in_channels, K.KERNEL_SIZE), spec.in_channels * K.KERNEL_SIZE),
            bias=np.zeros(n, np.float32),
            gamma=np.ones(n, np.float32),
            beta=np.zeros(n, np.float32),
            running_mean=np.zeros(n, np.float32),
            running_var=np.ones(n, np.float32),
        ))
    D = topology.feature_dim
    W = _uniform(rng, (topology.num_classes, D), D)
    b = np.zeros(topology.num_classes, np.float32)
    return ModelParams(topology, layers, W, b)


def deploy(params: ModelParams, mode: NumericMode | str = NumericMode.FULL32) -> ModelParams:
    """Copy ``params`` into deployment form.

    Parameters are narrowed to ``mode``'s storage format and the backbone
    arrays are made read-only; only the classifier stays writable.
    """
    mode = NumericMode.parse(mode)
    out = params.copy()
    for layer in out.layers:
        for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
            arr = store(getattr(layer, name), mode).copy()
            arr.flags.writeable = False
            setattr(layer, name, arr)
    out.W = store(out.W, mode).copy()
    out.b = store(out.b, mode).copy()
    out.numeric_mode = mode
    out.frozen = True
    return out


def _stage(x, spec, layer: ConvBN, mode):
    y = K.conv1d(x, spec, layer.weight, layer.bias, mode)
    return K.batch_norm_infer(y, layer.gamma, layer.beta, layer.running_mean,
                              layer.running_var, K.BN_EPSILON, mode)


def backbone(params: ModelParams, x, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the backbone; ``rng`` switches dropout on (train mode).

    ``x`` may carry leading batch axes.  Returns the flattened features.
    """
    topo = params.topology
    mode = params.numeric_mode
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-2:] != (topo.input_channels, topo.input_width):
        raise ShapeError(f"input shape {x.shape[-2:]} != "
                         f"({topo.input_channels}, {topo.input_width})")
    x = store(x, mode)
    specs = topo.conv_specs()

    def act(h):
        h = K.relu(h, mode)
        if rng is not None:
            h = K.dropout_train(h, topo.dropout_rate, rng, mode)
        return h

    h = act(_stage(x, specs[0], params.layers[0], mode))
    for blk in range(topo.num_residual_blocks):
        base = 1 + 3 * blk
        skip = h
        h = act(_stage(h, specs[base], params.layers[base], mode))
        h = act(_stage(h, specs[base + 1], params.layers[base + 1], mode))
        h = _stage(h, specs[base + 2], params.layers[base + 2], mode)
        h = act(store(h + skip, mode))
    return K.flatten(h)


def forward(params: ModelParams, x, rng: np.random.Generator | None = None):
    """Return ``(probabilities, dense_input)``.

    ``rng=None`` is inference mode (no dropout, BN running statistics).
    """
    features = backbone(params, x, rng)
    logits = K.dense(features, params.W, params.b, params.numeric_mode)
    return K.softmax(logits), features


def predict(params: ModelParams, x) -> np.ndarray:
    """Class indices for a batch ``(N, C_i, W_i)``; ties go to the lowest index."""
    probs, _ = forward(params, x)
    return np.argmax(probs, axis=-1)


def predict_batched(params: ModelParams, x, batch_size: int = 64) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([predict(params, x[i:i + batch_size])
                           for i in range(0, len(x), batch_size)])


# ---------------------------------------------------------------- model file

def save(params: ModelParams) -> bytes:
    topo = params.topology
    if max(topo.input_channels, topo.input_width, topo.num_classes) > 0xFFFF:
        raise FormatValidationError("topology does not fit the 16-bit header fields")
    if max(topo.hidden_channels, topo.num_residual_blocks) > 0xFF:
        raise FormatValidationError("hidden width and block count must fit in one byte")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, topo.input_channels, topo.input_width,
                          topo.num_classes, topo.hidden_channels, topo.num_residual_blocks,
                          int(params.numeric_mode), 0)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.all_arrays())
    payload = header + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def load(data: bytes) -> ModelParams:
    """Decode a model file; parameters are narrowed to the header's mode."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedError("model header is truncated")
    _, version, ci, wi, c, hidden, blocks, mode, _reserved = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported model file version {version}")
    if mode not in (0, 1):
        raise FormatValidationError(f"unknown numeric mode tag {mode}")
    try:
        topo = Topology(ci, wi, c, hidden, blocks)
    except DomainError as exc:
        raise FormatValidationError(f"invalid header: {exc}") from None
    shapes = []
    for spec in topo.conv_specs():
        n = spec.out_channels
        shapes += [(n, spec.in_channels, K.KERNEL_SIZE), (n,), (n,), (n,), (n,), (n,)]
    shapes += [(c, topo.feature_dim), (c,)]
    n_floats = sum(int(np.prod(s)) for s in shapes)
    expected = _HEADER.size + 4 * n_floats + 4
    if len(data) < expected:
        raise TruncatedError(f"model file truncated: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise FormatValidationError("trailing bytes after model checksum")
    payload = data[:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("model file checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[pos:pos + n].reshape(s).copy())
        pos += n
    layers = [ConvBN(*arrays[6 * i:6 * i + 6]) for i in range(topo.num_conv_layers)]
    if any(np.any(layer.running_var < 0) for layer in layers):
        raise FormatValidationError("negative running variance in model file")
    nm = NumericMode(mode)
    params = ModelParams(topo, layers, arrays[-2], arrays[-1], nm)
    if nm is NumericMode.TRUNCATED16:
        for a in params.all_arrays():
            a[...] = store(a, nm)
    return params


def describe(params_or_bytes) -> dict:
    """Header summary for ``inspect``."""
    if isinstance(params_or_bytes, (bytes, bytearray)):
        params = load(params_or_bytes)
    else:
        params = params_or_bytes
    topo = params.topology
    return {
        "magic": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "input_channels": topo.input_channels,
        "input_width": topo.input_width,
        "num_classes": topo.num_classes,
        "hidden_channels": topo.hidden_channels,
        "residual_blocks": topo.num_residual_blocks,
        "numeric_mode": params.numeric_mode.short_name,
        "conv_layers": topo.num_conv_layers,
        "backbone_params": sum(a.size for a in params.backbone_arrays()),
        "classifier_params": params.num_classifier_params,
    }
