"""Offline full-network training with Adam and early stopping.

The batched forward/backward pass here is separate from the inference
kernels: convolutions are lowered to matmuls (im2col) and batch-norm uses
batch statistics.  Parameters travel as a flat list in model-file order
(per conv layer: weight, bias, gamma, beta, running_mean, running_var; then
the classifier W, b).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, TrainingError
from .kernels import BN_EPSILON
from .model import ConvBN, ModelParams, Topology, build

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
# positions inside one conv layer's 6-array group that are statistics, not weights
_RUNNING = (4, 5)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    patience: int = 100
    max_epochs: int = 1000
    batch_size: int = 32
    class_weighting: bool = False
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise DomainError("validation_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise DomainError("patience must be at least 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise DomainError("max_epochs and batch_size must be positive")


@dataclass
class TrainReport:
    epochs_run: int
    best_validation_loss: float
    best_epoch: int
    final_train_accuracy: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        """JSON-lines training log, one record per epoch."""
        return [json.dumps({"epoch": i + 1, "train_loss": tl, "val_loss": vl})
                for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss))]


def class_weights(labels, num_classes: int) -> np.ndarray:
    """``w_c = N / (C * N_c)``."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    if len(labels) == 0 or np.any(counts == 0):
        raise DomainError("every class must appear at least once to compute class weights")
    return len(labels) / (num_classes * counts.astype(np.float64))


def trainable_mask(topology: Topology) -> list[bool]:
    per_layer = [i not in _RUNNING for i in range(6)]
    return per_layer * topology.num_conv_layers + [True, True]


def params_to_list(params: ModelParams, dtype=np.float32) -> list[np.ndarray]:
    return [np.array(a, dtype=dtype) for a in params.all_arrays()]


def list_to_params(topology: Topology, arrays: list[np.ndarray]) -> ModelParams:
    arrays = [np.ascontiguousarray(a, dtype=np.float32) for a in arrays]
    layers = [ConvBN(*arrays[6 * i:6 * i + 6]) for i in range(topology.num_conv_layers)]
    return ModelParams(topology, layers, arrays[-2], arrays[-1])


# ------------------------------------------------------------ layer kernels

def _im2col(x):
    B, C, W = x.shape
    pad = np.zeros((B, C, W + 2), dtype=x.dtype)
    pad[:, :, 1:-1] = x
    cols = np.stack([pad[:, :, k:k + W] for k in range(3)], axis=2)  # (B, C, 3, W)
    return cols.reshape(B, C * 3, W)


def _col2im(dcols, C, W):
    B = dcols.shape[0]
    d = dcols.reshape(B, C, 3, W)
    dpad = np.zeros((B, C, W + 2), dtype=dcols.dtype)
    for k in range(3):
        dpad[:, :, k:k + W] += d[:, :, k]
    return dpad[:, :, 1:-1]


class _Pass:
    """One forward pass with the caches its backward pass needs."""

    def __init__(self, topology: Topology, arrays, x, train: bool, rng):
        self.topology = topology
        self.arrays = arrays
        self.train = train
        self.rng = rng
        self.cache: list = []
        self.batch_stats: list[tuple[np.ndarray, np.ndarray]] = []
        self.features = None
        self.logits = self._run(x)

    # conv + BN, caching what backward needs
    def _stage(self, h, li):
        w, b, g, beta, rm, rv = self.arrays[6 * li:6 * li + 6]
        cols = _im2col(h)
        w2 = w.reshape(w.shape[0], -1)
        y = np.matmul(w2, cols) + b[:, None]
        if self.train:
            mean = y.mean(axis=(0, 2))
            var = y.var(axis=(0, 2))
            self.batch_stats.append((mean, var))
        else:
            mean, var = rm, rv
        inv = 1.0 / np.sqrt(var + BN_EPSILON)
        xhat = (y - mean[:, None]) * inv[:, None]
        out = g[:, None] * xhat + beta[:, None]
        self.cache.append(("stage", li, cols, xhat, inv, h.shape))
        return out

    def _act(self, h):
        mask = h > 0
        out = h * mask
        drop = None
        rate = self.topology.dropout_rate
        if self.train and rate > 0 and self.rng is not None:
            drop = (self.rng.random(h.shape) >= rate) * (1.0 / (1.0 - rate))
            drop = drop.astype(h.dtype)
            out = out * drop
        self.cache.append(("act", mask, drop))
        return out

    def _run(self, x):
        topo = self.topology
        h = self._act(self._stage(x, 0))
        for blk in range(topo.num_residual_blocks):
            base = 1 + 3 * blk
            skip = h
            h = self._act(self._stage(h, base))
            h = self._act(self._stage(h, base + 1))
            h = self._stage(h, base + 2)
            self.cache.append(("add",))
            h = self._act(h + skip)
        self.feat_shape = h.shape
        self.features = h.reshape(h.shape[0], -1)
        W, b = self.arrays[-2], self.arrays[-1]
        return self.features @ W.T + b

    def backward(self, dlogits) -> list[np.ndarray]:
        grads = [np.zeros_like(a) for a in self.arrays]
        W = self.arrays[-2]
        grads[-2] = dlogits.T @ self.features
        grads[-1] = dlogits.sum(axis=0)
        dh = (dlogits @ W).reshape(self.feat_shape)
        cache = list(self.cache)
        topo = self.topology

        def act_back(d):
            _, mask, drop = cache.pop()
            if drop is not None:
                d = d * drop
            return d * mask

        def stage_back(d):
            _, li, cols, xhat, inv, in_shape = cache.pop()
            w, _, g = self.arrays[6 * li:6 * li + 3]
            grads[6 * li + 2] = (d * xhat).sum(axis=(0, 2))
            grads[6 * li + 3] = d.sum(axis=(0, 2))
            dxhat = d * g[:, None]
            if self.train:
                n = d.shape[0] * d.shape[2]
                s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                dy = (inv[:, None] / n) * (n * dxhat - s1 - xhat * s2)
            else:
                dy = dxhat * inv[:, None]
            grads[6 * li] = np.tensordot(dy, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
            grads[6 * li + 1] = dy.sum(axis=(0, 2))
            dcols = np.matmul(w.reshape(w.shape[0], -1).T, dy)
            return _col2im(dcols, in_shape[1], in_shape[2])

        for blk in reversed(range(topo.num_residual_blocks)):
            d = act_back(dh)
            cache.pop()  # "add"
            dskip = d
            d = stage_back(d)
            d = stage_back(act_back(d))
            d = stage_back(act_back(d))
            dh = d + dskip
        stage_back(act_back(dh))
        assert not cache
        return grads


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce(logits, y, sample_weight):
    """Mean of ``w_i * CE_i`` over the batch and its gradient w.r.t. logits."""
    B = logits.shape[0]
    P = _softmax(logits)
    idx = np.arange(B)
    ce = -np.log(np.maximum(P[idx, y], np.finfo(P.dtype).tiny))
    loss = float(np.sum(sample_weight * ce) / B)
    d = P.copy()
    d[idx, y] -= 1.0
    d *= (sample_weight / B)[:, None]
    return loss, d, P


def backprop_full(topology: Topology, arrays, x, y, sample_weight=None,
                  rng: np.random.Generator | None = None, train: bool = True):
    """Loss and exact gradients for every parameter array.

    ``train=True`` uses batch statistics for BN and draws dropout masks from
    ``rng`` (dropout is skipped when ``rng`` is None).  Gradients of the
    running-statistic arrays are returned as zeros.  The third return value
    holds per-layer batch ``(mean, var)`` pairs.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ShapeError("backprop_full needs a non-empty batch")
    if x.ndim != 3 or x.shape[1:] != (topology.input_channels, topology.input_width):
        raise ShapeError(f"batch shape {x.shape} does not match topology")
    if sample_weight is None:
        sample_weight = np.ones(len(x), dtype=x.dtype)
    p = _Pass(topology, arrays, x, train=train, rng=rng if train else None)
    loss, dlogits, _ = weighted_ce(p.logits, y, np.asarray(sample_weight, dtype=x.dtype))
    return loss, p.backward(dlogits.astype(x.dtype)), p.batch_stats


def evaluate(topology: Topology, arrays, x, y, sample_weight=None, batch_size: int = 256):
    """Inference-mode (loss, accuracy) over a dataset."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if sample_weight is None:
        sample_weight = np.ones(len(x))
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        p = _Pass(topology, arrays, x[i:i + batch_size], train=False, rng=None)
        xb_w = np.asarray(sample_weight[i:i + batch_size], dtype=np.float64)
        loss, _, P = weighted_ce(p.logits.astype(np.float64), y[i:i + batch_size], xb_w)
        total += loss * len(xb_w)
        correct += int(np.sum(np.argmax(P, axis=1) == y[i:i + batch_size]))
    return total / len(x), correct / len(x)


class Adam:
    def __init__(self, arrays, mask, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.mask = mask
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t if b1 > 0 else 1.0
        c2 = 1.0 - b2 ** self.t if b2 > 0 else 1.0
        for a, g, m, v, trainable in zip(arrays, grads, self.m, self.v, self.mask):
            if not trainable:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(a.dtype)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a single-sample batch has no BN variance; fold it into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(train_x, train_y, val_x, val_y, topology: Topology, config: TrainConfig,
          init: ModelParams | None = None) -> tuple[ModelParams, TrainReport]:
    """Train the whole network; returns the best-validation-loss parameters."""
    train_x = np.asarray(train_x, dtype=np.float32)
    val_x = np.asarray(val_x, dtype=np.float32)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(train_x) == 0 or len(val_x) == 0:
        raise DomainError("train and validation sets must be non-empty")
    C = topology.num_classes
    if config.class_weighting:
        cw = class_weights(train_y, C)
        w_train, w_val = cw[train_y], cw[val_y]
    else:
        w_train, w_val = np.ones(len(train_y)), np.ones(len(val_y))
    w_train = w_train.astype(np.float32)

    rng = np.random.Generator(np.random.Philox(config.seed))
    start = init if init is not None else build(topology, seed=config.seed)
    arrays = params_to_list(start)
    mask = trainable_mask(topology)
    opt = Adam(arrays, mask, config.learning_rate, config.beta1, config.beta2, config.adam_epsilon)

    best_loss, best_epoch, best_arrays = np.inf, 0, [a.copy() for a in arrays]
    train_curve, val_curve = [], []
    wait = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        seen, total = 0, 0.0
        for idx in _batches(len(train_x), config.batch_size, rng):
            loss, grads, stats = backprop_full(topology, arrays, train_x[idx], train_y[idx],
                                               w_train[idx], rng=rng, train=True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            opt.step(arrays, grads)
            n = len(idx)
            for li, (mean, var) in enumerate(stats):
                unbiased = var * (n * topology.input_width / max(n * topology.input_width - 1, 1))
                rm, rv = arrays[6 * li + 4], arrays[6 * li + 5]
                rm *= 1.0 - BN_MOMENTUM
                rm += BN_MOMENTUM * mean
                rv *= 1.0 - BN_MOMENTUM
                rv += BN_MOMENTUM * unbiased
            total += loss * n
            seen += n
        val_loss, _ = evaluate(topology, arrays, val_x, val_y, w_val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        train_curve.append(total / seen)
        val_curve.append(val_loss)
        log.debug("epoch %d train_loss %.5f val_loss %.5f", epoch, total / seen, val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch, wait = val_loss, epoch, 0
            best_arrays = [a.copy() for a in arrays]
        else:
            wait += 1
            if wait >= config.patience:
                break

    params = list_to_params(topology, best_arrays)
    _, train_acc = evaluate(topology, best_arrays, train_x, train_y)
    report = TrainReport(epochs_run=epoch, best_validation_loss=float(best_loss),
                         best_epoch=best_epoch, final_train_accuracy=float(train_acc),
                         train_loss=train_curve, val_loss=val_curve)
    return params, report
