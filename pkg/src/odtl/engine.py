"""Streaming last-layer training (SGD with momentum on the dense classifier).

Per labelled sample: one inference pass through the frozen backbone yields
the dense-layer input ``x`` and probabilities ``P``; then

    g_W[i, j] = x[j] * (P[i] - [y == i])      g_b[i] = P[i] - [y == i]
    ema_W     = mu * ema_W + g_W              ema_b = mu * ema_b + g_b
    W        -= lr * ema_W                    b    -= lr * ema_b

The sample is not retained.  Gradients and momentum buffers are float32;
in TRUNCATED16 mode only W and b are narrowed when written back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import DomainError, ShapeError
from .numerics import NumericMode, store, to_bf16


@dataclass(frozen=True)
class OdtlConfig:
    learning_rate: float = 0.002
    momentum: float = 0.9
    tile_size: int | None = None   # None: whole layer in one pass

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.tile_size is not None and self.tile_size < 1:
            raise DomainError("tile_size must be >= 1")


@dataclass
class OdtlState:
    """Classifier parameters, their momentum buffers and the step counter.

    ``W`` and ``b`` are normally the very arrays held by the deployed model,
    so updates are visible to subsequent inference.
    """

    W: np.ndarray
    b: np.ndarray
    ema_W: np.ndarray
    ema_b: np.ndarray
    step: int = 0

    @classmethod
    def for_classifier(cls, W: np.ndarray, b: np.ndarray) -> "OdtlState":
        return cls(W, b, np.zeros_like(W, dtype=np.float32), np.zeros_like(b, dtype=np.float32))

    def copy(self) -> "OdtlState":
        return OdtlState(self.W.copy(), self.b.copy(), self.ema_W.copy(), self.ema_b.copy(), self.step)


def _delta_into(d: np.ndarray, P, y: int) -> np.ndarray:
    """``P - onehot(y)`` written into ``d``.

    The true-class entry is minus the sum of the other probabilities rather
    than ``P[y] - 1``, which cancels badly in float32 when ``P[y]`` is near 1.
    """
    if not 0 <= y < d.shape[-1]:
        raise DomainError(f"label {y} outside [0, {d.shape[-1]})")
    d[...] = P
    d[y] = 0
    d[y] = -np.add.accumulate(d)[-1]
    return d


def _delta(P, y: int) -> np.ndarray:
    P = np.asarray(P, dtype=np.float32)
    return _delta_into(np.empty_like(P), P, y)


def classifier_gradients(x, P, y: int):
    """Cross-entropy gradients of the dense layer for one sample."""
    x = np.asarray(x, dtype=np.float32)
    g_b = _delta(P, int(y))
    g_W = g_b[:, None] * x[None, :]
    return g_W, g_b


def ema_update(state: OdtlState, g_W, g_b, momentum: float) -> None:
    mu = np.float32(momentum)
    if np.shape(g_W) != state.ema_W.shape or np.shape(g_b) != state.ema_b.shape:
        raise ShapeError("gradient shapes do not match the momentum buffers")
    np.multiply(state.ema_W, mu, out=state.ema_W)
    np.add(state.ema_W, g_W, out=state.ema_W)
    np.multiply(state.ema_b, mu, out=state.ema_b)
    np.add(state.ema_b, g_b, out=state.ema_b)


def apply_update(state: OdtlState, learning_rate: float,
                 mode: NumericMode = NumericMode.FULL32) -> None:
    lr = np.float32(learning_rate)
    state.W[...] = store(state.W - lr * state.ema_W, mode)
    state.b[...] = store(state.b - lr * state.ema_b, mode)
    state.step += 1


class OdtlEngine:
    """Owns one deployed model's classifier state and its working buffers.

    Buffers (dense-input cache, output cache, momentum buffers, tile
    scratch) are allocated once here.  Calls to :meth:`learn_one` must be
    serialised per instance.
    """

    def __init__(self, model: M.ModelParams, config: OdtlConfig):
        if not model.W.flags.writeable:
            raise DomainError("classifier arrays of the model must be writable")
        self.model = model
        self.config = config
        C, D = model.W.shape
        self.state = OdtlState.for_classifier(model.W, model.b)
        self.dense_input = np.zeros(D, dtype=np.float32)
        self.output = np.zeros(C, dtype=np.float32)
        self.delta = np.zeros(C, dtype=np.float32)
        tile = config.tile_size
        if tile is not None and tile > C * D:
            raise DomainError(f"tile_size {tile} exceeds C*D = {C * D}")
        self.scratch = np.zeros(tile if tile is not None else 0, dtype=np.float32)
        self.scratch_peak = 0
        self.updates = 0

    @property
    def mode(self) -> NumericMode:
        return self.model.numeric_mode

    def _observe(self, window, label: int) -> None:
        probs, features = M.forward(self.model, window)
        self.output[...] = probs
        self.dense_input[...] = features
        _delta_into(self.delta, self.output, label)

    def learn_one(self, window, label: int) -> OdtlState:
        """Consume one labelled window; the window is not kept."""
        if self.config.tile_size is not None:
            return self.learn_one_tiled(window, label, self.config.tile_size)
        label = int(label)
        self._observe(window, label)
        g_W = self.delta[:, None] * self.dense_input[None, :]
        ema_update(self.state, g_W, self.delta, self.config.momentum)
        apply_update(self.state, self.config.learning_rate, self.mode)
        self.updates += 1
        return self.state

    def learn_one_tiled(self, window, label: int, tile_size: int) -> OdtlState:
        """Same update as :meth:`learn_one`, streamed through a scratch buffer.

        The flattened ``C*D`` weight/momentum arrays are visited in
        contiguous tiles of at most ``tile_size`` entries; each tile's
        gradient and step are staged in ``self.scratch``.  The bias is
        handled as one final tile.
        """
        C, D = self.state.W.shape
        if tile_size < 1 or tile_size > C * D:
            raise DomainError(f"tile_size must lie in [1, {C * D}]")
        if self.scratch.shape[0] != tile_size:
            self.scratch = np.zeros(tile_size, dtype=np.float32)
        label = int(label)
        self._observe(window, label)
        mu = np.float32(self.config.momentum)
        lr = np.float32(self.config.learning_rate)
        W = self.state.W.reshape(-1)
        E = self.state.ema_W.reshape(-1)
        x, delta, scratch = self.dense_input, self.delta, self.scratch
        for start in range(0, C * D, tile_size):
            stop = min(start + tile_size, C * D)
            n = stop - start
            # stage this tile's gradient one row segment at a time
            pos = start
            while pos < stop:
                i, j = divmod(pos, D)
                seg = min(stop - pos, D - j)
                np.multiply(delta[i], x[j:j + seg], out=scratch[pos - start:pos - start + seg])
                pos += seg
            e = E[start:stop]
            np.multiply(e, mu, out=e)
            np.add(e, scratch[:n], out=e)
            np.multiply(e, lr, out=scratch[:n])
            w = W[start:stop]
            np.subtract(w, scratch[:n], out=w)
            if self.mode is NumericMode.TRUNCATED16:
                w[...] = to_bf16(w)
            self.scratch_peak = max(self.scratch_peak, n)
        eb = self.state.ema_b
        np.multiply(eb, mu, out=eb)
        np.add(eb, delta, out=eb)
        self.state.b[...] = store(self.state.b - lr * eb, self.mode)
        self.state.step += 1
        self.updates += 1
        return self.state

    def buffers(self) -> dict[str, np.ndarray]:
        return {"dense_input": self.dense_input, "output": self.output, "delta": self.delta,
                "ema_W": self.state.ema_W, "ema_b": self.state.ema_b, "scratch": self.scratch}


def learn_one(model: M.ModelParams, state: OdtlState, config: OdtlConfig, window, label: int) -> OdtlState:
    """Functional form: forward, gradients, EMA update, parameter update."""
    probs, features = M.forward(model, window)
    g_W, g_b = classifier_gradients(features, probs, label)
    ema_update(state, g_W, g_b, config.momentum)
    apply_update(state, config.learning_rate, model.numeric_mode)
    return state
