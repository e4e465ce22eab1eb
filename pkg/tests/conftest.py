import numpy as np
import pytest

from odtl import model as M


class Counter:
    def __init__(self):
        self.macs = 0
        self.updates = 0


def naive_conv1d(x, w, b, counter=None):
    """Quadruple loop in float32 scalars; accumulation order bias, ci, k."""
    x = np.asarray(x, np.float32)
    c_out, c_in, K = w.shape
    width = x.shape[1]
    out = np.zeros((c_out, width), np.float32)
    for co in range(c_out):
        for t in range(width):
            acc = np.float32(b[co])
            for ci in range(c_in):
                for k in range(K):
                    src = t + k - 1
                    v = x[ci, src] if 0 <= src < width else np.float32(0)
                    acc = np.float32(acc + np.float32(w[co, ci, k] * v))
                    if counter is not None:
                        counter.macs += 1
            out[co, t] = acc
    return out


def naive_dense(x, W, b, counter=None):
    C, D = W.shape
    out = np.zeros(C, np.float32)
    for i in range(C):
        acc = np.float32(b[i])
        for j in range(D):
            acc = np.float32(acc + np.float32(W[i, j] * x[j]))
            if counter is not None:
                counter.macs += 1
        out[i] = acc
    return out


def reference_forward64(params: M.ModelParams, x):
    """Straight-line float64 forward pass written without the package kernels."""
    topo = params.topology

    def conv(h, layer):
        w = layer.weight.astype(np.float64)
        out = np.zeros((w.shape[0], h.shape[1]))
        for co in range(w.shape[0]):
            out[co] = layer.bias[co]
            for ci in range(w.shape[1]):
                # correlate with taps at offsets -1, 0, +1
                out[co] += np.convolve(h[ci], w[co, ci, ::-1], mode="same")
        g = layer.gamma.astype(np.float64)[:, None]
        mu = layer.running_mean.astype(np.float64)[:, None]
        var = layer.running_var.astype(np.float64)[:, None]
        return g * (out - mu) / np.sqrt(var + 1e-5) + layer.beta.astype(np.float64)[:, None]

    h = np.maximum(conv(np.asarray(x, np.float64), params.layers[0]), 0)
    for blk in range(topo.num_residual_blocks):
        base = 1 + 3 * blk
        skip = h
        h = np.maximum(conv(h, params.layers[base]), 0)
        h = np.maximum(conv(h, params.layers[base + 1]), 0)
        h = np.maximum(conv(h, params.layers[base + 2]) + skip, 0)
    feats = h.reshape(-1)
    logits = params.W.astype(np.float64) @ feats + params.b
    e = np.exp(logits - logits.max())
    return e / e.sum(), feats


def randomize_bn(params: M.ModelParams, seed=0):
    """Give every layer non-trivial BN statistics and biases."""
    rng = np.random.default_rng(seed)
    for layer in params.layers:
        n = layer.bias.shape[0]
        layer.bias[...] = rng.normal(0, 0.1, n)
        layer.gamma[...] = rng.uniform(0.5, 1.5, n)
        layer.beta[...] = rng.normal(0, 0.1, n)
        layer.running_mean[...] = rng.normal(0, 0.1, n)
        layer.running_var[...] = rng.uniform(0.5, 2.0, n)
    params.b[...] = rng.normal(0, 0.1, params.b.shape)
    return params


@pytest.fixture
def small_topology():
    return M.Topology(2, 8, 3)


@pytest.fixture
def small_model(small_topology):
    return randomize_bn(M.build(small_topology, seed=1), seed=2)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
