import struct
import zlib

import numpy as np
import pytest

from odtl import kernels as K
from odtl import model as M
from odtl.errors import (BadMagicError, ChecksumError, FormatValidationError, ShapeError,
                         TruncatedError, VersionError)
from odtl.numerics import NumericMode, is_bf16_exact

from conftest import randomize_bn, reference_forward64


def test_build_deterministic():
    topo = M.Topology(4, 40, 8)
    assert M.build(topo, 3).equals(M.build(topo, 3))
    assert not M.build(topo, 3).equals(M.build(topo, 4))


def test_classifier_parameter_count():
    p = M.build(M.Topology(4, 40, 8))
    assert p.W.size + p.b.size == 10248
    assert p.num_classifier_params == 10248


def test_topology_layer_count():
    topo = M.Topology(4, 40, 8)
    assert topo.num_conv_layers == 10
    assert topo.feature_dim == 32 * 40
    assert len(M.build(topo).layers) == 10


def test_init_scheme():
    p = M.build(M.Topology(3, 5, 2), seed=0)
    stem = p.layers[0]
    assert np.all(np.abs(stem.weight) <= np.sqrt(6 / 9))
    assert not stem.bias.any()
    np.testing.assert_array_equal(stem.gamma, 1)
    np.testing.assert_array_equal(stem.running_var, 1)
    assert np.all(np.abs(p.W) <= np.sqrt(6 / p.W.shape[1]))


def test_degenerate_topology():
    p = M.build(M.Topology(1, 1, 1))
    probs, feats = M.forward(p, np.ones((1, 1)))
    assert probs.shape == (1,) and probs[0] == pytest.approx(1.0)
    assert feats.shape == (32,)


def test_forward_contract(small_model):
    rng = np.random.default_rng(0)
    for _ in range(5):
        probs, feats = M.forward(small_model, rng.normal(size=(2, 8)))
        assert abs(float(probs.sum()) - 1.0) < 1e-6
        assert feats.shape == (32 * 8,)


def test_zero_input_trace():
    p = M.build(M.Topology(3, 6, 5), seed=0)
    probs, feats = M.forward(p, np.zeros((3, 6)))
    assert not feats.any()
    np.testing.assert_allclose(probs, 1 / 5, rtol=1e-6)


def test_forward_shape_error(small_model):
    with pytest.raises(ShapeError):
        M.forward(small_model, np.zeros((3, 8)))


def test_infer_deterministic(small_model):
    x = np.random.default_rng(1).normal(size=(2, 8))
    a, fa = M.forward(small_model, x)
    b, fb = M.forward(small_model, x)
    assert a.tobytes() == b.tobytes() and fa.tobytes() == fb.tobytes()


def test_train_mode_uses_dropout(small_model):
    x = np.random.default_rng(1).normal(size=(2, 8))
    _, f_inf = M.forward(small_model, x)
    _, f_tr = M.forward(small_model, x, rng=np.random.Generator(np.random.Philox(0)))
    assert not np.array_equal(f_inf, f_tr)


def test_intermediate_shapes(small_model):
    # every backbone activation keeps (32, W_i); checked through the batch axis
    x = np.random.default_rng(2).normal(size=(3, 2, 8))
    feats = M.backbone(small_model, x)
    assert feats.shape == (3, 32 * 8)


def test_residual_identity_blocks():
    topo = M.Topology(2, 7, 3)
    p = M.build(topo, seed=5)
    for layer in p.layers[1:]:
        layer.weight[...] = 0
    x = np.random.default_rng(0).normal(size=(2, 7)).astype(np.float32)
    stem = p.layers[0]
    h = K.relu(K.batch_norm_infer(K.conv1d(x, K.ConvSpec(2, 32), stem.weight, stem.bias),
                                  stem.gamma, stem.beta, stem.running_mean, stem.running_var))
    np.testing.assert_array_equal(M.backbone(p, x), h.reshape(-1))


def test_matches_float64_reference(small_model):
    rng = np.random.default_rng(4)
    for _ in range(5):
        x = rng.normal(size=(2, 8))
        probs, feats = M.forward(small_model, x)
        ref_p, ref_f = reference_forward64(small_model, x)
        np.testing.assert_allclose(feats, ref_f, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(probs, ref_p, rtol=1e-5, atol=1e-6)


def test_truncated16_close_to_full32():
    topo = M.Topology(4, 16, 5)
    p = randomize_bn(M.build(topo, seed=8), seed=9)
    lo = M.deploy(p, NumericMode.TRUNCATED16)
    hi = M.deploy(p, NumericMode.FULL32)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(50, 4, 16))
    logits = K.dense(M.backbone(hi, x), hi.W, hi.b)
    assert np.abs(logits).max() <= 10
    p_hi, _ = M.forward(hi, x)
    p_lo, f_lo = M.forward(lo, x)
    assert np.abs(p_hi - p_lo).max() <= 0.05
    assert is_bf16_exact(f_lo)


def test_deploy_freezes_backbone(small_model):
    d = M.deploy(small_model)
    with pytest.raises(ValueError):
        d.layers[0].weight[0, 0, 0] = 1.0
    before = small_model.W[0, 0]
    d.W[0, 0] = before + 1.0   # classifier stays writable
    assert small_model.W[0, 0] == before   # deploy copies


def test_save_load_roundtrip(small_model):
    blob = M.save(small_model)
    again = M.load(blob)
    assert again.equals(small_model)
    assert M.save(again) == blob


def test_save_load_bf16_roundtrip(small_model):
    d = M.deploy(small_model, "bf16")
    again = M.load(M.save(d))
    assert again.numeric_mode is NumericMode.TRUNCATED16
    assert again.equals(d)


def test_load_narrows_bf16_header(small_model):
    blob = bytearray(M.save(small_model))
    blob[14] = 1   # numeric_mode byte
    p = M.load(_refresh_crc(blob))
    assert p.numeric_mode is NumericMode.TRUNCATED16
    assert all(is_bf16_exact(a) for a in p.all_arrays())


def test_file_layout(small_model):
    blob = M.save(small_model)
    assert blob[:4] == bytes([0x4F, 0x44, 0x54, 0x4C])
    n = sum(a.size for a in small_model.all_arrays())
    assert len(blob) == 16 + 4 * n + 4
    # classifier bias is the last block before the checksum
    tail = np.frombuffer(blob[-4 - 4 * 3:-4], "<f4")
    np.testing.assert_array_equal(tail, small_model.b)


def _refresh_crc(blob: bytearray) -> bytes:
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
    return bytes(blob)


def test_parse_errors(small_model):
    blob = bytearray(M.save(small_model))
    bad = bytearray(blob)
    bad[0] = ord("X")
    with pytest.raises(BadMagicError):
        M.load(bytes(bad))
    ver = bytearray(blob)
    ver[4] = 2
    with pytest.raises(VersionError):
        M.load(_refresh_crc(ver))
    with pytest.raises(TruncatedError):
        M.load(bytes(blob[:-10]))
    flip = bytearray(blob)
    flip[40] ^= 0xFF
    with pytest.raises(ChecksumError):
        M.load(bytes(flip))
    zero_c = bytearray(blob)
    zero_c[10:12] = b"\x00\x00"
    with pytest.raises(FormatValidationError):
        M.load(_refresh_crc(zero_c))


def test_describe(small_model):
    info = M.describe(M.save(small_model))
    assert info["magic"] == "ODTL"
    assert info["num_classes"] == 3
    assert info["conv_layers"] == 10
    assert info["classifier_params"] == 3 * 32 * 8 + 3
