"""Inference engine tests: packing, kernels, forward pass, weights file."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnkws.bnn_engine import (
    BitTensor,
    BnnModel,
    LayerKind,
    ModelFormatError,
    batch_norm_apply,
    binarize,
    conv2d_bin,
    conv2d_fp,
    conv_bin_layer,
    conv_fp_layer,
    default_model,
    fold_bn_for_binary,
    forward_features,
    global_avg_pool,
    global_avg_pool_layer,
    load_model,
    popcount_u64,
    relu,
    save_model,
)


# --- binarization and packing -------------------------------------------------


def test_binarize_sign_rule():
    bits = binarize(np.array([0.3, -0.2, 0.0]))
    assert bits.unpack().tolist() == [1, -1, 1]


def test_binarize_all_negative_packs_to_zero_words():
    bits = binarize(-np.ones((3, 5)))
    assert (bits.words == 0).all()
    assert (bits.unpack() == -1).all()


def test_binarize_matches_elementwise_sign():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 7, 3))
    expected = np.where(x >= 0, 1, -1)
    assert np.array_equal(binarize(x).unpack(), expected)


@settings(max_examples=60, derandomize=True)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=3), st.integers(0, 2**32))
def test_pack_unpack_round_trip(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.choice([-1.0, 1.0], size=tuple(shape))
    assert np.array_equal(BitTensor.pack(x).unpack(), x)


def test_bit_tensor_rejects_dirty_padding():
    with pytest.raises(ValueError):
        BitTensor((3,), np.array([0xFF], dtype=np.uint64))


@settings(max_examples=60, derandomize=True)
@given(st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=8))
def test_popcount_matches_python_bit_count(values):
    arr = np.array(values, dtype=np.uint64)
    expected = [int(v).bit_count() for v in values]
    assert popcount_u64(arr).tolist() == expected


# --- full-precision convolution -------------------------------------------------


def conv2d_loops(x, w, stride=1, pad=0):
    """Six-nested-loop reference convolution."""
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    h, width, _ = x.shape
    kh, kw, c_in, c_out = w.shape
    oh = (h - kh) // stride + 1
    ow = (width - kw) // stride + 1
    out = np.zeros((oh, ow, c_out))
    for oi in range(oh):
        for oj in range(ow):
            for oc in range(c_out):
                acc = 0.0
                for ki in range(kh):
                    for kj in range(kw):
                        for ic in range(c_in):
                            acc += (
                                x[oi * stride + ki, oj * stride + kj, ic]
                                * w[ki, kj, ic, oc]
                            )
                out[oi, oj, oc] = acc
    return out


def test_conv2d_fp_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 6, 1))
    w = np.ones((1, 1, 1, 1))
    assert np.array_equal(conv2d_fp(x, w), x)


def test_conv2d_fp_all_ones():
    c = 4
    x = np.ones((3, 3, c))
    w = np.ones((3, 3, c, 2))
    out = conv2d_fp(x, w)
    assert out.shape == (1, 1, 2)
    assert np.array_equal(out, np.full((1, 1, 2), 9 * c))


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (1, 1), (2, 1)])
def test_conv2d_fp_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    got = conv2d_fp(x, w, stride=stride, pad=pad)
    expected = conv2d_loops(x, w, stride=stride, pad=pad)
    assert got.shape == expected.shape
    assert np.max(np.abs(got - expected)) <= 1e-12 * np.max(np.abs(expected))


def test_conv2d_fp_shape_mismatch():
    with pytest.raises(ValueError):
        conv2d_fp(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))
    with pytest.raises(ValueError):
        conv2d_fp(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)))


# --- binarized convolution -------------------------------------------------------


def test_conv2d_bin_all_plus_one():
    c = 3
    x = binarize(np.ones((4, 4, c)))
    w = binarize(np.ones((3, 3, c, 2)))
    out = conv2d_bin(x, w)
    assert out.shape == (2, 2, 2)
    assert (out == 9 * c).all()


def test_conv2d_bin_anticorrelated_kernel():
    rng = np.random.default_rng(3)
    window = rng.choice([-1.0, 1.0], size=(3, 3, 2))
    x = binarize(window)
    w = binarize(-window[:, :, :, None])
    out = conv2d_bin(x, w)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == -(3 * 3 * 2)


@settings(max_examples=50, derandomize=True)
@given(st.integers(0, 2**32))
def test_conv2d_bin_equals_fp_reference(seed):
    rng = np.random.default_rng(seed)
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    h = int(rng.integers(kh, kh + 5))
    w_dim = int(rng.integers(kw, kw + 5))
    stride = int(rng.integers(1, 3))
    x = rng.choice([-1.0, 1.0], size=(h, w_dim, c_in))
    w = rng.choice([-1.0, 1.0], size=(kh, kw, c_in, c_out))
    got = conv2d_bin(binarize(x), binarize(w), stride=stride)
    expected = conv2d_fp(x, w, stride=stride)
    assert got.shape == expected.shape
    assert np.array_equal(got.astype(np.float64), expected)


def test_conv2d_bin_shape_mismatch():
    with pytest.raises(ValueError):
        conv2d_bin(binarize(np.ones((4, 4, 2))), binarize(np.ones((3, 3, 3, 1))))


# --- pointwise layers -------------------------------------------------------------


def test_batch_norm_identity_params():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4, 2))
    out = batch_norm_apply(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0)
    assert np.array_equal(out, x)


def test_batch_norm_zero_gamma_gives_beta():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 2))
    beta = np.array([1.5, -2.0])
    out = batch_norm_apply(x, np.zeros(2), beta, np.zeros(2), np.ones(2))
    assert np.allclose(out, np.broadcast_to(beta, x.shape))


def test_batch_norm_matches_scalar_loop():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 3, 5))
    gamma, beta = rng.normal(size=5), rng.normal(size=5)
    mean, var = rng.normal(size=5), rng.uniform(0.1, 2.0, 5)
    eps = 1e-3
    got = batch_norm_apply(x, gamma, beta, mean, var, eps)
    expected = np.zeros_like(x)
    for i in range(4):
        for j in range(3):
            for c in range(5):
                expected[i, j, c] = (
                    (x[i, j, c] - mean[c]) / np.sqrt(var[c] + eps) * gamma[c]
                    + beta[c]
                )
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_batch_norm_rejects_negative_variance():
    with pytest.raises(ValueError):
        batch_norm_apply(np.zeros((2, 2, 1)), [1.0], [0.0], [0.0], [-1.0])


def test_relu_cases():
    assert np.array_equal(relu(np.array([-3.0, -0.1])), np.zeros(2))
    x = np.array([0.5, 2.0])
    assert np.array_equal(relu(x), x)
    assert np.array_equal(relu(np.array([-1.0, 2.0])), np.array([0.0, 2.0]))


def test_global_avg_pool():
    assert np.array_equal(global_avg_pool(np.full((3, 5, 2), 7.0)), [7.0, 7.0])
    x = np.zeros((2, 1, 1))
    x[0, 0, 0], x[1, 0, 0] = 0.0, 2.0
    assert np.array_equal(global_avg_pool(x), [1.0])
    rng = np.random.default_rng(7)
    y = rng.normal(size=(4, 6, 3))
    expected = np.array(
        [sum(y[i, j, c] for i in range(4) for j in range(6)) / 24 for c in range(3)]
    )
    assert np.max(np.abs(global_avg_pool(y) - expected)) <= 1e-12


# --- forward pass -----------------------------------------------------------------


def test_forward_identity_composition():
    model = BnnModel(
        (conv_fp_layer(np.ones((1, 1, 1, 1))), global_avg_pool_layer(1)), 1
    )
    out = forward_features(model, np.full((4, 4), 3.25))
    assert np.array_equal(out, [3.25])


def test_forward_is_pure_and_repeatable():
    model = default_model(seed=3)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(20, 16))
    before = [None if l.weights is None else l.weights.copy() for l in model.layers]
    a = forward_features(model, x)
    b = forward_features(model, x)
    assert np.array_equal(a, b)
    for layer, saved in zip(model.layers, before):
        if saved is not None:
            assert np.array_equal(layer.weights, saved)


def test_forward_matches_scalar_reimplementation():
    """Three-layer toy model checked against an independent loop pipeline."""
    rng = np.random.default_rng(9)
    w1 = rng.normal(size=(3, 3, 1, 4))
    w2 = rng.normal(size=(2, 2, 4, 3))
    model = BnnModel(
        (
            conv_fp_layer(w1, stride=1),
            conv_bin_layer(w2, stride=1),
            global_avg_pool_layer(3),
        ),
        3,
    )
    x = rng.normal(size=(6, 6))
    got = forward_features(model, x)

    t = conv2d_loops(x[:, :, None], w1)
    signs = np.where(t >= 0, 1.0, -1.0)
    w2_signs = np.where(w2 >= 0, 1.0, -1.0)
    t = conv2d_loops(signs, w2_signs)
    expected = np.array(
        [np.mean([t[i, j, c] for i in range(t.shape[0]) for j in range(t.shape[1])])
         for c in range(3)]
    )
    assert np.max(np.abs(got - expected)) <= 1e-9


def test_forward_shape_mismatch():
    model = default_model()
    with pytest.raises(ValueError):
        forward_features(model, np.zeros((2, 2)))  # too small for the stack


def test_forward_rejects_missing_pool():
    model = BnnModel((conv_fp_layer(np.ones((1, 1, 1, 1))),), 1)
    with pytest.raises(ValueError):
        forward_features(model, np.zeros((3, 3)))


def test_default_model_feature_dim():
    model = default_model(seed=0)
    out = forward_features(model, np.random.default_rng(0).normal(size=(98, 64)))
    assert out.shape == (12,)


# --- batch norm folding -------------------------------------------------------------


def test_fold_bn_preserves_features():
    model = default_model(seed=4)
    folded = fold_bn_for_binary(model)
    rng = np.random.default_rng(10)
    for _ in range(5):
        x = rng.normal(size=(20, 16))
        assert np.allclose(
            forward_features(model, x), forward_features(folded, x), atol=1e-9
        )
    # the folded model really did change the bn layers feeding binary convs
    kinds = [l.spec.kind for l in model.layers]
    idx = next(
        i for i, k in enumerate(kinds[:-1])
        if k is LayerKind.BATCH_NORM and kinds[i + 1] is LayerKind.CONV_BIN
    )
    assert not np.array_equal(folded.layers[idx].gamma, model.layers[idx].gamma)


# --- weights file -------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    model = default_model(seed=5)
    path = tmp_path / "model.bnn"
    save_model(model, path)
    raw = path.read_bytes()
    back = load_model(path)
    save_model(back, tmp_path / "again.bnn")
    assert (tmp_path / "again.bnn").read_bytes() == raw
    x = np.random.default_rng(11).normal(size=(98, 64))
    # float32 storage: loaded full-precision weights are the rounded ones
    assert np.allclose(
        forward_features(model, x), forward_features(back, x), rtol=1e-5, atol=1e-4
    )


def test_save_load_binary_weights_bit_exact(tmp_path):
    model = default_model(seed=6)
    path = tmp_path / "model.bnn"
    save_model(model, path)
    back = load_model(path)
    for a, b in zip(model.layers, back.layers):
        if a.spec.kind is LayerKind.CONV_BIN:
            assert np.array_equal(a.bin_weights.words, b.bin_weights.words)


def test_load_rejects_bad_files(tmp_path):
    model = default_model(seed=7)
    path = tmp_path / "model.bnn"
    save_model(model, path)
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad.bnn"
    bad.write_bytes(b"WRONGMAG" + bytes(raw[8:]))
    with pytest.raises(ModelFormatError):
        load_model(bad)

    wrong_version = bytearray(raw)
    wrong_version[8] = 99
    bad.write_bytes(bytes(wrong_version))
    with pytest.raises(ModelFormatError):
        load_model(bad)

    bad.write_bytes(bytes(raw[:-4]))
    with pytest.raises(ModelFormatError):
        load_model(bad)

    bad.write_bytes(bytes(raw) + b"\x00\x00")
    with pytest.raises(ModelFormatError):
        load_model(bad)


def test_load_rejects_non_composing_shapes(tmp_path):
    layers = (
        conv_fp_layer(np.ones((1, 1, 1, 2))),
        global_avg_pool_layer(3),  # channel mismatch
    )
    model = BnnModel(layers, 3)
    with pytest.raises(ModelFormatError):
        save_model(model, tmp_path / "x.bnn")


def test_validate_requires_final_pool():
    model = BnnModel((conv_fp_layer(np.ones((1, 1, 1, 1))),), 1)
    with pytest.raises(ModelFormatError):
        model.validate()


def test_conv_bin_layer_rejects_padding_in_file(tmp_path):
    model = default_model(seed=8)
    path = tmp_path / "model.bnn"
    save_model(model, path)
    raw = bytearray(path.read_bytes())
    # find the first conv_bin layer header and poison its pad byte
    off = 8 + 12
    for _ in range(len(model.layers)):
        kind = raw[off]
        if kind == LayerKind.CONV_BIN.value:
            raw[off + 13] = 1  # pad field
            break
        off = _skip_layer(raw, off)
    path.write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError):
        load_model(path)


def _skip_layer(raw, off):
    import struct

    kind, _, kh, kw, c_in, c_out, _, _ = struct.unpack_from("<BBHHIIBB", raw, off)
    off += 16
    if kind == LayerKind.CONV_FP.value:
        off += 4 * kh * kw * c_in * c_out
    elif kind == LayerKind.CONV_BIN.value:
        size = kh * kw * c_in * c_out
        off += 8 * ((size + 63) // 64)
    elif kind == LayerKind.BATCH_NORM.value:
        off += 4 * (4 * c_in + 1)
    return off
