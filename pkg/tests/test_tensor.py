import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaef import gradcheck as gc
from eaef import tensor as tc
from eaef.io import TensorFormatError, decode_tensor, encode_tensor, load_tensor, save_tensor
from eaef.tensor import ConvParams, DenseLayerParams, DimensionError, Tape, Tensor


def T(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype))


def grads_of(build, *leaves, seed=None):
    tape = Tape()
    out = build(tape)
    g = tape.backward(out, seed if seed is not None else np.ones(out.shape))
    return out, [g[x] for x in leaves]


# ---------------------------------------------------------------- Tensor types

def test_tensor_defaults_to_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64


def test_grad_shape_must_match():
    t = Tensor(np.zeros((2, 3)))
    t.set_grad(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        t.set_grad(np.ones((3, 2)))


def test_param_shape_validation():
    with pytest.raises(DimensionError):
        DenseLayerParams(T(np.zeros((2, 3))), T(np.zeros(3)))
    with pytest.raises(DimensionError):
        ConvParams(T(np.zeros((4, 2, 3, 3))), T(np.zeros(4)), "depthwise")
    with pytest.raises(ValueError):
        ConvParams(T(np.zeros((4, 1, 3, 3))), T(np.zeros(4)), "grouped")


def test_op_outputs_are_read_only():
    out = tc.relu(T([1.0, -1.0]))
    with pytest.raises(ValueError):
        out.data[0] = 5


# ---------------------------------------------------------------- pooling

def test_gap_examples():
    x = T(np.full((2, 3, 4, 5), 3.5))
    np.testing.assert_array_equal(tc.global_avg_pool(x).data, np.full((2, 3), 3.5))
    assert tc.global_avg_pool(T([[[[1, 2], [3, 4]]]])).data[0, 0] == 2.5


def test_gap_backward_uniform():
    x = T(np.random.default_rng(0).standard_normal((1, 2, 3, 4)))
    _, (gx,) = grads_of(lambda tape: tc.global_avg_pool(x, tape), x, seed=np.array([[2.0, -1.0]]))
    np.testing.assert_allclose(gx[0, 0], 2.0 / 12)
    np.testing.assert_allclose(gx[0, 1], -1.0 / 12)


def test_gmp_examples():
    x = T([[[[1, 5], [3, 4]]]])
    out, (gx,) = grads_of(lambda tape: tc.global_max_pool(x, tape), x)
    assert out.data[0, 0] == 5
    np.testing.assert_array_equal(gx[0, 0], [[0, 1], [0, 0]])
    tie = T(np.full((1, 1, 2, 2), 2.0))
    out, (gx,) = grads_of(lambda tape: tc.global_max_pool(tie, tape), tie)
    assert out.data[0, 0] == 2
    np.testing.assert_array_equal(gx[0, 0], [[1, 0], [0, 0]])
    assert tc.global_max_pool(T(np.full((1, 2, 3, 3), -7.0))).data.tolist() == [[-7.0, -7.0]]


@pytest.mark.parametrize("op", [tc.global_avg_pool, tc.global_max_pool])
def test_pooling_rejects_empty_spatial(op):
    with pytest.raises(DimensionError):
        op(T(np.zeros((1, 2, 0, 3))))
    with pytest.raises(DimensionError):
        op(T(np.zeros((2, 3))))


# ---------------------------------------------------------------- dense

def test_mlp_identity_passthrough():
    v = T(np.random.default_rng(1).standard_normal((3, 4)))
    layer = DenseLayerParams(T(np.eye(4)), T(np.zeros(4)))
    np.testing.assert_array_equal(tc.dense_mlp(v, [layer, layer], "identity").data, v.data)


def test_mlp_single_layer_value():
    layer = DenseLayerParams(T([[2.0]]), T([1.0]))
    assert tc.dense_mlp(T([[3.0]]), [layer]).data.tolist() == [[7.0]]


def test_mlp_dim_mismatch():
    layers = [DenseLayerParams(T(np.zeros((2, 4))), T(np.zeros(2))),
              DenseLayerParams(T(np.zeros((4, 3))), T(np.zeros(4)))]
    with pytest.raises(DimensionError):
        tc.dense_mlp(T(np.zeros((1, 4))), layers)
    with pytest.raises(DimensionError):
        tc.dense_mlp(T(np.zeros((1, 4))), [])


def test_mlp_no_output_activation():
    layer = DenseLayerParams(T([[1.0]]), T([-5.0]))
    assert tc.dense_mlp(T([[1.0]]), [layer]).data[0, 0] == -4.0


# ---------------------------------------------------------------- sigmoid

def test_sigmoid_values():
    assert tc.sigmoid(T([0.0])).data[0] == 0.5
    s = tc.sigmoid(T([1e-9, -1e-9, 3.0, -3.0])).data
    assert s[0] > 0.5 > s[1]
    assert 0 < s.min() and s.max() < 1


def test_sigmoid_grad_formula():
    x = T(np.linspace(-4, 4, 9))
    out, (gx,) = grads_of(lambda tape: tc.sigmoid(x, tape), x)
    np.testing.assert_allclose(gx, out.data * (1 - out.data), rtol=1e-12)


# ---------------------------------------------------------------- convolutions

def test_depthwise_identity_1x1():
    x = T(np.random.default_rng(2).standard_normal((2, 3, 4, 5)))
    p = ConvParams(T(np.ones((3, 1, 1, 1))), T(np.zeros(3)), "depthwise")
    np.testing.assert_array_equal(tc.depthwise_conv(x, p).data, x.data)


def test_depthwise_ones_kernel_interior():
    x = T(np.ones((1, 1, 5, 5)))
    p = ConvParams(T(np.ones((1, 1, 3, 3))), T(np.zeros(1)), "depthwise")
    out = tc.depthwise_conv(x, p).data[0, 0]
    assert out[2, 2] == 9
    assert out[0, 0] == 4  # zero padding at the corner


def test_depthwise_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 5))
    k = rng.standard_normal((2, 1, 3, 3))
    b = rng.standard_normal(2)
    out = tc.depthwise_conv(T(x), ConvParams(T(k), T(b), "depthwise")).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(x)
    for c in range(2):
        for i in range(4):
            for j in range(5):
                ref[0, c, i, j] = np.sum(xp[0, c, i:i + 3, j:j + 3] * k[c, 0]) + b[c]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_depthwise_errors():
    with pytest.raises(DimensionError):
        tc.depthwise_conv(T(np.zeros((1, 2, 4, 4))),
                          ConvParams(T(np.zeros((2, 1, 2, 2))), T(np.zeros(2)), "depthwise"))
    with pytest.raises(DimensionError):
        tc.depthwise_conv(T(np.zeros((1, 3, 4, 4))),
                          ConvParams(T(np.zeros((2, 1, 3, 3))), T(np.zeros(2)), "depthwise"))


def test_conv1x1_examples():
    x = T(np.random.default_rng(4).standard_normal((1, 3, 2, 2)))
    eye = ConvParams(T(np.eye(3)[:, :, None, None]), T(np.zeros(3)))
    np.testing.assert_array_equal(tc.conv1x1(x, eye).data, x.data)
    pix = T(np.array([2.0, 3.0]).reshape(1, 2, 1, 1))
    p = ConvParams(T(np.ones((1, 2, 1, 1))), T(np.zeros(1)))
    assert tc.conv1x1(pix, p).data.item() == 5.0
    with pytest.raises(DimensionError):
        tc.conv1x1(T(np.zeros((1, 4, 2, 2))), p)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = tc.conv2d(T(x), ConvParams(T(k), T(b)), stride=2).data
    assert out.shape == (2, 3, 3, 3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-10)


@pytest.mark.parametrize("h,w,stride,k", [(5, 7, 1, 3), (6, 6, 2, 3), (8, 8, 2, 5), (9, 6, 2, 3)])
def test_conv2d_gradcheck_shapes(h, w, stride, k):
    rng = np.random.default_rng(6)
    x = T(rng.standard_normal((2, 3, h, w)))
    p = ConvParams(T(rng.standard_normal((4, 3, k, k))), T(rng.standard_normal(4)))
    errs = gc.check_graph(lambda tape: tc.conv2d(x, p, stride=stride, tape=tape),
                          {"x": x, "kernel": p.kernel, "bias": p.bias}, rng)
    assert max(errs.values()) < 1e-4


def test_upsample_nearest():
    x = T(np.arange(4.0).reshape(1, 1, 2, 2))
    out = tc.upsample_nearest(x, 2).data[0, 0]
    np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    _, (gx,) = grads_of(lambda tape: tc.upsample_nearest(x, 2, tape), x)
    np.testing.assert_array_equal(gx, np.full((1, 1, 2, 2), 4.0))


# ---------------------------------------------------------------- softmax

def test_spatial_softmax_examples():
    np.testing.assert_allclose(tc.spatial_softmax(T(np.full((1, 2, 3, 3), 4.0))).data, 1 / 9)
    out = tc.spatial_softmax(T([[[[0.0, math.log(3.0)]]]])).data
    np.testing.assert_allclose(out[0, 0, 0], [0.25, 0.75], rtol=1e-12)


def test_spatial_softmax_stable_for_large_inputs():
    out = tc.spatial_softmax(T(np.array([[[[1000.0, 0.0]]]]), np.float32)).data
    assert np.isfinite(out).all() and out[0, 0, 0, 0] == 1.0


def test_channel_softmax_sums_over_channels():
    x = T(np.random.default_rng(7).standard_normal((2, 3, 2, 2)))
    np.testing.assert_allclose(tc.channel_softmax(x).data.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6),
       st.floats(-50, 50), st.integers(0, 2 ** 32 - 1))
def test_spatial_softmax_normalised_and_shift_invariant(n, c, h, w, shift, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h, w)).astype(np.float32) * 3
    out = tc.spatial_softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=(2, 3), dtype=np.float64), 1.0, atol=1e-6)
    shifted = tc.spatial_softmax(Tensor(x + np.float32(shift))).data
    np.testing.assert_allclose(shifted, out, atol=1e-6)


# ---------------------------------------------------------------- channel scale, concat, elementwise

def test_channel_scale_examples():
    x = T(np.random.default_rng(8).standard_normal((2, 3, 2, 2)))
    np.testing.assert_array_equal(tc.channel_scale(x, T(np.ones((2, 3)))).data, x.data)
    np.testing.assert_array_equal(tc.channel_scale(x, T(np.zeros((2, 3)))).data, 0)
    with pytest.raises(DimensionError):
        tc.channel_scale(x, T(np.ones((2, 4))))


def test_concat_split_roundtrip_bitwise():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    y = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    z = tc.concat_channels(x, y)
    assert z.shape == (1, 8, 8, 8)
    a, b = tc.split_channels(z)
    assert a.data.tobytes() == x.data.tobytes() and b.data.tobytes() == y.data.tobytes()


def test_concat_grad_routes_halves():
    x, y = T(np.zeros((1, 2, 2, 2))), T(np.zeros((1, 2, 2, 2)))
    g = np.random.default_rng(10).standard_normal((1, 4, 2, 2))
    _, (gx, gy) = grads_of(lambda tape: tc.concat_channels(x, y, tape), x, y, seed=g)
    np.testing.assert_array_equal(gx, g[:, :2])
    np.testing.assert_array_equal(gy, g[:, 2:])


def test_split_odd_channels_raises():
    with pytest.raises(DimensionError):
        tc.split_channels(T(np.zeros((1, 3, 2, 2))))
    with pytest.raises(DimensionError):
        tc.concat_channels(T(np.zeros((1, 2, 2, 2))), T(np.zeros((1, 2, 3, 2))))


def test_elementwise_examples():
    a = T(np.random.default_rng(11).standard_normal((2, 3)))
    np.testing.assert_array_equal(tc.mul(a, T(np.ones((2, 3)))).data, a.data)
    np.testing.assert_allclose(tc.one_minus(T([0.3])).data, [0.7])
    np.testing.assert_array_equal(tc.add(a, 1.0).data, a.data + 1)
    np.testing.assert_array_equal(tc.scalar_mul(a, -2.0).data, -2 * a.data)
    with pytest.raises(DimensionError):
        tc.add(a, T(np.ones((3, 2))))


def test_gradients_accumulate_over_reuse():
    a = T([1.0, 2.0])
    _, (ga,) = grads_of(lambda tape: tc.mul(a, a, tape), a)
    np.testing.assert_array_equal(ga, [2.0, 4.0])


# ---------------------------------------------------------------- finite differences

@pytest.mark.parametrize("name", list(gc.OP_AUDITS))
def test_op_gradcheck(name):
    assert gc.run_op_audits(range(3), [name])[name] < 1e-4


def test_rel_error_floor():
    assert gc.rel_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-3)
    assert gc.rel_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


# ---------------------------------------------------------------- shape properties

OPS_4D = [
    ("gap", lambda x, c: tc.global_avg_pool(x), lambda s: s[:2]),
    ("gmp", lambda x, c: tc.global_max_pool(x), lambda s: s[:2]),
    ("softmax", lambda x, c: tc.spatial_softmax(x), lambda s: s),
    ("dw", lambda x, c: tc.depthwise_conv(x, tc.init_conv(np.random.default_rng(0), c, c, 3, "depthwise")),
     lambda s: s),
    ("conv1x1", lambda x, c: tc.conv1x1(x, tc.init_conv(np.random.default_rng(0), c, 5, 1)),
     lambda s: (s[0], 5) + s[2:]),
    ("conv3x3", lambda x, c: tc.conv2d(x, tc.init_conv(np.random.default_rng(0), c, 2, 3), stride=2),
     lambda s: (s[0], 2, (s[2] + 1) // 2, (s[3] + 1) // 2)),
    ("scale", lambda x, c: tc.channel_scale(x, Tensor(np.ones(x.shape[:2]))), lambda s: s),
    ("concat", lambda x, c: tc.concat_channels(x, x), lambda s: (s[0], 2 * s[1]) + s[2:]),
]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.sampled_from(OPS_4D))
def test_shape_contracts(n, c, h, w, op):
    _, fn, expect = op
    x = Tensor(np.random.default_rng(n * 1000 + c).standard_normal((n, c, h, w)))
    out = fn(x, c)
    assert out.shape == tuple(expect((n, c, h, w)))
    assert np.isfinite(out.data).all()


# ---------------------------------------------------------------- dump format

def test_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    for arr in (rng.standard_normal((2, 3, 4, 5)).astype(np.float32), rng.standard_normal(3),
                np.zeros((0, 2), np.float32)):
        path = tmp_path / "t.eaet"
        save_tensor(path, arr)
        back = load_tensor(path).data
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


def test_dump_layout():
    buf = encode_tensor(np.array([[1.0, 2.0]], np.float32))
    assert buf[:4] == b"EAET"
    assert struct.unpack_from("<BBBB", buf, 4) == (1, 0, 2, 0)
    assert struct.unpack_from("<2I", buf, 8) == (1, 2)
    assert struct.unpack_from("<2f", buf, 16) == (1.0, 2.0)
    assert len(buf) == 24


def _bad(buf):
    with pytest.raises(TensorFormatError) as e:
        decode_tensor(buf)
    return e.value


def test_dump_malformed_offsets():
    good = encode_tensor(np.ones((2, 2), np.float32))
    assert _bad(b"EAE").offset == 3
    assert _bad(b"XXXX" + good[4:]).offset == 0
    assert _bad(good[:4] + b"\x02" + good[5:]).offset == 4
    assert _bad(good[:5] + b"\x07" + good[6:]).offset == 5
    assert _bad(good[:10]).offset == 10
    err = _bad(good[:-3])
    assert err.offset == len(good) - 3 and "byte offset" in str(err)
    assert _bad(good + b"\x00").offset == len(good)


def test_max_margin():
    x = np.array([[[[1.0, 3.0], [2.0, 3.0]]], [[[0.0, 5.0], [1.0, 2.0]]]])
    assert gc.max_margin(x) == 0.0
    assert gc.max_margin(x[1:]) == 3.0
    assert gc.max_margin(np.zeros((1, 2, 1, 1))) == np.inf


def test_fusion_audit_redraws_near_max_ties():
    # seed 7 first draws a pooled map whose top two cells differ by ~1e-4
    report = gc.run_fusion_audit([7], (1, 2, 5, 5))
    assert max(report.values()) < 1e-3
