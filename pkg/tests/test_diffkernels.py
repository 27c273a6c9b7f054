import numpy as np
import pytest

from neurospex import diffkernels as dk
from neurospex.diffkernels import Tensor, grad_check

import oracles


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv1d ----------------------------------------------------------------------

def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((3, 11))
    w = np.eye(3)[:, :, None]
    out = dk.conv1d(T(x), T(w), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_encoder_length():
    x = T(np.zeros((1, 32000)))
    w = T(np.zeros((4, 1, 20)))
    # left pad only is the truncated form of padding K/2 on both sides
    assert dk.conv1d(x, w, None, stride=10, pad_left=10, pad_right=0).shape == (4, 3200)
    assert dk.conv1d(x, w, None, stride=10, pad_left=10, pad_right=10).shape == (4, 3201)


def test_conv1d_small_case_matches_loops():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 7)), rng.standard_normal((3, 2, 3)), rng.standard_normal(3)
    out = dk.conv1d(T(x), T(w), T(b), stride=1, pad_left=1, pad_right=1)
    np.testing.assert_allclose(out.data, oracles.conv1d(x, w, b, 1, 1, 1), atol=1e-12, rtol=0)


def test_conv1d_shape_errors():
    with pytest.raises(ValueError, match="channels"):
        dk.conv1d(T(np.zeros((2, 5))), T(np.zeros((1, 3, 2))))
    with pytest.raises(ValueError, match="kernel span"):
        dk.conv1d(T(np.zeros((1, 2))), T(np.zeros((1, 1, 4))))


def test_conv1d_batched_equals_loop_over_batch():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 2, 9)), rng.standard_normal((4, 2, 3)), rng.standard_normal(4)
    out = dk.conv1d(T(x), T(w), T(b), stride=2, pad_left=1, pad_right=0)
    for i in range(3):
        np.testing.assert_allclose(out.data[i], oracles.conv1d(x[i], w, b, 2, 1, 0), atol=1e-12)


# -- depthwise ---------------------------------------------------------------------

def test_depthwise_identity():
    x = np.random.default_rng(3).standard_normal((4, 6))
    out = dk.depthwise_conv1d(T(x), T(np.ones((4, 1))), T(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_depthwise_default_kernel_preserves_length():
    x = T(np.random.default_rng(4).standard_normal((64, 512)))
    out = dk.depthwise_conv1d(x, T(np.ones((64, 10))), T(np.zeros(64)), pad_left=5, pad_right=4)
    assert out.shape == (64, 512)


def test_depthwise_matches_loops():
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((3, 9)), rng.standard_normal((3, 4)), rng.standard_normal(3)
    out = dk.depthwise_conv1d(T(x), T(w), T(b), 2, 1)
    np.testing.assert_allclose(out.data, oracles.depthwise_conv1d(x, w, b, 2, 1), atol=1e-12, rtol=0)


def test_depthwise_rejects_length_changing_pads():
    with pytest.raises(ValueError, match="preserve length"):
        dk.depthwise_conv1d(T(np.zeros((2, 8))), T(np.zeros((2, 3))), None, 0, 0)


# -- attention ----------------------------------------------------------------------

def _attn_params(rng, d_model, d_q, d_kv, d_out):
    return {
        "wq": rng.standard_normal((d_model, d_q)), "bq": rng.standard_normal(d_model),
        "wk": rng.standard_normal((d_model, d_kv)), "bk": rng.standard_normal(d_model),
        "wv": rng.standard_normal((d_model, d_kv)), "bv": rng.standard_normal(d_model),
        "wo": rng.standard_normal((d_out, d_model)), "bo": rng.standard_normal(d_out),
    }


def test_attention_single_key_is_value_projection():
    rng = np.random.default_rng(6)
    p = _attn_params(rng, 4, 3, 5, 2)
    q, kv = rng.standard_normal((3, 7)), rng.standard_normal((5, 1))
    out = dk.multi_head_attention(T(q), T(kv), 2, {k: T(v) for k, v in p.items()})
    value = p["wv"] @ kv[:, 0] + p["bv"]
    expected = p["wo"] @ value + p["bo"]
    np.testing.assert_allclose(out.data, np.repeat(expected[:, None], 7, axis=1), atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = T(np.random.default_rng(7).standard_normal((5, 9, 13)) * 10)
    s = dk.softmax(x, axis=-1).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_matches_loops():
    rng = np.random.default_rng(8)
    p = _attn_params(rng, 4, 4, 4, 4)
    x = rng.standard_normal((4, 3))
    out = dk.multi_head_attention(T(x), T(x), 2, {k: T(v) for k, v in p.items()})
    np.testing.assert_allclose(out.data, oracles.attention(x, x, 2, p), atol=1e-10)


def test_attention_head_divisibility():
    rng = np.random.default_rng(9)
    p = {k: T(v) for k, v in _attn_params(rng, 6, 2, 2, 2).items()}
    with pytest.raises(ValueError, match="divisible"):
        dk.multi_head_attention(T(np.zeros((2, 3))), T(np.zeros((2, 3))), 4, p)


# -- layer norm -------------------------------------------------------------------------

def test_layer_norm_constant_columns_give_zero():
    x = T(np.tile(np.arange(5.0), (4, 1)))
    out = dk.layer_norm(x, T(np.ones(4)), T(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_zero_gamma_gives_beta():
    b = np.array([1.0, -2.0, 3.0])
    out = dk.layer_norm(T(np.random.default_rng(10).standard_normal((3, 6))), T(np.zeros(3)), T(b))
    np.testing.assert_array_equal(out.data, np.repeat(b[:, None], 6, axis=1))


def test_layer_norm_moments():
    x = np.random.default_rng(11).standard_normal((4, 5))
    out = dk.layer_norm(T(x), T(np.ones(4)), T(np.zeros(4))).data
    means, variances = oracles.layer_norm_stats(out)
    assert np.max(np.abs(means)) < 1e-10
    assert np.max(np.abs(variances - 1)) < 1e-4


# -- interpolation / overlap-add ---------------------------------------------------------

def test_interpolate_two_points():
    out = dk.linear_interpolate_time(T([[0.0, 3.0]]), 4)
    np.testing.assert_allclose(out.data, [[0, 1, 2, 3]], atol=1e-15)


def test_interpolate_identity():
    x = np.random.default_rng(12).standard_normal((3, 8))
    np.testing.assert_array_equal(dk.linear_interpolate_time(T(x), 8).data, x)


def test_interpolate_ramp_512_to_3200():
    ramp = np.linspace(-2.0, 5.0, 512)[None, :] * np.array([[1.0], [3.0]])
    out = dk.linear_interpolate_time(T(ramp), 3200).data
    expected = np.linspace(-2.0, 5.0, 3200)[None, :] * np.array([[1.0], [3.0]])
    assert np.max(np.abs(out - expected)) < 1e-9
    np.testing.assert_array_equal(out[:, 0], ramp[:, 0])
    np.testing.assert_array_equal(out[:, -1], ramp[:, -1])


def test_interpolate_rejects_short_input():
    with pytest.raises(ValueError):
        dk.linear_interpolate_time(T(np.zeros((2, 1))), 4)


def test_overlap_add_counts():
    out = dk.overlap_add(T(np.ones((4, 5))), 2).data
    assert out.shape == (12,)
    np.testing.assert_array_equal(out[:2], 1)
    np.testing.assert_array_equal(out[-2:], 1)
    np.testing.assert_array_equal(out[2:-2], 2)


def test_overlap_add_hop_equal_length_concatenates():
    frames = np.random.default_rng(13).standard_normal((3, 4))
    np.testing.assert_array_equal(dk.overlap_add(T(frames), 3).data, frames.T.reshape(-1))


def test_overlap_add_matches_accumulation():
    frames = np.random.default_rng(14).standard_normal((6, 5))
    np.testing.assert_allclose(dk.overlap_add(T(frames), 3).data, oracles.overlap_add(frames, 3), atol=1e-12)


def test_frame_split_overlap_add_counts_interior_twice():
    x = np.random.default_rng(15).standard_normal(40)
    frames = dk.frame_split(x, 8, 4)
    recon = dk.overlap_add(T(frames), 4).data
    np.testing.assert_allclose(recon[4:-4], 2 * x[4 : len(recon) - 4], atol=1e-12)
    np.testing.assert_allclose(recon[:4], x[:4], atol=1e-12)


# -- pointwise --------------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(dk.relu(T([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_multiply_by_ones():
    x = np.random.default_rng(16).standard_normal((3, 4))
    np.testing.assert_array_equal(dk.pointwise_and_affine("multiply", T(x), T(np.ones((3, 4)))).data, x)


def test_linear_map_vector():
    rng = np.random.default_rng(17)
    w, b, x = rng.standard_normal((2, 3)), rng.standard_normal(2), rng.standard_normal(3)
    out = dk.pointwise_and_affine("linear_map", T(x), T(w), T(b))
    np.testing.assert_allclose(out.data, oracles.linear_map(x, w, b), atol=1e-12)


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        dk.add(T(np.zeros(3)), T(np.zeros(4)))
    with pytest.raises(ValueError):
        dk.prelu(T(np.zeros((3, 4))), T(np.zeros(2)))
    with pytest.raises(ValueError):
        dk.pointwise_and_affine("bogus", T([1.0]))


def test_prelu_negative_slope():
    out = dk.prelu(T([[-2.0, 3.0], [-1.0, -4.0]]), T([0.5, 0.1]))
    np.testing.assert_allclose(out.data, [[-1.0, 3.0], [-0.1, -0.4]])


# -- gradients -----------------------------------------------------------------------------

def test_grad_check_relu_exact():
    x = T(np.array([-1.5, 0.3, 2.0, -0.7, 1.1]), grad=True)
    report = grad_check(lambda: dk.sum(dk.relu(x)), [x], tolerance=1e-9)
    assert report.passed, report


def test_grad_check_flags_small_backward_error():
    from neurospex.diffkernels.tensor import make_result

    def sloppy_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * 2 * x.data * (1 + 1e-3),), "sloppy")

    x = T(np.array([0.5, -1.2, 2.0]), grad=True)
    assert not grad_check(lambda: dk.sum(sloppy_square(x)), [x]).passed


def test_grad_check_requires_scalar():
    x = T(np.ones(3), grad=True)
    with pytest.raises(ValueError, match="scalar"):
        grad_check(lambda: x * 2.0, [x])


@pytest.mark.parametrize("seed", range(3))
def test_kernel_gradients(seed):
    rng = np.random.default_rng(seed)
    proj = T(rng.standard_normal((3, 6)))

    def weighted(out):
        return dk.sum(out * Tensor(rng_fixed(out.shape, seed)))

    x = T(rng.standard_normal((2, 3, 8)), grad=True)
    w = T(rng.standard_normal((4, 3, 3)), grad=True)
    b = T(rng.standard_normal(4), grad=True)
    assert grad_check(lambda: weighted(dk.conv1d(x, w, b, 2, 2, 1, dilation=1)), [x, w, b]).passed

    wd = T(rng.standard_normal((3, 3)), grad=True)
    bd = T(rng.standard_normal(3), grad=True)
    assert grad_check(lambda: weighted(dk.depthwise_conv1d(x, wd, bd, 2, 2, dilation=2)), [x, wd, bd]).passed

    g, be = T(rng.standard_normal(3), grad=True), T(rng.standard_normal(3), grad=True)
    assert grad_check(lambda: weighted(dk.layer_norm(x, g, be)), [x, g, be]).passed

    slope = T(rng.uniform(0.1, 0.5, 3), grad=True)
    assert grad_check(lambda: weighted(dk.prelu(x, slope)), [x, slope]).passed

    wl, bl = T(rng.standard_normal((5, 3)), grad=True), T(rng.standard_normal(5), grad=True)
    assert grad_check(lambda: weighted(dk.linear_map(x, wl, bl)), [x, wl, bl]).passed

    assert grad_check(lambda: weighted(dk.linear_interpolate_time(x, 13)), [x]).passed
    assert grad_check(lambda: weighted(dk.overlap_add(x, 2)), [x]).passed
    assert grad_check(lambda: weighted(dk.softmax(x, axis=-1)), [x]).passed

    params = {k: T(v, grad=True) for k, v in _attn_params(rng, 4, 3, 6, 5).items()}
    kv = T(rng.standard_normal((2, 6, 5)), grad=True)
    report = grad_check(lambda: weighted(dk.multi_head_attention(x, kv, 2, params)), [x, kv, *params.values()])
    assert report.passed, report
    del proj


def rng_fixed(shape, seed):
    return np.random.default_rng(1000 + seed).standard_normal(shape)


def test_backward_accumulates_shared_inputs():
    x = T(np.array([1.0, 2.0]), grad=True)
    y = dk.sum(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = T(np.ones(3), grad=True)
    with dk.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# -- serialization ----------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    arrays = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}
    dk.save_arrays(tmp_path / "p", arrays, {"note": 1})
    back, meta = dk.load_arrays(tmp_path / "p")
    assert meta == {"note": 1}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    raw = np.frombuffer((tmp_path / "p.bin").read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw, [0, 1, 2, 3, 4, 5, 1.5])
