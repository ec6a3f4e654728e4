import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cto.engine import (
    ComputationRecord, Parameter, ShapeError, Tensor, backward, count_macs, default_dtype,
    no_grad, precision, use_record,
)
from cto.engine import functional as F
from cto.engine.gradcheck import NondeterminismError, finite_diff_check, rel_error

from gradcases import CASES
from oracles import bilinear_pixel, conv2d_loops, matmul_loops


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel(f64, rng):
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = F.conv2d(T(x), T(w), None, 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_sum(f64):
    out = F.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), None, 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_matches_loop_oracle(f64, rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = F.conv2d(T(x), T(w), None, 1, 1)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, pad=1), atol=1e-6)


@pytest.mark.parametrize("stride,pad,groups", [(2, 1, 1), (1, 0, 2), (2, 2, 2), (3, 1, 1)])
def test_conv_variants_match_loop_oracle(f64, rng, stride, pad, groups):
    x = rng.normal(size=(2, 4, 7, 6))
    w = rng.normal(size=(6, 4 // groups, 3, 3))
    b = rng.normal(size=6)
    out = F.conv2d(T(x), T(w), T(b), stride, pad, groups)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, pad, groups), atol=1e-9)


def test_conv_floor_output_size():
    # 7 + 2 - 3 = 6 is not a multiple of 4; the last partial window is dropped
    assert F.conv_output_size(7, 3, 4, 1) == 2
    with pytest.raises(ShapeError):
        F.conv_output_size(2, 5, 1, 0)


def test_conv_channel_mismatch_raises(f64):
    with pytest.raises(ShapeError):
        F.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))


def test_conv_mac_count(f64):
    with count_macs() as c:
        F.conv2d(T(np.zeros((2, 4, 8, 8))), T(np.zeros((6, 2, 3, 3))), None, 2, 1, groups=2)
    assert c.total == 2 * 6 * 2 * 3 * 3 * 4 * 4


# ---------------------------------------------------------------- matmul / softmax

def test_matmul_identity(f64, rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(F.matmul(T(np.eye(3)), T(x)).data, x)


def test_matmul_hand_sum(f64):
    out = F.matmul(T([[1, 2], [3, 4]]), T([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_matches_loop_oracle(f64, rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
    np.testing.assert_allclose(F.matmul(T(a), T(b)).data, matmul_loops(a, b), atol=1e-6)


def test_matmul_broadcast_and_errors(f64, rng):
    a, b = rng.normal(size=(2, 1, 3, 4)), rng.normal(size=(1, 5, 4, 2))
    out = F.matmul(T(a), T(b))
    assert out.shape == (2, 5, 3, 2)
    np.testing.assert_allclose(out.data[1, 3], a[1, 0] @ b[0, 3])
    with pytest.raises(ShapeError):
        F.matmul(T(np.zeros((3, 4))), T(np.zeros((3, 4))))
    with pytest.raises(ShapeError):
        F.matmul(T(np.zeros((2, 3, 4))), T(np.zeros((3, 4, 2))))


def test_softmax_examples(f64):
    assert F.softmax_lastdim(T([[5.0]])).data.item() == 1.0
    np.testing.assert_allclose(F.softmax_lastdim(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    out = F.softmax_lastdim(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(vals):
    with precision(np.float64):
        out = F.softmax_lastdim(T(vals)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------- pointwise

def test_pointwise_examples(f64, rng):
    assert F.sigmoid(T(0.0)).data.item() == 0.5
    x = T(rng.normal(size=(3, 4)) * 10)
    total = F.add(F.one_minus(F.sigmoid(x)), F.sigmoid(x)).data
    np.testing.assert_allclose(total, 1.0, atol=1e-15)
    np.testing.assert_array_equal(F.relu(T([-3.0, 3.0])).data, [0.0, 3.0])
    np.testing.assert_array_equal(F.pointwise("scale", T([1.0, 2.0]), 3.0).data, [3.0, 6.0])
    np.testing.assert_array_equal(F.pointwise("mul", T([1.0, 2.0]), T([3.0, 4.0])).data, [3.0, 8.0])


def test_sigmoid_extreme_inputs_stay_finite(f64):
    out = F.sigmoid(T([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_binary_shape_mismatch_raises(f64):
    with pytest.raises(ShapeError):
        F.add(T(np.zeros((2, 3))), T(np.zeros((3, 2))))


# ---------------------------------------------------------------- batch norm

def test_batchnorm_train_zero_mean(f64, rng):
    x = T(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)))
    out = F.batch_norm(x, T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.ones(3), True)
    assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-5


def test_batchnorm_affine_mean_std(f64, rng):
    z = rng.normal(size=(8, 2, 6, 6))
    z = (z - z.mean(axis=(0, 2, 3), keepdims=True)) / z.std(axis=(0, 2, 3), keepdims=True)
    out = F.batch_norm(T(z), T(np.full(2, 2.0)), T(np.full(2, 3.0)), np.zeros(2), np.ones(2), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-4)


def test_batchnorm_eval_hand_formula(f64, rng):
    x = rng.normal(size=(2, 3, 2, 2))
    g, b = rng.normal(size=3), rng.normal(size=3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    out = F.batch_norm(T(x), T(g), T(b), rm.copy(), rv.copy(), False).data
    for i in range(2):
        for c in range(3):
            for r in range(2):
                for q in range(2):
                    want = (x[i, c, r, q] - rm[c]) / np.sqrt(rv[c] + 1e-5) * g[c] + b[c]
                    assert abs(out[i, c, r, q] - want) < 1e-12


def test_batchnorm_running_stats_update(f64, rng):
    x = rng.normal(1.0, 2.0, size=(3, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv, True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_train_needs_two_values(f64):
    with pytest.raises(ValueError):
        F.batch_norm(T(np.zeros((1, 2, 1, 1))), T(np.ones(2)), T(np.zeros(2)),
                     np.zeros(2), np.ones(2), True)


# ---------------------------------------------------------------- upsample

def test_upsample_constant(f64):
    out = F.upsample_bilinear(T(np.full((1, 2, 3, 5), 4.25)), 7, 11).data
    np.testing.assert_allclose(out, 4.25, atol=1e-14)


def test_upsample_same_size_identity(f64, rng):
    x = rng.normal(size=(1, 1, 2, 2))
    np.testing.assert_array_equal(F.upsample_bilinear(T(x), 2, 2).data, x)


def test_upsample_matches_pixel_oracle(f64):
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = F.upsample_bilinear(T(img[None, None]), 4, 4).data[0, 0]
    want = np.array([[bilinear_pixel(img, 4, 4, r, c) for c in range(4)] for r in range(4)])
    np.testing.assert_allclose(out, want, atol=1e-12)
    # half-pixel alignment: first row is 0, .25, .75, 1
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])


def test_upsample_non_integer_ratio_matches_oracle(f64, rng):
    img = rng.normal(size=(3, 5))
    out = F.upsample_bilinear(T(img[None, None]), 7, 4).data[0, 0]
    want = np.array([[bilinear_pixel(img, 7, 4, r, c) for c in range(4)] for r in range(7)])
    np.testing.assert_allclose(out, want, atol=1e-12)


# ---------------------------------------------------------------- concat / subsample / pad

def test_concat_examples(f64, rng):
    a = T(rng.normal(size=(1, 3, 4, 4)))
    assert F.concat_channels([a]) is a
    b = T(rng.normal(size=(1, 5, 4, 4)))
    c = F.concat_channels([a, b])
    assert c.shape == (1, 8, 4, 4)
    np.testing.assert_array_equal(F.slice_channels(c, 0, 3).data, a.data)
    np.testing.assert_array_equal(F.slice_channels(c, 3, 8).data, b.data)
    with pytest.raises(ShapeError):
        F.concat_channels([a, T(np.zeros((1, 2, 4, 5)))])


def test_strided_subsample_examples(f64):
    x = T(np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(F.strided_subsample(x, 1, 1, 1).data, x.data)
    np.testing.assert_array_equal(F.strided_subsample(x, 2, 1, 1).data[0, 0], [[1, 3], [9, 11]])
    np.testing.assert_array_equal(F.strided_subsample(x, 2, 2, 2).data[0, 0], [[6, 8], [14, 16]])
    with pytest.raises(ShapeError):
        F.strided_subsample(x, 3, 1, 1)
    with pytest.raises(ValueError):
        F.strided_subsample(x, 2, 0, 1)


def test_pad_modes(f64):
    x = T(np.array([[1.0, 2.0, 3.0]])[None, None])
    np.testing.assert_array_equal(F.pad2d(x, (0, 0, 2, 1), "zeros").data[0, 0], [[0, 0, 1, 2, 3, 0]])
    np.testing.assert_array_equal(F.pad2d(x, (0, 0, 2, 1), "reflect").data[0, 0], [[3, 2, 1, 2, 3, 2]])
    np.testing.assert_array_equal(F.pad2d(x, (0, 0, 2, 1), "replicate").data[0, 0], [[1, 1, 1, 2, 3, 3]])


# ---------------------------------------------------------------- backward

def test_backward_sum_and_square(f64, rng):
    x = Parameter(rng.normal(size=(3, 4)))
    with use_record(ComputationRecord()) as rec:
        backward(F.sum(x), rec)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    x.grad = None
    with use_record(ComputationRecord()) as rec:
        backward(F.sum(F.mul(x, x)), rec)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_shared_input_accumulates(f64):
    x = Parameter(np.array([2.0]))
    with use_record(ComputationRecord()) as rec:
        y = F.add(F.mul(x, x), F.scale(x, 3.0))
        backward(F.sum(y), rec)
    assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)


def test_backward_errors(f64):
    x = Parameter(np.ones(3))
    with use_record(ComputationRecord()) as rec:
        y = F.scale(x, 2.0)
        with pytest.raises(ShapeError):
            backward(y, rec)
    with pytest.raises(RuntimeError):
        backward(Tensor(np.ones(())), ComputationRecord())


def test_record_is_cleared_after_backward(f64):
    x = Parameter(np.ones(3))
    with use_record(ComputationRecord()) as rec:
        backward(F.sum(F.mul(x, x)), rec)
        assert len(rec) == 0


def test_no_grad_records_nothing(f64):
    x = Parameter(np.ones(3))
    with use_record(ComputationRecord()) as rec, no_grad():
        F.sum(F.mul(x, x))
    assert len(rec) == 0


def test_precision_switch():
    assert default_dtype() == np.float32
    with precision(np.float64):
        assert default_dtype() == np.float64
    assert default_dtype() == np.float32


# ---------------------------------------------------------------- finite differences

@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients(f64, name, seed):
    f, params = CASES[name](np.random.default_rng(seed))
    report = finite_diff_check(f, params, epsilon=1e-5, tolerance=1e-4)
    assert report.passed, report.summary()


def test_gradcheck_sigmoid_linear_tight(f64, rng):
    w = Parameter(rng.normal(size=(3, 4)), "w")
    x = T(rng.normal(size=(4, 2)))
    report = finite_diff_check(lambda: F.sum(F.sigmoid(F.matmul(w, x))), [w], tolerance=1e-6)
    assert report.passed, report.summary()
    # cross-check the analytic form sigma(z)(1 - sigma(z)) x^T
    z = w.data @ x.data
    s = 1 / (1 + np.exp(-z))
    want = (s * (1 - s)) @ x.data.T
    for c in report.coords:
        assert c.analytic == pytest.approx(want[c.index], rel=1e-12)


def test_gradcheck_detects_small_fault(f64, rng):
    w = Parameter(rng.normal(size=(3, 4)), "w")
    x = T(rng.normal(size=(4, 2)))
    report = finite_diff_check(lambda: F.sum(F.sigmoid(F.matmul(w, x))), [w], fault_scale=1.01)
    assert not report.passed
    assert report.failing_param_names == ["w"]
    assert report.worst_param == "w"
    assert "FAIL" in report.summary()


def test_gradcheck_rejects_float32():
    w = Parameter(np.ones(3, dtype=np.float32))
    with pytest.raises(TypeError):
        finite_diff_check(lambda: F.sum(w), [w])


def test_gradcheck_detects_nondeterminism(f64):
    w = Parameter(np.ones(3))
    rng = np.random.default_rng(0)
    with pytest.raises(NondeterminismError):
        finite_diff_check(lambda: F.sum(F.scale(w, float(rng.random()))), [w])


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1.0, 1.0) == 0.0
    assert rel_error(1.0, 3.0) == pytest.approx(0.5)


# ---------------------------------------------------------------- invariants

@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), oh=st.integers(1, 12), ow=st.integers(1, 12))
def test_upsample_preserves_constants_property(h, w, oh, ow):
    with precision(np.float64):
        out = F.upsample_bilinear(T(np.full((1, 1, h, w), -2.5)), oh, ow).data
    assert out.shape == (1, 1, oh, ow)
    np.testing.assert_allclose(out, -2.5, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(2, 9), w=st.integers(2, 9), k=st.sampled_from([1, 3, 5]),
       s=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_conv_is_linear_in_input_property(h, w, k, s, seed):
    rng = np.random.default_rng(seed)
    pad = k // 2
    a, b = rng.normal(size=(1, 2, h, w)), rng.normal(size=(1, 2, h, w))
    kern = T(rng.normal(size=(3, 2, k, k)))
    with precision(np.float64):
        lhs = F.conv2d(T(a + 2 * b), kern, None, s, pad).data
        rhs = F.conv2d(T(a), kern, None, s, pad).data + 2 * F.conv2d(T(b), kern, None, s, pad).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_float32_default_pipeline_dtype(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
    assert F.conv2d(x, w, None, 1, 1).dtype == np.float32
