import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noduleforge import functional as F
from noduleforge.functional import ConvSpec, ShapeError, effective_receptive_field
from noduleforge.gradcheck import gradcheck, gradient_suite
from noduleforge.tensor import NumericError, Tensor, backward, no_grad, precision

from oracles import naive_conv3d


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_disconnected_parameter_gets_zero_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    backward((a * 2.0).sum(), inputs=[a, b])
    np.testing.assert_array_equal(b.grad, np.zeros(2))
    np.testing.assert_array_equal(a.grad, np.full(3, 2.0))


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(a.grad, np.tile(np.arange(3.0), (2, 1)))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = a * 3.0
    assert not y.requires_grad


def test_precision_context_sets_dtype():
    with precision("float32"):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.ones(2)).dtype == np.float64  # float input keeps its dtype
    assert Tensor([1, 2]).dtype == np.float64


def test_conv_sum_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    k = rng.standard_normal((2, 2, 3, 3, 3))
    spec = ConvSpec.make(3, padding=1)
    xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
    F.conv3d(xt, kt, None, spec).sum().backward()
    h = 1e-5
    worst = 0.0
    for arr, grad in ((x, xt.grad), (k, kt.grad)):
        for idx in list(np.ndindex(arr.shape))[::7]:
            p, m = arr.copy(), arr.copy()
            p[idx] += h
            m[idx] -= h
            args_p = (p, k) if arr is x else (x, p)
            args_m = (m, k) if arr is x else (x, m)
            num = (F.conv3d(*args_p, None, spec).data.sum() - F.conv3d(*args_m, None, spec).data.sum()) / (2 * h)
            worst = max(worst, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-8))
    assert worst < 1e-6


# -- convolution ---------------------------------------------------------------

def test_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 1, 3, 3, 3))
    out = F.conv3d(x, np.ones((1, 1, 1, 1, 1)))
    np.testing.assert_array_equal(out.data, x)


def test_dilated_delta_response():
    x = np.zeros((1, 1, 1, 1, 7))
    x[..., 3] = 1.0
    a, b, c = 2.0, 3.0, 5.0
    w = np.array([a, b, c]).reshape(1, 1, 1, 1, 3)
    spec = ConvSpec.make((1, 1, 3), dilation=(1, 1, 2), padding=(0, 0, 2))
    row = F.conv3d(x, w, None, spec).data.reshape(-1)
    expect = np.zeros(7)
    expect[1], expect[3], expect[5] = c, b, a
    np.testing.assert_array_equal(row, expect)


@pytest.mark.parametrize("dil", [1, 2, 4])
def test_conv_matches_naive_oracle(dil):
    rng = np.random.default_rng(dil)
    x = rng.standard_normal((1, 2, 5, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    spec = ConvSpec.make(3, dilation=dil, padding=dil)
    got = F.conv3d(x, w, b, spec).data
    ref = naive_conv3d(x, w, b, dilation=(dil,) * 3, padding=(dil,) * 3)
    assert np.max(np.abs(got - ref)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 2),
       st.integers(4, 7), st.integers(0, 10_000))
def test_conv_oracle_property(stride, dil, k, pad, size, seed):
    rng = np.random.default_rng(seed)
    span = dil * (k - 1) + 1
    if size + 2 * pad < span:
        return
    x = rng.standard_normal((1, 2, size, size - 1, size))
    w = rng.standard_normal((2, 2, k, k, k))
    spec = ConvSpec.make(k, stride=stride, dilation=dil, padding=pad)
    if size - 1 + 2 * pad < span:
        with pytest.raises(ShapeError):
            F.conv3d(x, w, None, spec)
        return
    got = F.conv3d(x, w, None, spec).data
    ref = naive_conv3d(x, w, None, (stride,) * 3, (dil,) * 3, (pad,) * 3)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        F.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))


def test_conv_rejects_non_finite_input():
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 1, 1, 1] = np.nan
    with pytest.raises(NumericError):
        F.conv3d(x, np.ones((1, 1, 1, 1, 1)))


def test_receptive_field_examples():
    assert effective_receptive_field([(3, 1)])[0] == 3
    assert effective_receptive_field([(3, 1), (3, 2), (3, 4)])[0] == 15
    assert effective_receptive_field([(3, 1)] * 3)[0] == 7


def test_receptive_field_rejects_strided_layer():
    with pytest.raises(ValueError):
        effective_receptive_field([ConvSpec.make(3, stride=2)])


def test_downsample_shape_constant_and_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 4, 8, 8, 8))
    w = rng.standard_normal((5, 4, 3, 3, 3))
    out = F.downsample(x, w)
    assert out.shape == (1, 5, 4, 4, 4)
    ref = naive_conv3d(x, w, None, (2, 2, 2), (1, 1, 1), (1, 1, 1))
    assert np.max(np.abs(out.data - ref)) < 1e-12
    # constant input, kernel summing to s: interior output equals value * s
    k = np.full((1, 1, 3, 3, 3), 0.1)
    const = F.downsample(np.full((1, 1, 8, 8, 8), 2.0), k).data
    assert const[0, 0, 1:, 1:, 1:] == pytest.approx(np.full((3, 3, 3), 2.0 * 2.7))


def test_upsample_examples():
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 2, 2))
    np.testing.assert_array_equal(F.upsample_nearest(x, 1).data, x)
    v = np.array([1.5, -2.0]).reshape(1, 1, 1, 1, 2)
    out = F.upsample_nearest(v, 2).data
    assert out.shape == (1, 1, 2, 2, 4)
    np.testing.assert_array_equal(out[0, 0, 1, 0], [1.5, 1.5, -2.0, -2.0])
    t = Tensor(x, requires_grad=True)
    F.upsample_nearest(t, 2).sum().backward()
    np.testing.assert_array_equal(t.grad, np.full(x.shape, 8.0))


def test_relu_and_dropout():
    np.testing.assert_array_equal(F.relu(np.array([-2.0, 0.0, 3.0])).data, [0, 0, 3])
    x = np.random.default_rng(0).standard_normal(10)
    for training in (True, False):
        np.testing.assert_array_equal(F.dropout(x, 0.0, training, np.random.default_rng(0)).data, x)
    np.testing.assert_array_equal(F.dropout(x, 0.5, False).data, x)


def test_dropout_expectation_monte_carlo():
    x = np.linspace(-1, 1, 8)
    rng = np.random.default_rng(5)
    draws = np.stack([F.dropout(x, 0.5, True, rng).data for _ in range(10_000)])
    # each mean has std |x| / sqrt(10^4)
    assert np.all(np.abs(draws.mean(axis=0) - x) < 5 * np.abs(x) / 100 + 1e-12)


def test_batchnorm_normalises_in_training():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 2, 2, 2)) * 5 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out = F.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3, 4)), 1, atol=1e-3)
    assert np.all(rm != 0)


def test_linear_matches_matmul():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)
    np.testing.assert_allclose(F.linear(x, w, b).data, x @ w.T + b)


# -- gradcheck -----------------------------------------------------------------

def test_gradcheck_conv_dilation2():
    spec = ConvSpec.make(3, dilation=2, padding=2)
    rep = gradcheck(lambda x, w: F.conv3d(x, w, None, spec), [(1, 2, 5, 5, 5), (2, 2, 3, 3, 3)])
    assert rep.passed and rep.max_rel_error < 1e-6


def test_gradcheck_identity_is_exact():
    rep = gradcheck(lambda x: x, [(3, 4)])
    assert rep.max_rel_error == 0.0


def test_gradcheck_catches_wrong_gradient():
    def doubled(x):
        return Tensor._from_op(x.data * 1.0, (x,), lambda g: (2.0 * g,))

    assert not gradcheck(doubled, [(5,)]).passed


def test_gradient_suite_all_pass():
    reports = gradient_suite()
    names = {r.op_name for r in reports}
    for needed in ("conv3d_dilation1", "conv3d_dilation2", "conv3d_dilation4", "downsample",
                   "upsample_nearest", "linear", "batchnorm_train", "roi_align", "cls_loss",
                   "reg_loss", "total_loss"):
        assert needed in names
    bad = [(r.op_name, r.max_rel_error) for r in reports if not r.passed]
    assert not bad
