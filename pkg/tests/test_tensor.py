import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mqnet import tensor as T
from mqnet.tensor import NonFiniteError, ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def finite_arrays(shape):
    return arrays(np.float64, shape, elements=st.floats(-3, 3, allow_nan=False, width=64))


def test_add_broadcast_leading_and_gradient_reduction():
    a, b = leaf(np.ones((2, 3))), leaf([1.0, 2.0, 3.0])
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_non_leading_broadcast_rejected():
    with pytest.raises(ShapeError):
        T.add(leaf(np.ones((2, 3))), leaf(np.ones((2, 1))))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 2))))


def test_backward_twice_raises_unless_retained():
    x = leaf([1.0, 2.0])
    y = (x * x).sum()
    y.backward(retain_graph=True)
    y.backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])      # accumulated twice
    with pytest.raises(RuntimeError):
        y.backward()


def test_gradient_accumulates_over_shared_subgraph():
    x = leaf(3.0)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(12.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_names_op():
    x = leaf([1e308, 1e308])
    with pytest.raises(NonFiniteError, match="mul"):
        x * 10.0


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert y.is_leaf and not y.requires_grad


def test_softmax_fully_masked_row_is_zero():
    x = leaf(np.zeros((2, 3)))
    mask = np.array([[True, False, True], [False, False, False]])
    p = T.softmax(x, -1, mask)
    np.testing.assert_allclose(p.data, [[0.5, 0.0, 0.5], [0.0, 0.0, 0.0]])


def test_cross_entropy_uniform_is_log_k():
    logits = leaf(np.zeros((5, 7)))
    assert T.cross_entropy(logits, np.arange(5)).item() == pytest.approx(np.log(7), abs=1e-12)


def test_cross_entropy_2class_validates_targets():
    with pytest.raises(ValueError):
        T.cross_entropy_2class(leaf(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
    with pytest.raises(ShapeError):
        T.cross_entropy_2class(leaf(np.zeros((1, 2, 2, 3))), np.zeros((1, 2, 2), int))


def test_bilinear_upsample_half_pixel_oracle():
    x = Tensor(np.array([[0.0, 1.0]])[None, :, :, None])
    y = T.upsample(x, 2, "bilinear").data[0, 0, :, 0]
    np.testing.assert_allclose(y, [0.0, 0.25, 0.75, 1.0])


def test_nearest_upsample_repeats():
    x = Tensor(np.arange(4.0).reshape(1, 2, 2, 1))
    y = T.upsample(x, 2, "nearest").data[0, :, :, 0]
    np.testing.assert_array_equal(y, np.kron(np.arange(4.0).reshape(2, 2), np.ones((2, 2))))


def test_conv2d_matches_direct_sum(rng):
    x, k, b = rng.standard_normal((1, 4, 5, 2)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)
    y = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3], k) + b
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_layer_norm_moments(rng):
    x = Tensor(rng.standard_normal((4, 8)) * 5 + 3)
    y = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-3)


def test_precision_context_and_dtype_propagation():
    with T.precision(np.float32):
        z = T.zeros(2)
        assert z.dtype == np.float32
    assert T.zeros(2).dtype == np.float64
    assert Tensor(np.ones(2, np.float32)).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_save_load_roundtrip(tmp_path, rng, dtype):
    a = rng.standard_normal((2, 3, 4)).astype(dtype)
    T.save_tensor(tmp_path / "a.mqt", a)
    raw = (tmp_path / "a.mqt").read_bytes()
    assert raw[:4] == b"MQT1"
    b = T.load_tensor(tmp_path / "a.mqt")
    assert b.dtype == dtype
    np.testing.assert_array_equal(b.data, a)


def test_load_rejects_bad_magic(tmp_path):
    (tmp_path / "x.mqt").write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(ValueError):
        T.load_tensor(tmp_path / "x.mqt")


def test_grad_check_catches_wrong_rule():
    def bad_square(x):
        # forward x^2 with a deliberately wrong backward (3x instead of 2x)
        return T._result(x.data ** 2, (x,), lambda g: (3 * x.data * g,), "bad_square")

    err = T.grad_check(lambda x: T.tsum(bad_square(x)), np.array([0.5, -1.0, 2.0]))
    assert err > 0.1


@given(finite_arrays((3, 4)), finite_arrays((4,)))
def test_property_add_mul_gradients(a, b):
    x, y = leaf(a), leaf(b)
    T.tsum(x * y + x).backward()
    np.testing.assert_allclose(x.grad, np.broadcast_to(b + 1, (3, 4)))
    np.testing.assert_allclose(y.grad, a.sum(0))


@given(finite_arrays((2, 5)))
def test_property_softmax_normalised_and_shift_invariant(a):
    p = T.softmax(Tensor(a)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(a + 7.0)).data, p, atol=1e-12)


@given(finite_arrays((2, 3)))
def test_property_grad_check_softmax(a):
    r = np.arange(6.0).reshape(2, 3)
    assert T.grad_check(lambda x: T.tsum(T.softmax(x) * Tensor(r)), a) < 1e-6


@given(st.integers(1, 3), st.integers(1, 3))
def test_property_roll_inverse(sy, sx):
    x = Tensor(np.arange(32.0).reshape(1, 4, 4, 2))
    back = T.roll(T.roll(x, (sy, sx), (1, 2)), (-sy, -sx), (1, 2))
    np.testing.assert_array_equal(back.data, x.data)
