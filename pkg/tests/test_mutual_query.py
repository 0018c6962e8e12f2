import numpy as np
import pytest
from hypothesis import given, strategies as st

from mqnet import tensor as T
from mqnet.mutual_query import MutualQuery, language_query_vision, mutual_query_stage, vision_query_language
from mqnet.tensor import ShapeError, Tensor


def identity_params(c_v, c_l, length):
    return {"lq_w": Tensor(np.eye(c_l)), "lq_b": Tensor(np.zeros(c_l)),
            "vk_w": Tensor(np.eye(c_v, c_l)), "vk_b": Tensor(np.zeros(c_l)),
            "vq_w": Tensor(np.eye(c_v)), "vq_b": Tensor(np.zeros(c_v)),
            "mk_w": Tensor(np.eye(length, c_v))}


def random_params(rng, c_v, c_l, length, bias=True):
    s = 1.0 if bias else 0.0
    return {"lq_w": Tensor(rng.standard_normal((c_l, c_l))), "lq_b": Tensor(s * rng.standard_normal(c_l)),
            "vk_w": Tensor(rng.standard_normal((c_v, c_l))), "vk_b": Tensor(s * rng.standard_normal(c_l)),
            "vq_w": Tensor(rng.standard_normal((c_v, c_v))), "vq_b": Tensor(s * rng.standard_normal(c_v)),
            "mk_w": Tensor(rng.standard_normal((length, c_v)))}


def test_lqv_hand_dot_product():
    F = Tensor(np.array([[[1.0, 0.0]]]))                 # 1x1 spatial, key [1, 0]
    L = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    fm = language_query_vision(F, L, np.array([True, True]), identity_params(2, 2, 2))
    np.testing.assert_allclose(fm.data[0, 0], [1.0, 3.0])


def test_vql_closed_form_softmax_hadamard():
    F = Tensor(np.array([[[2.0, 4.0]]]))                 # identity f_V_query -> F_VQ = [2, 4]
    F_M = Tensor(np.array([[[0.0, np.log(3.0)]]]))
    out = vision_query_language(F, F_M, np.array([True, True]), identity_params(2, 2, 2))
    np.testing.assert_allclose(out.F_MK.data[0, 0], [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(out.F_A.data[0, 0], [0.5, 3.0], atol=1e-15)


def test_constant_key_gives_spatially_constant_response(rng):
    F = Tensor(np.broadcast_to(rng.standard_normal(3), (4, 4, 3)).copy())
    fm = language_query_vision(F, Tensor(rng.standard_normal((5, 6))), np.ones(5, bool),
                               random_params(rng, 3, 6, 5))
    np.testing.assert_allclose(fm.data, np.broadcast_to(fm.data[0, 0], fm.shape))


def test_zero_features_zero_bias_give_zero_map(rng):
    fm = language_query_vision(T.zeros(3, 3, 4), Tensor(rng.standard_normal((5, 6))), np.ones(5, bool),
                               random_params(rng, 4, 6, 5, bias=False))
    assert not fm.data.any()


def test_zero_visual_query_annihilates(rng):
    p = random_params(rng, 3, 4, 5)
    p["vq_w"] = T.zeros(3, 3)
    p["vq_b"] = T.zeros(3)
    out = vision_query_language(Tensor(rng.standard_normal((2, 2, 3))), Tensor(rng.standard_normal((2, 2, 5))),
                                np.ones(5, bool), p)
    assert not out.F_A.data.any()


def test_softmax_sums_to_one_over_valid_tokens(rng):
    valid = np.array([True, True, True, False, False])
    out = vision_query_language(Tensor(rng.standard_normal((3, 3, 4))), Tensor(rng.standard_normal((3, 3, 5))),
                                valid, random_params(rng, 4, 6, 5))
    np.testing.assert_allclose(out.attention.data.sum(-1), 1.0, atol=1e-12)
    assert not out.attention.data[..., 3:].any()


def test_all_pad_title_gives_zero(rng):
    out = mutual_query_stage(Tensor(rng.standard_normal((2, 2, 4))), Tensor(rng.standard_normal((5, 6))),
                             np.zeros(5, bool), random_params(rng, 4, 6, 5))
    assert out.F_A.shape == (2, 2, 4) and not out.F_A.data.any()
    assert out.F_M.shape == (2, 2, 5)


def test_shape_contract_and_mismatch(rng):
    p = random_params(rng, 4, 6, 5)
    out = mutual_query_stage(Tensor(rng.standard_normal((2, 3, 3, 4))), Tensor(rng.standard_normal((2, 5, 6))),
                             np.ones((2, 5), bool), p)
    assert out.F_M.shape == (2, 3, 3, 5) and out.F_A.shape == (2, 3, 3, 4)
    with pytest.raises(ShapeError):
        language_query_vision(Tensor(rng.standard_normal((3, 3, 4))), Tensor(rng.standard_normal((5, 6))),
                              np.ones(4, bool), p)


def test_pad_tail_bit_identical(rng):
    p = random_params(rng, 4, 6, 8)
    F = Tensor(rng.standard_normal((3, 3, 4)))
    L = rng.standard_normal((8, 6))
    v5 = np.array([1, 1, 1, 0, 0], bool)
    v8 = np.array([1, 1, 1, 0, 0, 0, 0, 0], bool)
    L8 = L.copy()
    L8[5:] = 99.0                                       # PAD content must not matter either
    a = mutual_query_stage(F, Tensor(L[:5]), v5, p).F_A.data
    b = mutual_query_stage(F, Tensor(L8), v8, p).F_A.data
    np.testing.assert_array_equal(a, b)


def test_without_pad_mask_padding_leaks(rng):
    p = random_params(rng, 4, 6, 5)
    F = Tensor(rng.standard_normal((3, 3, 4)))
    L = rng.standard_normal((5, 6))
    valid = np.array([1, 1, 1, 0, 0], bool)
    a = mutual_query_stage(F, Tensor(L), valid, p, mask_pad=False).F_A.data
    L[4] += 1.0
    b = mutual_query_stage(F, Tensor(L), valid, p, mask_pad=False).F_A.data
    assert not np.array_equal(a, b)


def test_without_vql_is_linear_in_response(rng):
    p = random_params(rng, 4, 6, 5)
    F_M = rng.standard_normal((2, 2, 5))
    out = vision_query_language(Tensor(rng.standard_normal((2, 2, 4))), Tensor(F_M), np.ones(5, bool), p,
                                use_vql=False)
    np.testing.assert_allclose(out.F_A.data, F_M @ p["mk_w"].data)


@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_property_positive_scaling_keeps_argmax(scale, seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 3, 4, 5, bias=False)
    F = Tensor(rng.standard_normal((2, 2, 3)))
    L = rng.standard_normal((5, 4))
    a = language_query_vision(F, Tensor(L), np.ones(5, bool), p).data
    b = language_query_vision(F, Tensor(L * scale), np.ones(5, bool), p).data
    np.testing.assert_allclose(b, a * scale, rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(a.argmax(-1), b.argmax(-1))


@given(st.floats(0.01, 5.0), st.integers(0, 4), st.integers(0, 1000))
def test_property_softmax_share_monotone(delta, t, seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 3, 4, 5)
    F = Tensor(rng.standard_normal((2, 2, 3)))
    F_M = rng.standard_normal((2, 2, 5))
    a = vision_query_language(F, Tensor(F_M), np.ones(5, bool), p).attention.data
    F_M[..., t] += delta
    b = vision_query_language(F, Tensor(F_M), np.ones(5, bool), p).attention.data
    assert (b[..., t] > a[..., t]).all()


def test_stage_gradcheck_wrt_inputs(rng):
    p = random_params(rng, 3, 4, 5)
    F, L = Tensor(rng.standard_normal((2, 2, 3))), Tensor(rng.standard_normal((5, 4)))
    valid = np.array([1, 1, 1, 1, 0], bool)
    r = Tensor(rng.standard_normal((2, 2, 3)))
    errs = T.grad_check_inputs(lambda: T.tsum(mutual_query_stage(F, L, valid, p).F_A * r), {"F": F, "L": L})
    assert max(errs.values()) < 1e-5


def test_module_zero_init_output(rng):
    mq = MutualQuery(4, 6, 5, rng)
    assert not mq.params["mk_w"].data.any()
    assert "mk_b" not in mq.params
