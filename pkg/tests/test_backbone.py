import numpy as np
import pytest
from hypothesis import given, strategies as st

from mqnet import tensor as T
from mqnet.backbone import (Backbone, BackboneConfig, effective_window, patch_merge, shift_attention_mask,
                            window_attention_block, window_partition, window_reverse)
from mqnet.gradcheck import _block_params
from mqnet.tensor import ShapeError, Tensor


def test_stage_shapes_desk():
    cfg = BackboneConfig()
    bb = Backbone(cfg, np.random.default_rng(0))
    out = bb.forward_stages(Tensor(np.random.default_rng(1).random((2, 64, 64, 3))))
    assert [f.shape for f in out.features] == [(2, 16, 16, 32), (2, 8, 8, 64), (2, 4, 4, 128), (2, 2, 2, 256)]


def test_config_validation():
    with pytest.raises(ShapeError):
        BackboneConfig(input_size=60)
    with pytest.raises(ValueError):
        BackboneConfig(dims=(8, 16, 32))


def test_wrong_input_size_rejected():
    bb = Backbone(BackboneConfig(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        bb.forward_stages(Tensor(np.zeros((1, 32, 32, 3))))


@given(st.sampled_from([1, 2, 4]), st.integers(1, 3))
def test_property_window_partition_roundtrip(w, n):
    x = Tensor(np.arange(n * 8 * 8 * 3, dtype=np.float64).reshape(n, 8, 8, 3))
    win = window_partition(x, w)
    assert win.shape == (n * (8 // w) ** 2, w * w, 3)
    np.testing.assert_array_equal(window_reverse(win, w, n, 8, 8).data, x.data)


def test_window_partition_groups_local_pixels():
    x = Tensor(np.arange(16.0).reshape(1, 4, 4, 1))
    np.testing.assert_array_equal(window_partition(x, 2).data[0, :, 0], [0, 1, 4, 5])


def test_shift_mask_matches_region_oracle():
    h, w, s = 4, 2, 1
    m = shift_attention_mask(h, h, w, s)
    # region label of each pixel after the cyclic shift, computed directly
    coords = (np.arange(h) + s) % h
    label = lambda c: 0 if c < h - w else (1 if c < h - s else 2)   # noqa: E731
    lab = np.array([[label(coords[i]) * 3 + label(coords[j]) for j in range(h)] for i in range(h)])
    lab = np.roll(np.roll(lab, s, 0), s, 1)     # undo: labels indexed by shifted position
    region = np.zeros((h, h), int)
    for hs_i, hs in enumerate((slice(0, -w), slice(-w, -s), slice(-s, None))):
        for ws_i, ws in enumerate((slice(0, -w), slice(-w, -s), slice(-s, None))):
            region[hs, ws] = hs_i * 3 + ws_i
    wins = region.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    expect = wins[:, :, None] == wins[:, None, :]
    np.testing.assert_array_equal(m, expect)
    assert m.shape == (4, 4, 4) and m[0].all()           # the top-left window never straddles the seam


def test_effective_window_clamps():
    assert effective_window(2, 1) == 1
    assert effective_window(5, 15) == 5
    with pytest.raises(ShapeError):
        effective_window(4, 6)


def test_window_block_is_local_without_shift():
    rng = np.random.default_rng(0)
    params = _block_params(rng, 4)
    x = rng.standard_normal((1, 4, 4, 4))
    y0 = window_attention_block(Tensor(x), params, 2, 2, shifted=False).data
    x2 = x.copy()
    x2[0, 3, 3, 0] += 1.0                                 # bottom-right window; one channel so LayerNorm sees it
    y1 = window_attention_block(Tensor(x2), params, 2, 2, shifted=False).data
    changed = np.abs(y1 - y0).sum(-1)[0] > 0
    assert changed[2:, 2:].any() and not changed[:2].any() and not changed[:, :2].any()


def test_shifted_block_crosses_window_border():
    rng = np.random.default_rng(0)
    params = _block_params(rng, 4)
    x = rng.standard_normal((1, 8, 8, 4))
    y0 = window_attention_block(Tensor(x), params, 2, 4, shifted=True).data
    x2 = x.copy()
    x2[0, 3, 3, 0] += 1.0
    y1 = window_attention_block(Tensor(x2), params, 2, 4, shifted=True).data
    changed = np.abs(y1 - y0).sum(-1)[0] > 0
    assert changed[4, 4]                                  # across the un-shifted 4x4 window border


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    params = _block_params(rng, 4)
    _, probs = window_attention_block(Tensor(rng.standard_normal((1, 4, 4, 4))), params, 2, 2, True,
                                      return_attention=True)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-12)


def test_patch_merge_shape():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 4, 4, 3)))
    y = patch_merge(x, Tensor(np.ones(12)), Tensor(np.zeros(12)), Tensor(rng.standard_normal((12, 6))))
    assert y.shape == (2, 2, 2, 6)


def test_injection_shape_checked():
    cfg = BackboneConfig(patch_size=2, dims=(4, 8, 8, 8), heads=(1, 2, 2, 2), input_size=16)
    bb = Backbone(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        bb.forward_stages(Tensor(np.zeros((1, 16, 16, 3))), [T.zeros(1, 8, 8, 5), None, None, None])


def test_injection_is_added_before_merge():
    cfg = BackboneConfig(patch_size=2, dims=(4, 8, 8, 8), heads=(1, 2, 2, 2), input_size=16)
    bb = Backbone(cfg, np.random.default_rng(0))
    img = Tensor(np.random.default_rng(1).random((1, 16, 16, 3)))
    base = bb.forward_stages(img)
    delta = np.random.default_rng(2).standard_normal((1, 8, 8, 4))
    inj = bb.forward_stages(img, [T.tensor(delta), None, None, None])
    np.testing.assert_array_equal(inj.features[0].data, base.features[0].data)
    np.testing.assert_allclose(inj.fused[0].data, base.features[0].data + delta)
    assert not np.allclose(inj.features[1].data, base.features[1].data)
