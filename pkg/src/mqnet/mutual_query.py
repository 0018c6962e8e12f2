"""Language-query-vision and vision-query-language fusion for one backbone stage.

Shapes (batch axis first):

* ``F``   visual features        ``[N, H, W, C_V]``
* ``L``   title embeddings       ``[N, T, C_L]``
* ``F_M`` token response maps    ``[N, H, W, T]``
* ``F_A`` filtered features      ``[N, H, W, C_V]``

With PAD masking on, only the token prefix up to the longest title in the
batch enters any arithmetic; trailing PAD columns of ``F_M`` are zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module, linear, uniform_init
from .tensor import ShapeError, Tensor


@dataclass
class MutualQueryOutput:
    F_A: Tensor
    F_M: Tensor
    F_VQ: Tensor | None = None
    F_MK: Tensor | None = None
    attention: Tensor | None = None     # softmax over tokens


def _n_effective(valid: np.ndarray, mask_pad: bool) -> int:
    if not mask_pad:
        return valid.shape[1]
    lengths = valid.sum(axis=1)
    if not np.array_equal(np.arange(valid.shape[1])[None] < lengths[:, None], valid):
        raise ValueError("valid_mask must mark a prefix of each title")
    return int(lengths.max(initial=0))


def _batched(F: Tensor, L: Tensor, valid: np.ndarray):
    squeeze = F.ndim == 3
    if squeeze:
        F = F.reshape((1,) + F.shape)
        L = L.reshape((1,) + L.shape)
        valid = np.asarray(valid, dtype=bool)[None]
    valid = np.asarray(valid, dtype=bool)
    if L.shape[1] != valid.shape[1]:
        raise ShapeError(f"title length mismatch: L has T={L.shape[1]}, valid_mask has {valid.shape[1]}")
    if F.shape[0] != L.shape[0]:
        raise ShapeError(f"batch mismatch: {F.shape[0]} images vs {L.shape[0]} titles")
    return F, L, valid, squeeze


def language_query_vision(F: Tensor, L: Tensor, valid: np.ndarray, params: dict[str, Tensor],
                          mask_pad: bool = True, scale: bool = False) -> Tensor:
    """Per-token response maps ``F_M[h, w, t] = <f_V_key(F)[h, w], f_L_query(L)[t]>``."""
    F, L, valid, squeeze = _batched(F, L, valid)
    n, h, w, _ = F.shape
    length = L.shape[1]
    n_eff = _n_effective(valid, mask_pad)
    if n_eff == 0:
        fm = T.zeros(n, h, w, length, dtype=F.dtype)
        return fm[0] if squeeze else fm
    lq = linear(L[:, :n_eff] if n_eff < length else L, params["lq_w"], params["lq_b"])
    vk = linear(F, params["vk_w"], params["vk_b"])
    c_l = vk.shape[-1]
    fm = T.matmul(vk.reshape(n, h * w, c_l), lq.transpose(0, 2, 1)).reshape(n, h, w, n_eff)
    if scale:
        fm = fm * (1.0 / np.sqrt(c_l))
    if mask_pad:
        fm = T.masked(fm, valid[:, None, None, :n_eff])
    if n_eff < length:
        fm = T.concat([fm, T.zeros(n, h, w, length - n_eff, dtype=fm.dtype)], axis=-1)
    return fm[0] if squeeze else fm


def vision_query_language(F: Tensor, F_M: Tensor, valid: np.ndarray, params: dict[str, Tensor],
                          mask_pad: bool = True, use_vql: bool = True) -> MutualQueryOutput:
    """Filter token responses: ``F_A = f_V_query(F) * f_MK(softmax_T(F_M))``.

    With ``use_vql=False`` the softmax and the visual-query filter are skipped
    and ``F_A = f_MK(F_M)``.  A title with no valid token gives ``F_A = 0``.
    """
    squeeze = F.ndim == 3
    Fb = F.reshape((1,) + F.shape) if squeeze else F
    Mb = F_M.reshape((1,) + F_M.shape) if squeeze else F_M
    valid = np.asarray(valid, dtype=bool)
    valid = valid[None] if squeeze else valid
    if Mb.shape[:3] != Fb.shape[:3] or Mb.shape[-1] != valid.shape[1]:
        raise ShapeError(f"F_M {F_M.shape} does not match F {F.shape} / valid {valid.shape}")
    n, h, w, c_v = Fb.shape
    length = Mb.shape[-1]
    n_eff = _n_effective(valid, mask_pad)

    def _unbatch(t):
        return None if t is None else (t[0] if squeeze else t)

    if n_eff == 0:
        fa = T.zeros(n, h, w, c_v, dtype=F.dtype)
        return MutualQueryOutput(_unbatch(fa), F_M)
    fm = Mb[..., :n_eff] if n_eff < length else Mb
    mk_w = params["mk_w"]
    mk_w = mk_w[:n_eff] if n_eff < mk_w.shape[0] else mk_w
    if mk_w.shape[0] != n_eff:
        raise ShapeError(f"f_MK expects T={params['mk_w'].shape[0]}, got {length}")
    if not use_vql:
        fa = T.matmul(fm, mk_w)
        return MutualQueryOutput(_unbatch(fa), F_M, F_MK=_unbatch(fa))
    mask = valid[:, None, None, :n_eff] if mask_pad else None
    attn = T.softmax(fm, axis=-1, mask=mask)
    fmk = T.matmul(attn, mk_w)
    fvq = linear(Fb, params["vq_w"], params["vq_b"])
    fa = fvq * fmk
    return MutualQueryOutput(_unbatch(fa), F_M, _unbatch(fvq), _unbatch(fmk), _unbatch(attn))


def mutual_query_stage(F: Tensor, L: Tensor, valid: np.ndarray, params: dict[str, Tensor],
                       mask_pad: bool = True, use_vql: bool = True, scale: bool = False
                       ) -> MutualQueryOutput:
    F_M = language_query_vision(F, L, valid, params, mask_pad=mask_pad, scale=scale)
    return vision_query_language(F, F_M, valid, params, mask_pad=mask_pad, use_vql=use_vql)


class MutualQuery(Module):
    """Parameters of one stage: f_L_query, f_V_key, f_V_query (1x1 maps) and f_MK (T -> C_V)."""

    def __init__(self, c_v: int, c_l: int, length: int, rng: np.random.Generator, dtype=None,
                 zero_init_output: bool = True):
        super().__init__()
        dtype = T.resolve_dtype(dtype)
        self.add_param("lq_w", uniform_init(rng, c_l, (c_l, c_l), dtype, gain=np.sqrt(0.5)))
        self.add_param("lq_b", np.zeros(c_l, dtype))
        self.add_param("vk_w", uniform_init(rng, c_v, (c_v, c_l), dtype, gain=np.sqrt(0.5)))
        self.add_param("vk_b", np.zeros(c_l, dtype))
        self.add_param("vq_w", uniform_init(rng, c_v, (c_v, c_v), dtype, gain=np.sqrt(0.5)))
        self.add_param("vq_b", np.zeros(c_v, dtype))
        mk = np.zeros((length, c_v), dtype) if zero_init_output else uniform_init(rng, length, (length, c_v), dtype)
        self.add_param("mk_w", mk)

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    def forward(self, F: Tensor, L: Tensor, valid: np.ndarray, mask_pad: bool = True,
                use_vql: bool = True, scale: bool = False) -> MutualQueryOutput:
        return mutual_query_stage(F, L, valid, self._params, mask_pad, use_vql, scale)
