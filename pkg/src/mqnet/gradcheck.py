"""Finite-difference checks for every differentiable op and the end-to-end tiny model.

Each case builds random float64 inputs, projects the op output onto a fixed
random direction to get a scalar, and compares backprop against central
differences. Ops are looked up on the :mod:`mqnet.tensor` module at call
time, so a patched op is checked under its own name.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, patch_embed, patch_merge, window_attention_block
from .layers import attend
from .mutual_query import language_query_vision, vision_query_language
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error < TOLERANCE


def _t(rng, *shape, away_from_zero=False) -> Tensor:
    a = rng.standard_normal(shape)
    if away_from_zero:
        # keep finite differences off the kinks of piecewise-linear ops
        a = np.sign(a) * (np.abs(a) + 0.1)
    return Tensor(a)


def _project(out: Tensor, rng_seed: int = 99) -> Callable[[], Tensor]:
    r = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return lambda y: T.tsum(y * Tensor(r))


def _case(build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]):
    def run(rng):
        fn, inputs = build(rng)
        with T.no_grad():
            proj = _project(fn())
        return lambda: proj(fn()), inputs
    return run


def _binary(op_name):
    def build(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 3, 4)
        return lambda: getattr(T, op_name)(a, b), {"a": a, "b": b}
    return build


def _unary(op_name, shape=(3, 5), **kw):
    def build(rng):
        x = _t(rng, *shape, away_from_zero=op_name == "relu")
        return lambda: getattr(T, op_name)(x, **kw), {"x": x}
    return build


def _softmax_masked(rng):
    x = _t(rng, 2, 3, 5)
    mask = rng.random((2, 3, 5)) > 0.3
    mask[0, 0] = False          # fully masked row
    return lambda: T.softmax(x, axis=-1, mask=mask), {"x": x}


def _masked(rng):
    x = _t(rng, 3, 4)
    keep = rng.random((3, 4)) > 0.5
    return lambda: T.masked(x, keep), {"x": x}


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    return lambda: T.matmul(a, b), {"a": a, "b": b}


def _tsum(rng):
    x = _t(rng, 2, 3, 4)
    return lambda: T.tsum(x, axis=1, keepdims=True) * T.tsum(x), {"x": x}


def _cross_entropy(rng):
    x = _t(rng, 6, 4)
    target = rng.integers(0, 4, 6)
    return lambda: T.cross_entropy(x, target), {"logits": x}


def _cross_entropy_2class(rng):
    x = _t(rng, 2, 3, 3, 2)
    target = rng.integers(0, 2, (2, 3, 3))
    return lambda: T.cross_entropy_2class(x, target), {"logits": x}


def _layer_norm(rng):
    x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
    return lambda: T.layer_norm(x, g, b), {"x": x, "gamma": g, "beta": b}


def _shape_ops(rng):
    x = _t(rng, 2, 3, 4)
    return lambda: T.transpose(T.reshape(x, (6, 4)), (1, 0)), {"x": x}


def _getitem(rng):
    x = _t(rng, 4, 5)
    rows = np.array([0, 2, 2, 3])
    return lambda: x[rows, 1:4] * x[..., :3][rows], {"x": x}


def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 4)
    return lambda: T.concat([a, b], axis=-1), {"a": a, "b": b}


def _roll(rng):
    x = _t(rng, 1, 4, 4, 2)
    return lambda: T.roll(x, (-1, 2), (1, 2)), {"x": x}


def _embedding(rng):
    table = _t(rng, 6, 3)
    ids = np.array([[0, 5, 5], [2, 1, 0]])
    return lambda: T.embedding(ids, table), {"table": table}


def _conv2d(rng):
    x, k, b = _t(rng, 2, 4, 5, 3), _t(rng, 3, 3, 3, 2), _t(rng, 2)
    return lambda: T.conv2d(x, k, b), {"x": x, "kernel": k, "bias": b}


def _upsample(mode, factor):
    def build(rng):
        x = _t(rng, 1, 3, 2, 2)
        return lambda: T.upsample(x, factor, mode), {"x": x}
    return build


def _attend(rng):
    q, k, v = _t(rng, 2, 4, 6), _t(rng, 2, 4, 6), _t(rng, 2, 4, 6)
    mask = rng.random((2, 1, 4, 4)) > 0.3
    mask[..., 0] = True
    return lambda: attend(q, k, v, 2, mask)[0], {"q": q, "k": k, "v": v}


def _block_params(rng, c, mlp_ratio=2):
    hid = c * mlp_ratio
    shapes = {"ln1_g": (c,), "ln1_b": (c,), "wqkv": (c, 3 * c), "bqkv": (3 * c,), "wo": (c, c), "bo": (c,),
              "ln2_g": (c,), "ln2_b": (c,), "w1": (c, hid), "b1": (hid,), "w2": (hid, c), "b2": (c,)}
    return {k: Tensor(rng.standard_normal(s) * 0.5 + (1.0 if k.endswith("_g") else 0.0)) for k, s in shapes.items()}


def _window_block(shifted):
    def build(rng):
        x = _t(rng, 1, 4, 4, 4)
        params = _block_params(rng, 4)
        return (lambda: window_attention_block(x, params, 2, 2, shifted),
                {"x": x, "wqkv": params["wqkv"], "w1": params["w1"], "ln1_g": params["ln1_g"]})
    return build


def _patch_embed(rng):
    img, w, b, pos = _t(rng, 1, 4, 4, 3), _t(rng, 12, 5), _t(rng, 5), _t(rng, 2, 2, 5)
    return lambda: patch_embed(img, w, b, pos, 2), {"image": img, "weight": w, "pos": pos}


def _patch_merge(rng):
    x, g, b, w = _t(rng, 1, 4, 4, 3), _t(rng, 12), _t(rng, 12), _t(rng, 12, 6)
    return lambda: patch_merge(x, g, b, w), {"x": x, "ln_g": g, "weight": w}


def _mq_params(rng, c_v, c_l, length):
    return {"lq_w": _t(rng, c_l, c_l), "lq_b": _t(rng, c_l), "vk_w": _t(rng, c_v, c_l), "vk_b": _t(rng, c_l),
            "vq_w": _t(rng, c_v, c_v), "vq_b": _t(rng, c_v), "mk_w": _t(rng, length, c_v)}


def _lqv(rng):
    F, L = _t(rng, 2, 2, 2, 3), _t(rng, 2, 4, 5)
    valid = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], bool)
    p = _mq_params(rng, 3, 5, 4)
    return lambda: language_query_vision(F, L, valid, p), {"F": F, "L": L, "lq_w": p["lq_w"], "vk_w": p["vk_w"]}


def _vql(use_vql):
    def build(rng):
        F, F_M = _t(rng, 2, 2, 2, 3), _t(rng, 2, 2, 2, 4)
        valid = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], bool)
        p = _mq_params(rng, 3, 5, 4)
        return (lambda: vision_query_language(F, F_M, valid, p, use_vql=use_vql).F_A,
                {"F": F, "F_M": F_M, "mk_w": p["mk_w"], "vq_w": p["vq_w"]})
    return build


def tiny_model_case(seed: int = 0):
    """End-to-end loss of the tiny model (16x16 image, T=4) w.r.t. a sample of its parameters."""
    from .model import ModelConfig, SegModel
    from .text import TextConfig

    bb = BackboneConfig(patch_size=2, dims=(4, 8, 8, 8), heads=(1, 2, 2, 2), window=2, input_size=16)
    cfg = ModelConfig(backbone=bb, text=TextConfig(length=4, dim=4, layers=1, heads=1), vocab_size=8,
                      decoder_dims=(8, 8, 4), zero_init_head=False, zero_init_fusion=False)

    def build(rng):
        model = SegModel(cfg, seed=seed, dtype=np.float64)
        images = rng.random((1, 16, 16, 3))
        masks = np.zeros((1, 16, 16), np.int64)
        masks[0, 4:11, 3:12] = 1
        ids = np.array([[3, 5, 7, 0]])
        valid = np.array([[1, 1, 1, 0]], bool)
        names = ["backbone.patch_w", "backbone.s0.b0.wqkv", "backbone.s3.b1.w2", "text.tok_emb",
                 "mq0.mk_w", "mq2.vk_w", "mq3.lq_w", "dec1.w", "dec4.w"]
        params = dict(model.named_parameters())
        inputs = {n: params[n] for n in names if n in params}
        for p in model.parameters():
            p.requires_grad = False
        return lambda: model.loss(images, masks, ids, valid), inputs
    return build


def op_cases() -> dict[str, Callable]:
    return {
        "add": _case(_binary("add")),
        "sub": _case(_binary("sub")),
        "mul": _case(_binary("mul")),
        "masked": _case(_masked),
        "relu": _case(_unary("relu")),
        "gelu": _case(_unary("gelu")),
        "matmul": _case(_matmul),
        "sum": _case(_tsum),
        "softmax": _case(_softmax_masked),
        "log_softmax": _case(_unary("log_softmax", (3, 5))),
        "cross_entropy": _cross_entropy,
        "cross_entropy_2class": _cross_entropy_2class,
        "layer_norm": _case(_layer_norm),
        "reshape_transpose": _case(_shape_ops),
        "getitem": _case(_getitem),
        "concat": _case(_concat),
        "roll": _case(_roll),
        "embedding": _case(_embedding),
        "conv2d": _case(_conv2d),
        "upsample_bilinear_x2": _case(_upsample("bilinear", 2)),
        "upsample_bilinear_x4": _case(_upsample("bilinear", 4)),
        "upsample_nearest_x2": _case(_upsample("nearest", 2)),
        "attention": _case(_attend),
        "window_attention": _case(_window_block(False)),
        "shifted_window_attention": _case(_window_block(True)),
        "patch_embed": _case(_patch_embed),
        "patch_merge": _case(_patch_merge),
        "language_query_vision": _case(_lqv),
        "vision_query_language": _case(_vql(True)),
        "fusion_without_vql": _case(_vql(False)),
    }


def run_gradcheck(include_model: bool = True, seed: int = 0, eps: float = 1e-6,
                  only: list[str] | None = None, model_coords: int = 16,
                  model_eps: float = 1e-7) -> list[CheckResult]:
    """Run every case in float64; a case that raises is reported as failed.

    The end-to-end case uses a smaller step: with hundreds of ReLU units some
    pre-activation sits within 1e-6 of its kink, and a wider central difference
    straddles it.
    """
    cases = op_cases()
    if include_model:
        cases["tiny_model_end_to_end"] = tiny_model_case(seed)
    if only:
        unknown = set(only) - set(cases)
        if unknown:
            raise KeyError(f"unknown gradcheck cases: {sorted(unknown)}")
        cases = {k: v for k, v in cases.items() if k in only}
    results = []
    with T.precision(np.float64):
        for name, build in cases.items():
            t0 = time.perf_counter()
            rng = np.random.default_rng([seed, len(name)])
            try:
                fn, inputs = build(rng)
                is_model = name == "tiny_model_end_to_end"
                errs = T.grad_check_inputs(fn, inputs, eps=model_eps if is_model else eps,
                                           max_coords=model_coords if is_model else None, rng=rng)
                results.append(CheckResult(name, max(errs.values()), time.perf_counter() - t0))
            except Exception as exc:     # noqa: BLE001 - report and keep going
                results.append(CheckResult(name, float("inf"), time.perf_counter() - t0,
                                           f"{type(exc).__name__}: {exc}"))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'time':>7}  status"]
    for r in results:
        status = "ok" if r.passed else ("ERROR " + r.error if r.error else "FAIL")
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.seconds:6.2f}s  {status}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
