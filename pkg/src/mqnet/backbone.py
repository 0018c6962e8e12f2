"""Four-stage hierarchical encoder with (shifted-)window self-attention."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import Module, attend, linear, uniform_init
from .tensor import ShapeError, Tensor


@dataclass
class BackboneConfig:
    patch_size: int = 4
    dims: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    window: int = 2
    heads: tuple[int, ...] = (1, 2, 4, 8)
    mlp_ratio: int = 2
    input_size: int = 64

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.heads = tuple(self.heads)
        if len(self.dims) != 4 or len(self.heads) != 4:
            raise ValueError("need exactly four stage widths and head counts")
        if self.input_size % (self.patch_size * 8):
            raise ShapeError(f"input size {self.input_size} not divisible by patch_size*8")
        for e in self.stage_sizes():
            w = min(self.window, e)
            if e % w:
                raise ShapeError(f"window {self.window} does not tile a {e}x{e} stage")

    def stage_sizes(self) -> list[int]:
        base = self.input_size // self.patch_size
        return [base >> i for i in range(4)]


@dataclass
class StageFeatures:
    features: list[Tensor] = field(default_factory=list)   # F^1..F^4
    fused: list[Tensor] = field(default_factory=list)      # F_VA^1..F_VA^4 (F^i when nothing injected)

    def __getitem__(self, i: int) -> Tensor:
        return self.features[i]

    def __len__(self) -> int:
        return len(self.features)


def patch_embed(image: Tensor, weight: Tensor, bias: Tensor | None = None,
                pos: Tensor | None = None, patch_size: int = 4) -> Tensor:
    """Project non-overlapping ``p x p`` patches of ``[N, H, W, 3]`` (or ``[H, W, 3]``)."""
    squeeze = image.ndim == 3
    x = image.reshape((1,) + image.shape) if squeeze else image
    n, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patch_embed: {h}x{w} image not divisible by patch size {p}")
    x = x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = linear(x.reshape(n, h // p, w // p, p * p * c), weight, bias)
    if pos is not None:
        x = x + pos
    return x[0] if squeeze else x


def window_partition(x: Tensor, w: int) -> Tensor:
    n, h, wd, c = x.shape
    x = x.reshape(n, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * (h // w) * (wd // w), w * w, c)


def window_reverse(x: Tensor, w: int, n: int, h: int, wd: int) -> Tensor:
    c = x.shape[-1]
    x = x.reshape(n, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, wd, c)


def shift_attention_mask(h: int, wd: int, w: int, s: int) -> np.ndarray:
    """Boolean ``[nW, w*w, w*w]`` mask; False where two tokens of a window came from
    different regions of the un-shifted map (i.e. across the cyclic-shift seam)."""
    region = np.zeros((h, wd), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
        for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            region[hs, ws] = cnt
            cnt += 1
    r = region.reshape(h // w, w, wd // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    return r[:, :, None] == r[:, None, :]


def effective_window(window: int, extent: int) -> int:
    w = min(window, extent)
    if extent % w:
        raise ShapeError(f"window {window} does not divide spatial extent {extent}")
    return w


def window_attention_block(x: Tensor, params: dict[str, Tensor], heads: int, window: int,
                           shifted: bool, return_attention: bool = False):
    """Pre-norm (S)W-MSA block followed by an MLP block; shape preserving.

    ``params`` keys: ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2.
    """
    n, h, wd, c = x.shape
    if h != wd:
        raise ShapeError(f"window_attention_block expects square maps, got {h}x{wd}")
    w = effective_window(window, h)
    s = w // 2 if shifted and w < h else 0
    y = T.layer_norm(x, params["ln1_g"], params["ln1_b"])
    if s:
        y = T.roll(y, (-s, -s), (1, 2))
    win = window_partition(y, w)
    qkv = linear(win, params["wqkv"], params["bqkv"])
    q, k, v = qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:]
    mask = None
    if s:
        m = shift_attention_mask(h, wd, w, s)
        mask = np.tile(m, (n, 1, 1))[:, None]
    a, probs = attend(q, k, v, heads, mask)
    a = window_reverse(linear(a, params["wo"], params["bo"]), w, n, h, wd)
    if s:
        a = T.roll(a, (s, s), (1, 2))
    x = x + a
    y = T.layer_norm(x, params["ln2_g"], params["ln2_b"])
    x = x + linear(T.gelu(linear(y, params["w1"], params["b1"])), params["w2"], params["b2"])
    return (x, probs) if return_attention else x


def patch_merge(x: Tensor, ln_g: Tensor, ln_b: Tensor, weight: Tensor) -> Tensor:
    """2x2 neighbourhood concat (4C) -> LayerNorm -> linear to 2C."""
    n, h, w, c = x.shape
    x = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 4, 2, 5)
    x = x.reshape(n, h // 2, w // 2, 4 * c)
    return linear(T.layer_norm(x, ln_g, ln_b), weight)


def init_block_params(module: Module, prefix: str, c: int, mlp_ratio: int,
                      rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    hid = c * mlp_ratio
    spec = {
        "ln1_g": np.ones(c, dtype), "ln1_b": np.zeros(c, dtype),
        "wqkv": uniform_init(rng, c, (c, 3 * c), dtype, gain=np.sqrt(0.5)),
        "bqkv": np.zeros(3 * c, dtype),
        "wo": uniform_init(rng, c, (c, c), dtype, gain=np.sqrt(0.5)), "bo": np.zeros(c, dtype),
        "ln2_g": np.ones(c, dtype), "ln2_b": np.zeros(c, dtype),
        "w1": uniform_init(rng, c, (c, hid), dtype), "b1": np.zeros(hid, dtype),
        "w2": uniform_init(rng, hid, (hid, c), dtype, gain=np.sqrt(0.5)), "b2": np.zeros(c, dtype),
    }
    return {k: module.add_param(prefix + k, v) for k, v in spec.items()}


Injection = Sequence["Tensor | None"] | Callable[[int, Tensor], "Tensor | None"]


class Backbone(Module):
    """Patch embedding, four stages of alternating W-MSA / SW-MSA blocks, patch merging."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=None):
        super().__init__()
        dtype = T.resolve_dtype(dtype)
        self.cfg = cfg
        p, c1 = cfg.patch_size, cfg.dims[0]
        g = cfg.input_size // p
        self.add_param("patch_w", uniform_init(rng, p * p * 3, (p * p * 3, c1), dtype))
        self.add_param("patch_b", np.zeros(c1, dtype))
        self.add_param("pos_emb", (rng.standard_normal((g, g, c1)) * 0.02).astype(dtype))
        self.blocks: list[list[dict[str, Tensor]]] = []
        for i, c in enumerate(cfg.dims):
            self.blocks.append([init_block_params(self, f"s{i}.b{j}.", c, cfg.mlp_ratio, rng, dtype)
                                for j in range(cfg.blocks_per_stage)])
            if i < 3:
                self.add_param(f"merge{i}.ln_g", np.ones(4 * c, dtype))
                self.add_param(f"merge{i}.ln_b", np.zeros(4 * c, dtype))
                self.add_param(f"merge{i}.w",
                               uniform_init(rng, 4 * c, (4 * c, cfg.dims[i + 1]), dtype, gain=np.sqrt(0.5)))

    def embed(self, image: Tensor) -> Tensor:
        n, h, w, _ = image.shape
        if h != self.cfg.input_size or w != self.cfg.input_size:
            raise ShapeError(f"backbone built for {self.cfg.input_size}px input, got {h}x{w}")
        return patch_embed(image, self._params["patch_w"], self._params["patch_b"],
                           self._params["pos_emb"], self.cfg.patch_size)

    def run_stage(self, i: int, x: Tensor) -> Tensor:
        for j, params in enumerate(self.blocks[i]):
            x = window_attention_block(x, params, self.cfg.heads[i], self.cfg.window, shifted=j % 2 == 1)
        return x

    def merge(self, i: int, x: Tensor) -> Tensor:
        p = self._params
        return patch_merge(x, p[f"merge{i}.ln_g"], p[f"merge{i}.ln_b"], p[f"merge{i}.w"])

    def forward_stages(self, image: Tensor, injected: Injection | None = None) -> StageFeatures:
        """Run all stages.  ``injected`` gives, per stage, a tensor added to ``F^i``
        before patch merging: either a list (entries may be None) or a callable
        ``(stage_index, F_i) -> Tensor | None``."""
        squeeze = image.ndim == 3
        if squeeze:
            image = image.reshape((1,) + image.shape)
        out = StageFeatures()
        x = self.embed(image)
        for i in range(4):
            f = self.run_stage(i, x)
            extra = injected(i, f) if callable(injected) else (injected[i] if injected else None)
            fused = f
            if extra is not None:
                if extra.shape != f.shape:
                    raise ShapeError(f"stage {i + 1}: injected {extra.shape} vs features {f.shape}")
                fused = f + extra
            out.features.append(f)
            out.fused.append(fused)
            if i < 3:
                x = self.merge(i, fused)
        if squeeze:
            out.features = [t[0] for t in out.features]
            out.fused = [t[0] for t in out.fused]
        return out
