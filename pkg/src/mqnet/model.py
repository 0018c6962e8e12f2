"""Segmentation model: backbone with per-stage mutual-query injection, decoder, loss."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, StageFeatures
from .layers import Module, uniform_init
from .mutual_query import MutualQuery, MutualQueryOutput
from .optim import AdamW
from .tensor import ShapeError, Tensor
from .text import TextConfig, TextEncoder


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    text: TextConfig = field(default_factory=TextConfig)
    vocab_size: int = 64
    decoder_dims: tuple[int, ...] | None = None     # widths of M_1..M_3; default C_V^4, C_V^3, C_V^2
    use_lqv: bool = True
    use_vql: bool = True
    attn_scale: bool = False
    upsample_mode: str = "bilinear"
    zero_init_head: bool = True
    zero_init_fusion: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.text, dict):
            self.text = TextConfig(**self.text)
        if self.decoder_dims is None:
            d = self.backbone.dims
            self.decoder_dims = (d[3], d[2], d[1])
        self.decoder_dims = tuple(self.decoder_dims)
        if len(self.decoder_dims) != 3:
            raise ValueError("decoder_dims lists the widths of M_1, M_2, M_3")
        if self.backbone.patch_size not in (2, 4):
            raise ValueError("the final decoder upsample supports patch sizes 2 and 4")

    @property
    def mask_pad(self) -> bool:
        return self.text.mask_pad

    def decoder_channels(self) -> list[tuple[int, int]]:
        """(input, output) channels of decode stages j = 1..4."""
        dims = self.backbone.dims
        prev = dims[3]
        out = []
        for j in range(1, 5):
            cin = prev + dims[4 - j]
            cout = self.decoder_dims[j - 1] if j < 4 else 2
            out.append((cin, cout))
            prev = cout
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def inject(F: Tensor, F_A: Tensor) -> Tensor:
    """``F_VA = F + F_A``."""
    if F.shape != F_A.shape:
        raise ShapeError(f"inject: visual {F.shape} vs filtered {F_A.shape}")
    return F + F_A


def decode_stage(M_prev: Tensor, F_A: Tensor, weight: Tensor, bias: Tensor | None,
                 final: bool = False, mode: str = "bilinear", final_factor: int = 4) -> Tensor:
    """``Conv(Upsample([M_prev; F_A]))``: x2 upsample + ReLU, or x``final_factor`` (the patch
    size) and no activation when final."""
    if M_prev.shape[:-1] != F_A.shape[:-1]:
        raise ShapeError(f"decode_stage: M {M_prev.shape} and F_A {F_A.shape} differ spatially")
    x = T.concat([M_prev, F_A], axis=-1)
    x = T.upsample(x, final_factor if final else 2, mode)
    x = T.conv2d(x, weight, bias)
    return x if final else T.relu(x)


@dataclass
class ForwardState:
    logits: Tensor
    stages: StageFeatures
    fusion: list[MutualQueryOutput | None]
    filtered: list[Tensor]             # F_A^1..F_A^4 as consumed by the decoder
    decoded: list[Tensor]              # M_0..M_4


def prepare_images(images, dtype=None) -> Tensor:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor((arr - 0.5).astype(T.resolve_dtype(dtype)))


class SegModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=None):
        super().__init__()
        dtype = T.resolve_dtype(dtype)
        self.cfg = cfg
        self.dtype = dtype
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.backbone = self.add_child("backbone", Backbone(cfg.backbone, rng, dtype))
        self.text = self.add_child("text", TextEncoder(cfg.text, cfg.vocab_size, rng, dtype))
        self.fusion = [self.add_child(f"mq{i}", MutualQuery(c, cfg.text.dim, cfg.text.length, rng, dtype,
                                                             zero_init_output=cfg.zero_init_fusion))
                       for i, c in enumerate(cfg.backbone.dims)]
        for j, (cin, cout) in enumerate(cfg.decoder_channels(), start=1):
            if j == 4 and cfg.zero_init_head:
                self.add_param(f"dec{j}.w", np.zeros((3, 3, cin, cout), dtype))
            else:
                self.add_param(f"dec{j}.w", uniform_init(rng, 9 * cin, (3, 3, cin, cout), dtype))
            self.add_param(f"dec{j}.b", np.zeros(cout, dtype))

    def forward(self, images, ids: np.ndarray, valid: np.ndarray, return_state: bool = False):
        """Logits ``[N, H, W, 2]`` for a batch of images and tokenised titles."""
        cfg = self.cfg
        x = prepare_images(images, self.dtype)
        ids = np.atleast_2d(ids)
        valid = np.atleast_2d(np.asarray(valid, dtype=bool))
        if ids.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} images but {ids.shape[0]} titles")
        fusion: list[MutualQueryOutput | None] = []
        filtered: list[Tensor] = []
        L = self.text.forward(ids, valid) if cfg.use_lqv else None

        def fuse(i: int, F: Tensor):
            if not cfg.use_lqv:
                fusion.append(None)
                filtered.append(T.zeros(*F.shape, dtype=F.dtype))
                return None
            out = self.fusion[i].forward(F, L, valid, mask_pad=cfg.mask_pad,
                                         use_vql=cfg.use_vql, scale=cfg.attn_scale)
            fusion.append(out)
            filtered.append(out.F_A)
            return out.F_A

        stages = self.backbone.forward_stages(x, fuse)
        M = stages.fused[3]
        decoded = [M]
        for j in range(1, 5):
            M = decode_stage(M, filtered[4 - j], self._params[f"dec{j}.w"], self._params[f"dec{j}.b"],
                             final=j == 4, mode=cfg.upsample_mode,
                             final_factor=cfg.backbone.patch_size)
            decoded.append(M)
        if return_state:
            return ForwardState(M, stages, fusion, filtered, decoded)
        return M

    def loss(self, images, masks, ids, valid) -> Tensor:
        logits = self.forward(images, ids, valid)
        return T.cross_entropy_2class(logits, np.asarray(masks).reshape(logits.shape[:-1]))

    def predict(self, images, ids, valid) -> np.ndarray:
        """Binary masks by argmax over the two logit channels."""
        with T.no_grad():
            logits = self.forward(images, ids, valid)
        return (logits.data[..., 1] > logits.data[..., 0]).astype(np.uint8)


def train_step(model: SegModel, images, masks, ids, valid, optimizer: AdamW) -> float:
    """One AdamW step on the pixel-mean cross entropy; returns the pre-step loss."""
    if len(images) == 0:
        raise ValueError("train_step: empty batch")
    model.zero_grad()
    loss = model.loss(images, masks, ids, valid)
    value = loss.item()
    if not np.isfinite(value):
        raise T.NonFiniteError(f"non-finite training loss {value}")
    loss.backward()
    optimizer.step()
    return value


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: SegModel, extra: dict | None = None,
                    optimizer: AdamW | None = None) -> Path:
    """Directory of ``.mqt`` tensors plus ``config.json``."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    for name, p in model.named_parameters():
        T.save_tensor(path / "params" / f"{name}.mqt", p)
    if optimizer is not None:
        (path / "optim").mkdir(exist_ok=True)
        for name, arr in optimizer.state_dict().items():
            T.save_tensor(path / "optim" / f"{name}.mqt", arr)
    manifest = {"model": model.cfg.to_dict(), "dtype": model.dtype.name, **(extra or {})}
    (path / "config.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8")
    return path


def load_checkpoint(path, optimizer_factory=None):
    """Returns ``(model, manifest, optimizer_or_None)``."""
    path = Path(path)
    manifest = json.loads((path / "config.json").read_text(encoding="utf-8"))
    cfg = ModelConfig(**manifest["model"])
    model = SegModel(cfg, seed=0, dtype=manifest.get("dtype", "float64"))
    state = {name: T.load_tensor(path / "params" / f"{name}.mqt").data for name, _ in model.named_parameters()}
    model.load_state_dict(state)
    optimizer = None
    if optimizer_factory is not None and (path / "optim").exists():
        optimizer = optimizer_factory(model)
        ostate = {f.stem: T.load_tensor(f).data for f in (path / "optim").glob("*.mqt")}
        optimizer.load_state_dict(ostate)
    return model, manifest, optimizer
