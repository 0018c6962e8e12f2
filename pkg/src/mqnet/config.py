"""Run configuration: named profiles, TOML files and command-line overrides.

Precedence is profile defaults < config file < explicit overrides.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .backbone import BackboneConfig
from .model import ModelConfig
from .text import TextConfig


@dataclass
class ModelSection:
    input_size: int = 64
    patch_size: int = 4
    dims: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    heads: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    window: int = 2
    blocks_per_stage: int = 2
    mlp_ratio: int = 2
    decoder_dims: list[int] = field(default_factory=list)    # empty -> mirror the backbone
    use_lqv: bool = True
    use_vql: bool = True
    attn_scale: bool = False
    upsample_mode: str = "bilinear"


@dataclass
class TextSection:
    length: int = 12
    dim: int = 32
    layers: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    mask_pad: bool = True
    mask_rate: float = 0.15
    mask_replacement: str = "mask"
    pretrain_steps: int = 0


@dataclass
class OptimSection:
    lr: float = 5e-5
    epochs: int = 30
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class DataSection:
    manifest: str = ""
    n: int = 600
    difficulty: str = "normal"


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    precision: str = "float64"
    model: ModelSection = field(default_factory=ModelSection)
    text: TextSection = field(default_factory=TextSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        apply_overrides(cfg, d)
        return cfg

    def model_config(self, vocab_size: int) -> ModelConfig:
        m, t = self.model, self.text
        bb = BackboneConfig(patch_size=m.patch_size, dims=tuple(m.dims), blocks_per_stage=m.blocks_per_stage,
                            window=m.window, heads=tuple(m.heads), mlp_ratio=m.mlp_ratio,
                            input_size=m.input_size)
        tc = TextConfig(length=t.length, dim=t.dim, layers=t.layers, heads=t.heads,
                        mlp_ratio=t.mlp_ratio, mask_pad=t.mask_pad)
        return ModelConfig(backbone=bb, text=tc, vocab_size=vocab_size,
                           decoder_dims=tuple(m.decoder_dims) or None, use_lqv=m.use_lqv,
                           use_vql=m.use_vql, attn_scale=m.attn_scale, upsample_mode=m.upsample_mode)


PROFILES: dict[str, dict[str, Any]] = {
    # published recipe: Swin-B widths, T=100, C_L=300, 480 px input
    "paper": {
        "precision": "float32",
        "model": {"input_size": 480, "patch_size": 4, "dims": [128, 256, 512, 1024],
                  "heads": [4, 8, 16, 32], "window": 5},
        "text": {"length": 100, "dim": 300, "heads": 4},
        "optim": {"lr": 5e-5, "epochs": 30, "batch_size": 8},
    },
    "desk": {
        "model": {"input_size": 64, "patch_size": 4, "dims": [32, 64, 128, 256], "heads": [1, 2, 4, 8],
                  "window": 2},
        "text": {"length": 12, "dim": 32},
        "optim": {"lr": 5e-5, "epochs": 30, "batch_size": 8},
    },
    # the ablation harness: narrower than desk so nine training runs fit in minutes; float32 for
    # speed, and scaled token responses, without which the softmax over tokens saturates early
    "ablation": {
        "precision": "float32",
        "model": {"input_size": 64, "patch_size": 4, "dims": [16, 32, 64, 128], "heads": [1, 2, 4, 8],
                  "window": 2, "decoder_dims": [32, 16, 16], "attn_scale": True},
        "text": {"length": 12, "dim": 32},
        "optim": {"lr": 1e-3, "epochs": 12, "batch_size": 8},
        "data": {"n": 600, "difficulty": "hard"},
    },
    # end-to-end gradient checks: 16 px input, T = 4
    "tiny": {
        "model": {"input_size": 16, "patch_size": 2, "dims": [4, 8, 8, 8], "heads": [1, 2, 2, 2],
                  "window": 2, "decoder_dims": [8, 8, 4]},
        "text": {"length": 4, "dim": 4, "layers": 1, "heads": 1},
        "optim": {"lr": 5e-5, "epochs": 1, "batch_size": 2},
    },
}


def apply_overrides(cfg: Any, overrides: dict) -> Any:
    """Recursively assign ``overrides`` onto dataclass ``cfg``; unknown keys are errors."""
    names = {f.name: f for f in fields(cfg)}
    for key, value in overrides.items():
        if key not in names:
            raise KeyError(f"unknown config key {key!r} in section {type(cfg).__name__}")
        current = getattr(cfg, key)
        if hasattr(current, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise TypeError(f"section {key!r} needs a table")
            apply_overrides(current, value)
        else:
            if isinstance(current, bool) and not isinstance(value, bool):
                raise TypeError(f"{key}: expected a boolean, got {value!r}")
            if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            setattr(cfg, key, copy.deepcopy(value))
    return cfg


def profile_config(name: str) -> RunConfig:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=name)
    apply_overrides(cfg, PROFILES[name])
    return cfg


def load_config(path=None, profile: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then the TOML file at ``path``, then ``overrides``."""
    file_data: dict = {}
    if path:
        file_data = tomli.loads(Path(path).read_text(encoding="utf-8"))
    name = profile or file_data.get("profile", "desk")
    cfg = profile_config(name)
    file_data = {k: v for k, v in file_data.items() if k != "profile"}
    apply_overrides(cfg, file_data)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
