import numpy as np
import pytest
from hypothesis import settings

from mqnet.backbone import BackboneConfig
from mqnet.model import ModelConfig
from mqnet.text import TextConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    """16 px input, patch 2, T = 4: the smallest configuration the model accepts."""
    bb = BackboneConfig(patch_size=2, dims=(4, 8, 8, 8), heads=(1, 2, 2, 2), window=2, input_size=16)
    text = TextConfig(length=kw.pop("length", 4), dim=4, layers=1, heads=1, mask_pad=kw.pop("mask_pad", True))
    return ModelConfig(backbone=bb, text=text, vocab_size=kw.pop("vocab_size", 12),
                       decoder_dims=(8, 8, 4), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 24-sample normal-difficulty split at 32 px."""
    from mqnet.data import generate_split
    out = tmp_path_factory.mktemp("data32")
    generate_split(24, out, "normal", seed=3, size=32)
    return out / "manifest.jsonl"
