"""scikit-learn style wrapper around :class:`SegModel` training and prediction."""
from __future__ import annotations


import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .config import profile_config
from .data import SampleRecord
from .metrics import evaluate
from .model import SegModel
from .text import Vocab
from .train import build_vocab, fit, make_optimizer, predict, pretrain_text, corpus_from_samples


def _as_records(X, y=None) -> list[SampleRecord]:
    """Accept SampleRecords, or (image, title) pairs with masks in ``y``."""
    X = list(X)
    if not X:
        raise ValueError("empty input")
    if all(isinstance(x, SampleRecord) for x in X):
        if y is not None:
            X = [SampleRecord(r.image, np.asarray(m), r.title, r.meta) for r, m in zip(X, y, strict=True)]
        return X
    out = []
    masks = [None] * len(X) if y is None else list(y)
    if len(masks) != len(X):
        raise ValueError(f"{len(X)} inputs but {len(masks)} masks")
    for i, (item, mask) in enumerate(zip(X, masks)):
        if not (isinstance(item, (tuple, list)) and len(item) == 2):
            raise TypeError(f"input {i}: expected SampleRecord or (image, title) pair")
        image, title = item
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ValueError(f"input {i}: image must be H x W x 3, got {image.shape}")
        if mask is None:
            mask = np.zeros(image.shape[:2], np.uint8)
        out.append(SampleRecord(image, np.asarray(mask), str(title or ""), {}))
    return out


class MutualQuerySegmenter(BaseEstimator):
    """Title-guided binary segmenter.

    Hyperparameters default to the named ``profile``; explicit arguments
    other than ``None`` take precedence.

    Parameters
    ----------
    profile : str
        One of the run profiles ("desk", "ablation", "tiny", "paper").
    use_lqv, use_vql : bool
        Enable language-query-vision and vision-query-language fusion.
    lr, epochs, batch_size : optional
        Optimiser settings; ``None`` keeps the profile value.
    pretrain_steps : int
        Text-encoder pretraining steps before segmentation training.
    precision : {"float64", "float32"}
    seed : int
    """

    def __init__(self, profile="desk", use_lqv=True, use_vql=True, lr=None, epochs=None, batch_size=None,
                 pretrain_steps=0, precision="float64", seed=0):
        self.profile = profile
        self.use_lqv = use_lqv
        self.use_vql = use_vql
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.pretrain_steps = pretrain_steps
        self.precision = precision
        self.seed = seed

    def _run_config(self):
        cfg = profile_config(self.profile)
        cfg.seed = self.seed
        cfg.precision = self.precision
        cfg.model.use_lqv = bool(self.use_lqv)
        cfg.model.use_vql = bool(self.use_vql)
        cfg.text.pretrain_steps = int(self.pretrain_steps)
        for key in ("lr", "epochs", "batch_size"):
            if getattr(self, key) is not None:
                setattr(cfg.optim, key, getattr(self, key))
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        return cfg

    @property
    def _dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def fit(self, X, y=None, vocab: Vocab | None = None):
        records = _as_records(X, y)
        cfg = self._run_config()
        size = cfg.model.input_size
        for i, r in enumerate(records):
            if r.image.shape[:2] != (size, size):
                raise ValueError(f"sample {i}: image is {r.image.shape[:2]}, profile expects {size}x{size}")
        self.run_config_ = cfg
        self.vocab_ = vocab or build_vocab([r.title for r in records])
        with T.precision(self._dtype):
            self.model_ = SegModel(cfg.model_config(len(self.vocab_)), seed=self.seed, dtype=self._dtype)
            if cfg.text.pretrain_steps:
                pretrain_text(self.model_, corpus_from_samples(records), self.vocab_, cfg.text.pretrain_steps,
                              cfg.optim.batch_size, cfg.optim.lr, seed=self.seed, rate=cfg.text.mask_rate,
                              replacement=cfg.text.mask_replacement)
            o = cfg.optim
            opt = make_optimizer(self.model_, o.lr, (o.beta1, o.beta2), o.eps, o.weight_decay)
            self.loss_curve_ = fit(self.model_, opt, records, self.vocab_, o.epochs, o.batch_size, seed=self.seed)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X) -> np.ndarray:
        """Binary masks ``[N, H, W]`` (uint8)."""
        self._check_fitted()
        records = _as_records(X)
        with T.precision(self._dtype):
            return np.stack(predict(self.model_, records, self.vocab_))

    def score(self, X, y=None) -> float:
        """Mean IoU against the masks carried by ``X`` (or given in ``y``)."""
        records = _as_records(X, y)
        preds = self.predict(records)
        return evaluate(zip(preds, [r.mask for r in records])).mIoU
