"""Batching, the segmentation training loop, text pretraining and batched prediction."""
from __future__ import annotations

import logging
import string
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import SampleRecord, attribute_values, categories, lexicon_words, ATTRIBUTE_QUERIES
from .model import SegModel, train_step
from .optim import AdamW
from .text import TextPretrainer, Vocab, make_pretrain_batch, pretrain_loss, tokenize

log = logging.getLogger(__name__)


def build_vocab(titles: Sequence[str]) -> Vocab:
    """Characters of ``titles``, the generator lexicon, digits and upper-case letters."""
    return Vocab.build(list(titles) + [string.digits + string.ascii_uppercase], lexicon_words())


def encode_titles(titles: Sequence[str], vocab: Vocab, length: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [tokenize(t, vocab, length) for t in titles]
    return np.stack([s.ids for s in seqs]), np.stack([s.valid for s in seqs])


def collate(samples: Sequence[SampleRecord], vocab: Vocab, length: int):
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    ids, valid = encode_titles([s.title for s in samples], vocab, length)
    return images, masks, ids, valid


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for ``epoch``; a pure function of (seed, epoch) so training can resume mid-run."""
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch])).permutation(n)


def make_optimizer(model: SegModel, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                   weight_decay: float = 0.01) -> AdamW:
    return AdamW(model.named_parameters(), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def fit(model: SegModel, optimizer: AdamW, samples: Sequence[SampleRecord], vocab: Vocab,
        epochs: int, batch_size: int, seed: int = 0, start_step: int = 0, max_steps: int | None = None,
        on_step: Callable[[int, int, float], None] | None = None) -> list[float]:
    """Train for ``epochs`` passes (or until ``max_steps``); returns the per-step losses.

    Steps are numbered globally; ``start_step`` skips the batches already
    consumed by an earlier run with the same seed.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("no training samples")
    per_epoch = -(-n // batch_size)
    length = model.cfg.text.length
    losses: list[float] = []
    step = 0
    for epoch in range(epochs):
        order = epoch_order(n, seed, epoch)
        for b in range(per_epoch):
            if max_steps is not None and step >= max_steps:
                return losses
            if step < start_step:
                step += 1
                continue
            batch = [samples[i] for i in order[b * batch_size:(b + 1) * batch_size]]
            loss = train_step(model, *collate(batch, vocab, length), optimizer)
            losses.append(loss)
            if on_step is not None:
                on_step(step, epoch, loss)
            step += 1
    return losses


def predict(model: SegModel, samples: Sequence[SampleRecord], vocab: Vocab, batch_size: int = 16,
            titles: Sequence[str] | None = None) -> list[np.ndarray]:
    titles = [s.title for s in samples] if titles is None else list(titles)
    out: list[np.ndarray] = []
    length = model.cfg.text.length
    for b in range(0, len(samples), batch_size):
        chunk = samples[b:b + batch_size]
        images = np.stack([s.image for s in chunk])
        ids, valid = encode_titles(titles[b:b + batch_size], vocab, length)
        out.extend(model.predict(images, ids, valid))
    return out


def pretrain_text(model: SegModel, corpus: Sequence[dict], vocab: Vocab, steps: int, batch_size: int,
                  lr: float, seed: int = 0, rate: float = 0.15, replacement: str = "mask") -> list[float]:
    """MLM + AVP + TCP pretraining of ``model.text`` on ``{"title", "attributes", "category"}`` records."""
    if steps <= 0 or not corpus:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31337]))
    heads = TextPretrainer(model.text, len(vocab), len(ATTRIBUTE_QUERIES), len(attribute_values()),
                           len(categories()), rng, model.dtype)
    opt = AdamW(heads.named_parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        batch = make_pretrain_batch([corpus[i] for i in idx], vocab, model.cfg.text.length, rate, rng,
                                    ATTRIBUTE_QUERIES, attribute_values(), categories(), replacement)
        heads.zero_grad()
        loss = pretrain_loss(batch, heads)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    log.info("text pretraining: %d steps, final loss %.4f", steps, losses[-1])
    return losses


def corpus_from_samples(samples: Sequence[SampleRecord]) -> list[dict]:
    return [{"title": s.title, "attributes": s.meta["attributes"], "category": s.meta["category"]}
            for s in samples if "attributes" in s.meta and "category" in s.meta]


def with_precision(precision: str):
    return T.precision(np.float32 if precision == "float32" else np.float64)
