"""Title tokenisation, whole-word masking, the text encoder and its pretraining losses.

Tokens are single characters.  A word-segmentation table groups characters
into words so that masking can hide whole words; runs of ASCII letters and
digits (model numbers, brand codes) also count as one word.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .layers import Module, attend, linear, uniform_init
from .tensor import Tensor

PAD, MASK, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[MASK]", "[UNK]")

_ASCII_RUN = re.compile(r"[A-Za-z0-9]+")


class Vocab:
    """Character vocabulary plus a word table mapping words to their token strings."""

    def __init__(self, tokens: Sequence[str], words: Mapping[str, Sequence[str]] | None = None):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.words = {w: tuple(toks) for w, toks in (words or {}).items()}
        for w, toks in self.words.items():
            if any(t in RESERVED for t in toks):
                raise ValueError(f"word {w!r} segments into a reserved token")
        self._max_word = max((len(w) for w in self.words), default=1)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    @classmethod
    def build(cls, titles: Iterable[str], words: Iterable[str] = ()) -> "Vocab":
        words = list(words)
        chars = set()
        for text in list(titles) + words:
            chars.update(c for c in text if not c.isspace())
        return cls(list(RESERVED) + sorted(chars), {w: tuple(w) for w in words if len(w) > 1})

    def save(self, vocab_path, words_path) -> None:
        Path(vocab_path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        lines = [f"{w}\t{' '.join(toks)}" for w, toks in sorted(self.words.items())]
        Path(words_path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, vocab_path, words_path=None) -> "Vocab":
        tokens = Path(vocab_path).read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        words = {}
        if words_path is not None and Path(words_path).exists():
            for line in Path(words_path).read_text(encoding="utf-8").splitlines():
                if line.strip():
                    word, toks = line.split("\t")
                    words[word] = tuple(toks.split(" "))
        return cls(tokens, words)

    def segment(self, title: str) -> list[str]:
        """Split a title into words by greedy longest match against the word table."""
        out: list[str] = []
        for chunk in title.split():
            i = 0
            while i < len(chunk):
                m = _ASCII_RUN.match(chunk, i)
                if m:
                    out.append(m.group())
                    i = m.end()
                    continue
                for n in range(min(self._max_word, len(chunk) - i), 0, -1):
                    piece = chunk[i:i + n]
                    if n == 1 or piece in self.words:
                        out.append(piece)
                        i += n
                        break
        return out


@dataclass
class TokenSequence:
    ids: np.ndarray                 # [T] int
    valid: np.ndarray               # [T] bool, a prefix of True values
    spans: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def padded_to(self, length: int) -> "TokenSequence":
        """Same title with a longer (or equal) PAD tail."""
        if length < len(self.ids):
            raise ValueError("cannot shorten a sequence")
        ids = np.full(length, PAD, dtype=np.int64)
        ids[:len(self.ids)] = self.ids
        valid = np.zeros(length, dtype=bool)
        valid[:len(self.valid)] = self.valid
        return TokenSequence(ids, valid, list(self.spans))


def tokenize(title: str, vocab: Vocab, length: int) -> TokenSequence:
    """Character-tokenise ``title``, truncate or PAD-fill to ``length`` and record word spans."""
    ids = np.full(length, PAD, dtype=np.int64)
    valid = np.zeros(length, dtype=bool)
    spans: list[tuple[int, int]] = []
    pos = 0
    for word in vocab.segment(title.strip()):
        if pos >= length:
            break
        toks = vocab.words.get(word, tuple(word))
        start = pos
        for tok in toks:
            if pos >= length:
                break
            ids[pos] = vocab.id(tok)
            valid[pos] = True
            pos += 1
        spans.append((start, pos))
    return TokenSequence(ids, valid, spans)


@dataclass
class MaskedSample:
    ids: np.ndarray            # corrupted ids [T]
    positions: np.ndarray      # sorted masked positions m(x)
    originals: np.ndarray      # original ids at those positions


def wwm_mask(seq: TokenSequence, rate: float, rng: np.random.Generator,
             replacement: str = "mask", vocab_size: int | None = None) -> MaskedSample:
    """Mask whole words until at least ``rate`` of the valid tokens are hidden.

    At least one word is masked whenever the sequence has a valid token.
    ``replacement="bert"`` applies the 80/10/10 MASK/random/keep split per
    word instead of always writing MASK.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    ids = seq.ids.copy()
    n_valid = seq.n_valid
    if n_valid == 0 or not seq.spans:
        empty = np.zeros(0, dtype=np.int64)
        return MaskedSample(ids, empty, empty)
    target = max(1, int(np.ceil(rate * n_valid)))
    chosen: list[tuple[int, int]] = []
    count = 0
    for k in rng.permutation(len(seq.spans)):
        if count >= target:
            break
        s, e = seq.spans[k]
        chosen.append((s, e))
        count += e - s
    positions = np.array(sorted(p for s, e in chosen for p in range(s, e)), dtype=np.int64)
    originals = seq.ids[positions].copy()
    for s, e in chosen:
        if replacement == "mask":
            ids[s:e] = MASK
        elif replacement == "bert":
            u = rng.random()
            if u < 0.8:
                ids[s:e] = MASK
            elif u < 0.9:
                if vocab_size is None:
                    raise ValueError("bert replacement needs vocab_size")
                ids[s:e] = rng.integers(len(RESERVED), vocab_size, size=e - s)
        else:
            raise ValueError(f"unknown replacement {replacement!r}")
    return MaskedSample(ids, positions, originals)


# ----------------------------------------------------------------------
# encoder


@dataclass
class TextConfig:
    length: int = 12          # T
    dim: int = 32             # C_L
    layers: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    mask_pad: bool = True


def _prefix_lengths(valid: np.ndarray) -> np.ndarray:
    lengths = valid.sum(axis=1)
    expect = np.arange(valid.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(expect, valid):
        raise ValueError("valid_mask must mark a prefix of each sequence")
    return lengths


class TextEncoder(Module):
    """Pre-norm transformer encoder producing ``L`` of shape ``[N, T, C_L]``.

    With ``mask_pad`` the valid prefix (up to the longest title in the
    batch) is processed on its own, and PAD positions are computed as
    queries that read the valid keys.  Valid outputs therefore never depend
    on how many PAD tokens follow.
    """

    def __init__(self, cfg: TextConfig, vocab_size: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        dtype = T.resolve_dtype(dtype)
        self.cfg = cfg
        c, hid = cfg.dim, cfg.dim * cfg.mlp_ratio
        self.add_param("tok_emb", (rng.standard_normal((vocab_size, c)) * 0.5).astype(dtype))
        self.add_param("pos_emb", (rng.standard_normal((cfg.length, c)) * 0.1).astype(dtype))
        for i in range(cfg.layers):
            p = f"l{i}."
            self.add_param(p + "ln1_g", np.ones(c, dtype))
            self.add_param(p + "ln1_b", np.zeros(c, dtype))
            for name in ("wq", "wk", "wv", "wo"):
                self.add_param(p + name, uniform_init(rng, c, (c, c), dtype, gain=np.sqrt(0.5)))
                self.add_param(p + "b" + name[1], np.zeros(c, dtype))
            self.add_param(p + "ln2_g", np.ones(c, dtype))
            self.add_param(p + "ln2_b", np.zeros(c, dtype))
            self.add_param(p + "w1", uniform_init(rng, c, (c, hid), dtype))
            self.add_param(p + "b1", np.zeros(hid, dtype))
            self.add_param(p + "w2", uniform_init(rng, hid, (hid, c), dtype, gain=np.sqrt(0.5)))
            self.add_param(p + "b2", np.zeros(c, dtype))
        self.add_param("lnf_g", np.ones(c, dtype))
        self.add_param("lnf_b", np.zeros(c, dtype))

    def _p(self, name: str) -> Tensor:
        return self._params[name]

    def _block(self, i: int, x: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
        p = f"l{i}."
        h = T.layer_norm(x, self._p(p + "ln1_g"), self._p(p + "ln1_b"))
        q = linear(h, self._p(p + "wq"), self._p(p + "bq"))
        a, _ = attend(q, k, v, self.cfg.heads, mask)
        x = x + linear(a, self._p(p + "wo"), self._p(p + "bo"))
        h = T.layer_norm(x, self._p(p + "ln2_g"), self._p(p + "ln2_b"))
        h = T.gelu(linear(h, self._p(p + "w1"), self._p(p + "b1")))
        return x + linear(h, self._p(p + "w2"), self._p(p + "b2"))

    def _kv(self, i: int, x: Tensor) -> tuple[Tensor, Tensor]:
        p = f"l{i}."
        h = T.layer_norm(x, self._p(p + "ln1_g"), self._p(p + "ln1_b"))
        return linear(h, self._p(p + "wk"), self._p(p + "bk")), linear(h, self._p(p + "wv"), self._p(p + "bv"))

    def forward(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        ids = np.atleast_2d(ids)
        valid = np.atleast_2d(np.asarray(valid, dtype=bool))
        n, length = ids.shape
        if length > self.cfg.length:
            raise ValueError(f"sequence length {length} exceeds encoder capacity {self.cfg.length}")
        x = T.embedding(ids, self._p("tok_emb")) + self._p("pos_emb")[:length]

        if not self.cfg.mask_pad:
            for i in range(self.cfg.layers):
                k, v = self._kv(i, x)
                x = self._block(i, x, k, v, None)
            return T.layer_norm(x, self._p("lnf_g"), self._p("lnf_b"))

        lengths = _prefix_lengths(valid)
        n_eff = int(lengths.max(initial=0))
        if n_eff == 0:
            # no token anywhere to attend to: attention rows are empty and contribute zero
            key_mask = np.zeros((n, 1, 1, length), dtype=bool)
            for i in range(self.cfg.layers):
                k, v = self._kv(i, x)
                x = self._block(i, x, k, v, key_mask)
            return T.layer_norm(x, self._p("lnf_g"), self._p("lnf_b"))

        key_mask = valid[:, None, None, :n_eff]
        xv = x[:, :n_eff]
        xp = x[:, n_eff:] if n_eff < length else None
        for i in range(self.cfg.layers):
            k, v = self._kv(i, xv)
            new_v = self._block(i, xv, k, v, key_mask)
            if xp is not None:
                xp = self._block(i, xp, k, v, key_mask)
            xv = new_v
        out = xv if xp is None else T.concat([xv, xp], axis=1)
        return T.layer_norm(out, self._p("lnf_g"), self._p("lnf_b"))


def encode_text(seq: TokenSequence, encoder: TextEncoder) -> Tensor:
    """Encode one title into ``L`` of shape ``[T, C_L]``."""
    return encoder.forward(seq.ids[None], seq.valid[None])[0]


# ----------------------------------------------------------------------
# pretraining objectives


@dataclass
class PretrainBatch:
    ids: np.ndarray            # [N, T] corrupted ids
    valid: np.ndarray          # [N, T]
    mlm_mask: np.ndarray       # [N, T] True at masked positions
    mlm_targets: np.ndarray    # [N, T] original ids
    attr_query: np.ndarray     # [N] index into queries
    attr_gold: np.ndarray      # [N] index into a_set
    category: np.ndarray       # [N] index into c_set
    queries: tuple[str, ...]
    a_set: tuple[str, ...]
    c_set: tuple[str, ...]


def make_pretrain_batch(records: Sequence[Mapping], vocab: Vocab, length: int, rate: float,
                        rng: np.random.Generator, queries: Sequence[str], a_set: Sequence[str],
                        c_set: Sequence[str], replacement: str = "mask") -> PretrainBatch:
    """Build a batch from corpus records ``{"title", "attributes", "category"}``."""
    n = len(records)
    ids = np.zeros((n, length), dtype=np.int64)
    valid = np.zeros((n, length), dtype=bool)
    mlm_mask = np.zeros((n, length), dtype=bool)
    targets = np.zeros((n, length), dtype=np.int64)
    aq = np.zeros(n, dtype=np.int64)
    ag = np.zeros(n, dtype=np.int64)
    cat = np.zeros(n, dtype=np.int64)
    queries, a_set, c_set = tuple(queries), tuple(a_set), tuple(c_set)
    for i, rec in enumerate(records):
        seq = tokenize(rec["title"], vocab, length)
        m = wwm_mask(seq, rate, rng, replacement=replacement, vocab_size=len(vocab))
        ids[i], valid[i], targets[i] = m.ids, seq.valid, seq.ids
        mlm_mask[i, m.positions] = True
        present = [q for q in queries if q in rec["attributes"]]
        if not present:
            raise ValueError(f"record {i} has none of the attribute queries {queries}")
        q = present[int(rng.integers(len(present)))]
        value = rec["attributes"][q]
        if value not in a_set:
            raise ValueError(f"attribute value {value!r} not in the preset value set")
        if rec["category"] not in c_set:
            raise ValueError(f"category {rec['category']!r} not in the preset category set")
        aq[i], ag[i], cat[i] = queries.index(q), a_set.index(value), c_set.index(rec["category"])
    return PretrainBatch(ids, valid, mlm_mask, targets, aq, ag, cat, queries, a_set, c_set)


class TextPretrainer(Module):
    """Encoder plus the three prediction heads used in pretraining."""

    def __init__(self, encoder: TextEncoder, vocab_size: int, n_queries: int, n_values: int,
                 n_categories: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        dtype = T.resolve_dtype(dtype)
        c = encoder.cfg.dim
        self.encoder = self.add_child("encoder", encoder)
        self.add_param("mlm_w", uniform_init(rng, c, (c, vocab_size), dtype))
        self.add_param("mlm_b", np.zeros(vocab_size, dtype))
        self.add_param("query_emb", (rng.standard_normal((n_queries, c)) * 0.5).astype(dtype))
        self.add_param("avp_w", uniform_init(rng, 2 * c, (2 * c, n_values), dtype))
        self.add_param("avp_b", np.zeros(n_values, dtype))
        self.add_param("tcp_w", uniform_init(rng, c, (c, n_categories), dtype))
        self.add_param("tcp_b", np.zeros(n_categories, dtype))

    def _pooled(self, ids, valid) -> Tensor:
        L = self.encoder.forward(ids, valid)
        lengths = valid.sum(axis=1, keepdims=True)
        weights = np.where(lengths > 0, valid / np.maximum(lengths, 1), 0.0)
        w = Tensor(weights[:, None, :].astype(L.dtype))
        n, _, c = L.shape
        return T.matmul(w, L).reshape(n, c)

    def mlm_logits(self, ids, valid) -> Tensor:
        L = self.encoder.forward(ids, valid)
        return linear(L, self._params["mlm_w"], self._params["mlm_b"])

    def avp_logits(self, ids, valid, query) -> Tensor:
        pooled = self._pooled(ids, valid)
        q = T.embedding(query, self._params["query_emb"])
        return linear(T.concat([pooled, q], axis=-1), self._params["avp_w"], self._params["avp_b"])

    def tcp_logits(self, ids, valid) -> Tensor:
        return linear(self._pooled(ids, valid), self._params["tcp_w"], self._params["tcp_b"])


def mlm_loss(batch: PretrainBatch, model) -> Tensor:
    """Mean negative log-likelihood of the original tokens at masked positions."""
    rows, cols = np.nonzero(batch.mlm_mask)
    if rows.size == 0:
        raise ValueError("mlm_loss: batch has no masked positions")
    logits = model.mlm_logits(batch.ids, batch.valid)
    return T.cross_entropy(logits[rows, cols], batch.mlm_targets[rows, cols])


def avp_loss(batch: PretrainBatch, model) -> Tensor:
    """Mean NLL of the gold attribute value given the title and the attribute query."""
    if batch.attr_gold.size and (batch.attr_gold.min() < 0 or batch.attr_gold.max() >= len(batch.a_set)):
        raise ValueError("avp_loss: gold value outside the preset value set")
    return T.cross_entropy(model.avp_logits(batch.ids, batch.valid, batch.attr_query), batch.attr_gold)


def tcp_loss(batch: PretrainBatch, model) -> Tensor:
    if batch.category.size and (batch.category.min() < 0 or batch.category.max() >= len(batch.c_set)):
        raise ValueError("tcp_loss: gold category outside the preset category set")
    return T.cross_entropy(model.tcp_logits(batch.ids, batch.valid), batch.category)


def pretrain_loss(batch: PretrainBatch, model) -> Tensor:
    return mlm_loss(batch, model) + avp_loss(batch, model) + tcp_loss(batch, model)
