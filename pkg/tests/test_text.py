import numpy as np
import pytest
from hypothesis import given, strategies as st

from mqnet import tensor as T
from mqnet.data import ATTRIBUTE_QUERIES, attribute_values, categories, lexicon_words
from mqnet.text import (MASK, PAD, TextConfig, TextEncoder, TextPretrainer, Vocab, avp_loss, encode_text,
                        make_pretrain_batch, mlm_loss, pretrain_loss, tcp_loss, tokenize, wwm_mask)

TITLES = ["红色圆盘 正品 小号 AB12", "蓝色方块 包邮 大号 X7", "绿色三角 新款 中号 K3"]


@pytest.fixture
def vocab():
    return Vocab.build(TITLES, lexicon_words())


def test_segment_words_and_ascii_runs(vocab):
    assert vocab.segment("红色圆盘 正品 小号 AB12") == ["红色", "圆盘", "正品", "小号", "AB12"]


def test_tokenize_spans_and_padding(vocab):
    seq = tokenize("红色圆盘 AB12", vocab, 10)
    assert seq.n_valid == 8
    assert seq.spans == [(0, 2), (2, 4), (4, 8)]
    assert list(seq.ids[8:]) == [PAD, PAD]
    assert [vocab.tokens[i] for i in seq.ids[:2]] == ["红", "色"]


def test_tokenize_truncates(vocab):
    seq = tokenize(TITLES[0], vocab, 3)
    assert seq.n_valid == 3 and seq.spans[-1] == (2, 3)


def test_empty_title_is_all_pad(vocab):
    seq = tokenize("", vocab, 5)
    assert seq.n_valid == 0 and (seq.ids == PAD).all()


def test_unknown_char_maps_to_unk(vocab):
    assert tokenize("猫", vocab, 2).ids[0] == vocab.id("猫") == 2


def test_vocab_save_load_roundtrip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt", tmp_path / "w.tsv")
    back = Vocab.load(tmp_path / "v.txt", tmp_path / "w.tsv")
    assert back.tokens == vocab.tokens and back.words == vocab.words


@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
def test_property_wwm_masks_whole_words(seed, rate):
    vocab = Vocab.build(TITLES, lexicon_words())
    seq = tokenize(TITLES[0], vocab, 12)
    m = wwm_mask(seq, rate, np.random.default_rng(seed))
    chosen = set(m.positions.tolist())
    assert chosen, "at least one word must be masked"
    for s, e in seq.spans:
        inside = {p for p in range(s, e)}
        assert inside <= chosen or not (inside & chosen)
    assert (m.ids[m.positions] == MASK).all()
    np.testing.assert_array_equal(m.originals, seq.ids[m.positions])
    assert len(chosen) >= min(seq.n_valid, int(np.ceil(rate * seq.n_valid)))


def test_wwm_empty_sequence(vocab):
    m = wwm_mask(tokenize("", vocab, 4), 0.15, np.random.default_rng(0))
    assert m.positions.size == 0


def test_wwm_rejects_bad_rate(vocab):
    with pytest.raises(ValueError):
        wwm_mask(tokenize(TITLES[0], vocab, 8), 0.0, np.random.default_rng(0))


def _encoder(vocab, length=12, mask_pad=True, seed=0):
    return TextEncoder(TextConfig(length=length, dim=8, layers=2, heads=2, mask_pad=mask_pad), len(vocab),
                       np.random.default_rng(seed))


def test_encoder_pad_tail_invariance(vocab):
    enc = _encoder(vocab, 16)
    short = tokenize(TITLES[1], vocab, 12)
    long = short.padded_to(16)
    a, b = encode_text(short, enc).data, encode_text(long, enc).data
    n = short.n_valid
    np.testing.assert_array_equal(a[:n], b[:n])


def test_encoder_pad_content_invariance(vocab):
    enc = _encoder(vocab)
    seq = tokenize(TITLES[1], vocab, 12)
    ids2 = seq.ids.copy()
    ids2[~seq.valid] = 5
    a = enc.forward(seq.ids[None], seq.valid[None]).data
    b = enc.forward(ids2[None], seq.valid[None]).data
    np.testing.assert_array_equal(a[0, :seq.n_valid], b[0, :seq.n_valid])


def test_encoder_rejects_non_prefix_mask_and_overlong(vocab):
    enc = _encoder(vocab, 4)
    with pytest.raises(ValueError):
        enc.forward(np.array([[3, 0, 4, 0]]), np.array([[1, 0, 1, 0]], bool))
    with pytest.raises(ValueError):
        enc.forward(np.zeros((1, 5), int), np.zeros((1, 5), bool))


def test_encoder_gradcheck(vocab):
    enc = _encoder(vocab, 6, seed=1)
    seq = tokenize(TITLES[2], vocab, 6)
    r = np.random.default_rng(0).standard_normal((1, 6, 8))
    params = dict(enc.named_parameters())
    inputs = {k: params[k] for k in ("tok_emb", "l0.wq", "l1.w1")}
    errs = T.grad_check_inputs(lambda: T.tsum(enc.forward(seq.ids[None], seq.valid[None]) * T.Tensor(r)),
                               inputs, max_coords=10)
    assert max(errs.values()) < 1e-6


def _records():
    recs = []
    for t in TITLES:
        words = Vocab.build([], lexicon_words()).segment(t)
        recs.append({"title": t, "attributes": {"color": words[0], "shape": words[1], "size": words[3]},
                     "category": {"圆盘": "disc", "方块": "square", "三角": "triangle"}[words[1]]})
    return recs


def _batch(vocab, seed=0):
    return make_pretrain_batch(_records(), vocab, 12, 0.15, np.random.default_rng(seed), ATTRIBUTE_QUERIES,
                               attribute_values(), categories())


def test_uniform_pretrainer_losses_equal_log_support(vocab):
    enc = _encoder(vocab)
    heads = TextPretrainer(enc, len(vocab), 3, len(attribute_values()), len(categories()),
                           np.random.default_rng(0))
    for name in ("mlm_w", "mlm_b", "avp_w", "avp_b", "tcp_w", "tcp_b"):
        heads._params[name].data[...] = 0.0
    batch = _batch(vocab)
    assert abs(mlm_loss(batch, heads).item() - np.log(len(vocab))) < 1e-10
    assert abs(avp_loss(batch, heads).item() - np.log(len(attribute_values()))) < 1e-10
    assert abs(tcp_loss(batch, heads).item() - np.log(len(categories()))) < 1e-10


def test_pretrain_batch_fields(vocab):
    b = _batch(vocab)
    assert b.mlm_mask.any(axis=1).all()
    assert (b.ids[b.mlm_mask] == MASK).all()
    for i, rec in enumerate(_records()):
        q = b.queries[b.attr_query[i]]
        assert b.a_set[b.attr_gold[i]] == rec["attributes"][q]
        assert b.c_set[b.category[i]] == rec["category"]


def test_pretrain_rejects_unknown_attribute(vocab):
    recs = _records()
    recs[0]["attributes"] = {"color": "金色"}
    with pytest.raises(ValueError):
        make_pretrain_batch(recs, vocab, 12, 0.15, np.random.default_rng(0), ATTRIBUTE_QUERIES,
                            attribute_values(), categories())


def test_pretraining_reduces_loss(vocab):
    from mqnet.optim import AdamW
    enc = _encoder(vocab)
    heads = TextPretrainer(enc, len(vocab), 3, len(attribute_values()), len(categories()),
                           np.random.default_rng(0))
    opt = AdamW(heads.named_parameters(), lr=3e-3)
    first = last = None
    for step in range(40):
        batch = _batch(vocab, seed=step)
        heads.zero_grad()
        loss = pretrain_loss(batch, heads)
        loss.backward()
        opt.step()
        first = loss.item() if first is None else first
        last = loss.item()
    assert last < 0.6 * first
