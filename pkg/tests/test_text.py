import numpy as np
import pytest

from textgraph import tensor as tg
from textgraph import text as tx
from textgraph.errors import ContractError, LoadError
from tests.test_tensor import assert_grads_match


def small_vocab():
    return tx.Vocab([f"tok{i}" for i in range(10)])


def test_vocab_ids_and_unk():
    v = small_vocab()
    assert v.size == 15
    assert v.id_of("tok0") == 5
    assert v.id_of("tok9") == 14
    assert v.id_of("missing") == tx.UNK_ID


def test_vocab_file_round_trip(tmp_path):
    v = tx.Vocab.from_texts(["red red blue", "red green"], min_count=1)
    assert v.tokens[0] == "red"  # most frequent first
    path = tmp_path / "vocab.txt"
    v.save(path)
    # id = 5 + line index, by construction of the file
    lines = path.read_text().splitlines()
    v2 = tx.Vocab.load(path)
    for i, tok in enumerate(lines):
        assert v2.id_of(tok) == 5 + i
    assert v2.tokens == v.tokens


def test_vocab_load_rejects_blank_and_duplicates(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("a\n\nb\n")
    with pytest.raises(LoadError, match="blank"):
        tx.Vocab.load(p)
    p.write_text("a\na\n")
    with pytest.raises(LoadError, match="duplicate"):
        tx.Vocab.load(p)


def test_tokenize_cls_padding_truncation():
    v = small_vocab()
    ids = tx.tokenize(v, "TOK0 tok1 missing", max_len=6)
    np.testing.assert_array_equal(ids, [tx.CLS_ID, 5, 6, tx.UNK_ID, tx.PAD_ID, tx.PAD_ID])
    trunc = tx.tokenize(v, " ".join(["tok0"] * 50), max_len=4)
    np.testing.assert_array_equal(trunc, [tx.CLS_ID, 5, 5, 5])
    empty = tx.tokenize(v, "", max_len=3)
    np.testing.assert_array_equal(empty, [tx.CLS_ID, tx.PAD_ID, tx.PAD_ID])


def test_encoder_shape_and_determinism():
    v = small_vocab()
    m1 = tx.TextEncoderModel(v.size, dim=16, num_heads=2, num_blocks=2, max_len=8, rng=3)
    m2 = tx.TextEncoderModel(v.size, dim=16, num_heads=2, num_blocks=2, max_len=8, rng=3)
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    batch = tx.tokenize_batch(v, ["tok0 tok1", "tok2"], max_len=8)
    out = tx.encode_cls(m1, batch)
    assert out.shape == (2, 16)


def test_encoder_padding_invariance():
    v = small_vocab()
    m = tx.TextEncoderModel(v.size, dim=16, num_heads=2, num_blocks=2, max_len=12, rng=0)
    short = tx.tokenize_batch(v, ["tok0 tok1 tok2"], max_len=5)
    # same text in a batch whose other row forces a much wider pad width
    wide = tx.tokenize_batch(v, ["tok0 tok1 tok2", " ".join(["tok3"] * 11)], max_len=12)
    a = tx.encode_cls(m, short).data[0]
    b = tx.encode_cls(m, wide).data[0]
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_encoder_distinguishes_texts():
    v = small_vocab()
    m = tx.TextEncoderModel(v.size, dim=16, num_heads=2, num_blocks=1, max_len=8, rng=1)
    batch = tx.tokenize_batch(v, ["tok0 tok1", "tok5 tok6"], max_len=8)
    out = tx.encode_cls(m, batch).data
    assert np.abs(out[0] - out[1]).max() > 1e-3


def test_sequence_length_contract():
    v = small_vocab()
    m = tx.TextEncoderModel(v.size, dim=8, num_heads=2, num_blocks=1, max_len=4, rng=0)
    too_long = np.full((1, 9), tx.UNK_ID, dtype=np.int64)
    with pytest.raises(ContractError, match="max_len"):
        tx.encode_cls(m, too_long)
    with pytest.raises(ContractError, match="divisible"):
        tx.TextEncoderModel(v.size, dim=9, num_heads=2)


def test_encoder_gradients_match_finite_differences():
    v = tx.Vocab([f"t{i}" for i in range(6)])
    m = tx.TextEncoderModel(v.size, dim=8, num_heads=2, num_blocks=1, max_len=5, rng=7)
    batch = tx.tokenize_batch(v, ["t0 t1 t2", "t3 t4"], max_len=5)
    proj = np.random.default_rng(0).normal(size=(2, 8))

    def build():
        out = tx.encode_cls(m, batch)
        return tg.tensor_sum(tg.mul(out, tg.Tensor(proj)))

    checked = {k: m.params[k] for k in
               ("tok_emb", "pos_emb", "blk0_wq", "blk0_bk", "blk0_wv", "blk0_wo",
                "blk0_ln1_gain", "blk0_ln2_bias", "blk0_ff_w1", "blk0_ff_b2")}
    assert_grads_match(build, checked, rtol=5e-3, atol=1e-6)


def test_mlm_masks_only_content_and_counts():
    v = small_vocab()
    m = tx.TextEncoderModel(v.size, dim=16, num_heads=2, num_blocks=1, max_len=8, rng=0)
    batch = tx.tokenize_batch(v, ["tok0 tok1 tok2 tok3", "tok4"], max_len=8)
    loss, count = tx.mlm_pretrain_step(m, batch, mask_prob=1.0, rng=0)
    assert count == 5  # every content token, never CLS or PAD
    assert loss.item() > 0.0
    zero_loss, zero_count = tx.mlm_pretrain_step(m, batch, mask_prob=0.0, rng=0)
    assert zero_count == 0 and zero_loss.item() == 0.0
    with pytest.raises(ContractError):
        tx.mlm_pretrain_step(m, batch, mask_prob=1.5)


def test_mlm_training_reduces_loss():
    v = small_vocab()
    m = tx.TextEncoderModel(v.size, dim=16, num_heads=2, num_blocks=1, max_len=8, rng=2)
    batch = tx.tokenize_batch(v, ["tok0 tok1 tok2", "tok3 tok4 tok5"], max_len=8)
    opt = tg.Adam(m.params, learning_rate=1e-2)
    losses = []
    for step in range(40):
        with tg.Tape() as tape:
            loss, count = tx.mlm_pretrain_step(m, batch, mask_prob=0.4,
                                               rng=np.random.default_rng(step))
        if count == 0:
            continue
        tg.backward(loss, tape)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    assert np.mean(losses[-5:]) < np.mean(losses[:5]) * 0.7
