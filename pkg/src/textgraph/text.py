"""Text side: vocabulary, tokenizer, and a small transformer encoder.

Ids 0..4 are reserved specials ([CLS], [SEP], [PAD], [MASK], [UNK]); content
tokens start at 5, and the vocab file stores one content token per line so
id = 5 + line index.  Sequences are [CLS] + tokens, truncated to max_len and
right-padded with [PAD].  The encoder is post-LN with padding-masked
attention; a node's embedding is the [CLS] row of the final layer.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import numpy as np

from . import tensor as tg
from .errors import ContractError, LoadError
from .tensor import Tensor

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]")
CLS_ID, SEP_ID, PAD_ID, MASK_ID, UNK_ID = range(5)
NUM_SPECIALS = len(SPECIAL_TOKENS)


class Vocab:
    """Content tokens with dense ids starting after the specials."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self._index = {t: NUM_SPECIALS + i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ContractError("duplicate tokens in vocabulary")
        for t in self.tokens:
            if not t or any(c.isspace() for c in t):
                raise ContractError(f"bad vocabulary token {t!r}")

    @property
    def size(self) -> int:
        return NUM_SPECIALS + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    @classmethod
    def from_texts(cls, texts, min_count: int = 1) -> "Vocab":
        counts = Counter()
        for text in texts:
            counts.update(text.lower().split())
        kept = [t for t, c in counts.items() if c >= min_count]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        p = Path(path)
        if not p.exists():
            raise LoadError(f"{p}: not found")
        tokens = []
        for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            tok = line.strip()
            if not tok:
                raise LoadError(f"{p}:{lineno}: blank vocabulary line")
            tokens.append(tok)
        try:
            return cls(tokens)
        except ContractError as e:
            raise LoadError(f"{p}: {e}") from None


def tokenize(vocab: Vocab, text: str, max_len: int) -> np.ndarray:
    """[CLS] + lowercased whitespace tokens (UNK for OOV), truncated to
    max_len, right-padded with [PAD]."""
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    ids = [CLS_ID]
    for tok in text.lower().split():
        if len(ids) == max_len:
            break
        ids.append(vocab.id_of(tok))
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return np.array(ids, dtype=np.int64)


def tokenize_batch(vocab: Vocab, texts, max_len: int) -> np.ndarray:
    return np.stack([tokenize(vocab, t, max_len) for t in texts])


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(size=(fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


class TextEncoderModel:
    """Token + learned position embeddings, num_blocks post-LN transformer
    blocks (multi-head attention then a relu MLP), plus an MLM output head."""

    def __init__(self, vocab_size: int, dim: int = 64, num_heads: int = 4,
                 num_blocks: int = 2, max_len: int = 32, rng=0):
        if dim % num_heads != 0:
            raise ContractError(f"dim {dim} not divisible by num_heads {num_heads}")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.vocab_size = vocab_size
        self.dim = dim
        self.num_heads = num_heads
        self.num_blocks = num_blocks
        self.max_len = max_len
        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(rng.normal(size=(vocab_size, dim)) * 0.02, grad_enabled=True)
        p["pos_emb"] = Tensor(rng.normal(size=(max_len, dim)) * 0.02, grad_enabled=True)
        for i in range(num_blocks):
            for name in ("wq", "wk", "wv", "wo"):
                p[f"blk{i}_{name}"] = Tensor(_glorot(rng, dim, dim), grad_enabled=True)
            for name in ("bq", "bk", "bv", "bo"):
                p[f"blk{i}_{name}"] = Tensor(np.zeros(dim), grad_enabled=True)
            p[f"blk{i}_ff_w1"] = Tensor(_glorot(rng, dim, 4 * dim), grad_enabled=True)
            p[f"blk{i}_ff_b1"] = Tensor(np.zeros(4 * dim), grad_enabled=True)
            p[f"blk{i}_ff_w2"] = Tensor(_glorot(rng, 4 * dim, dim), grad_enabled=True)
            p[f"blk{i}_ff_b2"] = Tensor(np.zeros(dim), grad_enabled=True)
            for ln in ("ln1", "ln2"):
                p[f"blk{i}_{ln}_gain"] = Tensor(np.ones(dim), grad_enabled=True)
                p[f"blk{i}_{ln}_bias"] = Tensor(np.zeros(dim), grad_enabled=True)
        p["mlm_w"] = Tensor(_glorot(rng, dim, vocab_size), grad_enabled=True)
        p["mlm_b"] = Tensor(np.zeros(vocab_size), grad_enabled=True)
        self.params = p


def _crop_padding(ids: np.ndarray) -> np.ndarray:
    """Drop all-pad trailing columns (column 0 is always [CLS])."""
    non_pad = ids != PAD_ID
    width = int(non_pad.any(axis=0).nonzero()[0][-1]) + 1
    return ids[:, :width]


def _forward_hidden(model: TextEncoderModel, ids: np.ndarray) -> Tensor:
    """All-position hidden states, flattened to (B*T, dim)."""
    if ids.ndim != 2:
        raise ContractError(f"token batch must be 2-D, got shape {ids.shape}")
    b, t = ids.shape
    if t > model.max_len:
        raise ContractError(f"sequence length {t} exceeds max_len {model.max_len}")
    p = model.params
    f = model.dim
    h = model.num_heads
    dh = f // h

    x = tg.take_rows(p["tok_emb"], ids.ravel())
    pos = tg.take_rows(p["pos_emb"], np.tile(np.arange(t), b))
    hid = tg.add(x, pos)

    # additive attention mask: 0 on real keys, -1e30 on padding
    mask = Tensor(np.where(ids == PAD_ID, -1e30, 0.0)[:, None, None, :])
    scale = 1.0 / np.sqrt(dh)
    for i in range(model.num_blocks):
        def heads(name):
            lin = tg.add(tg.matmul(hid, p[f"blk{i}_w{name}"]), p[f"blk{i}_b{name}"])
            return tg.transpose(tg.reshape(lin, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = tg.mul(tg.matmul(q, tg.transpose(k, (0, 1, 3, 2))), Tensor(scale))
        att = tg.softmax(tg.add(scores, mask), axis=-1)
        ctx = tg.transpose(tg.matmul(att, v), (0, 2, 1, 3))
        ctx = tg.reshape(ctx, (b * t, f))
        out = tg.add(tg.matmul(ctx, p[f"blk{i}_wo"]), p[f"blk{i}_bo"])
        hid = tg.layer_norm(tg.add(hid, out),
                            p[f"blk{i}_ln1_gain"], p[f"blk{i}_ln1_bias"])
        ff = tg.relu(tg.add(tg.matmul(hid, p[f"blk{i}_ff_w1"]), p[f"blk{i}_ff_b1"]))
        ff = tg.add(tg.matmul(ff, p[f"blk{i}_ff_w2"]), p[f"blk{i}_ff_b2"])
        hid = tg.layer_norm(tg.add(hid, ff),
                            p[f"blk{i}_ln2_gain"], p[f"blk{i}_ln2_bias"])
    return hid


def encode_cls(model: TextEncoderModel, token_batch: np.ndarray) -> Tensor:
    """(B, dim) [CLS] embeddings.  Rows are independent: padding columns are
    masked to exactly zero attention, so extra padding never changes a row."""
    ids = _crop_padding(np.asarray(token_batch, dtype=np.int64))
    b, t = ids.shape
    hid = _forward_hidden(model, ids)
    return tg.take_rows(hid, np.arange(b) * t)


def mlm_pretrain_step(model: TextEncoderModel, token_batch: np.ndarray,
                      mask_prob: float, rng=0):
    """Masked-token loss for one step: each content token is replaced by
    [MASK] with mask_prob, and the loss is mean cross-entropy of the original
    ids at masked positions only.  Returns (loss, masked_count); a draw that
    masks nothing yields a constant zero loss with count 0.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ContractError(f"mask_prob must lie in [0, 1], got {mask_prob}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ids = _crop_padding(np.asarray(token_batch, dtype=np.int64))
    b, t = ids.shape
    maskable = ids >= NUM_SPECIALS
    chosen = maskable & (rng.random(ids.shape) < mask_prob)
    count = int(chosen.sum())
    if count == 0:
        return Tensor(0.0), 0
    corrupted = ids.copy()
    corrupted[chosen] = MASK_ID
    hid = _forward_hidden(model, corrupted)
    rows = np.nonzero(chosen.ravel())[0]
    logits = tg.add(tg.matmul(tg.take_rows(hid, rows), model.params["mlm_w"]),
                    model.params["mlm_b"])
    return tg.softmax_cross_entropy(logits, ids.ravel()[rows]), count
