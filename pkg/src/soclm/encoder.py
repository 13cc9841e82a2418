"""Small BERT-style encoder with explicit forward and backward passes.

Everything runs in float64 so the backward pass can be checked against
central differences. Layers are post-LN residual blocks; attention ignores
padded key positions.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import _binio

CKPT_MAGIC = b"SOCLM-CKPT1"

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIALS)

_GELU_C = np.sqrt(2.0 / np.pi)


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


def is_special(ids) -> np.ndarray:
    """Structural tokens; [UNK] stands in for a real word and is not special."""
    ids = np.asarray(ids)
    return (ids < N_SPECIAL) & (ids != UNK_ID)


class TokenSequence(NamedTuple):
    ids: np.ndarray

    @property
    def attention_mask(self) -> np.ndarray:
        return np.ones(self.ids.shape, bool)

    @property
    def special(self) -> np.ndarray:
        return is_special(self.ids)

    def __len__(self):
        return int(self.ids.shape[0])


class Tokenizer:
    """Lower-cased whitespace tokenizer over a fixed vocabulary.

    Ids 0-4 are reserved for ``[PAD] [UNK] [CLS] [SEP] [MASK]``.
    """

    def __init__(self, tokens: Iterable[str], max_len: int = 32):
        vocab = list(SPECIALS)
        seen = set(vocab)
        for tok in tokens:
            if tok not in seen:
                vocab.append(tok)
                seen.add(tok)
        if max_len < 2:
            raise ValueError("max_len must leave room for [CLS] and [SEP]")
        self.vocab = vocab
        self.token_to_id = {t: i for i, t in enumerate(vocab)}
        self.max_len = max_len

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None, max_len: int = 32):
        """Vocabulary from corpus frequency (ties broken lexically)."""
        counts = Counter(tok for text in texts for tok in text.lower().split())
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        ranked = [t for t in ranked if t not in SPECIALS]
        if max_size is not None:
            ranked = ranked[:max(0, max_size - N_SPECIAL)]
        return cls(ranked, max_len)

    def __len__(self):
        return len(self.vocab)

    def tokenize(self, text: str) -> TokenSequence:
        words = text.lower().split()[: self.max_len - 2]
        ids = [CLS_ID] + [self.token_to_id.get(w, UNK_ID) for w in words] + [SEP_ID]
        return TokenSequence(np.array(ids, dtype=np.int64))

    def decode(self, seq) -> list[str]:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        return [self.vocab[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(t + "\n" for t in self.vocab))

    @classmethod
    def load(cls, path, max_len: int = 32) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            vocab = fh.read().split("\n")
        if vocab and vocab[-1] == "":
            vocab.pop()
        if tuple(vocab[:N_SPECIAL]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(vocab[N_SPECIAL:], max_len)


@dataclass
class Batch:
    ids: np.ndarray  # (B, T) int64
    mask: np.ndarray  # (B, T) bool, True on real tokens

    @property
    def special(self) -> np.ndarray:
        return is_special(self.ids)

    @property
    def shape(self):
        return self.ids.shape


def collate(seqs, pad_to: int | None = None) -> Batch:
    T = max(len(s) for s in seqs)
    if pad_to is not None:
        if pad_to < T:
            raise ValueError("pad_to is shorter than the longest sequence")
        T = pad_to
    ids = np.full((len(seqs), T), PAD_ID, np.int64)
    mask = np.zeros((len(seqs), T), bool)
    for i, s in enumerate(seqs):
        a = s.ids if isinstance(s, TokenSequence) else np.asarray(s)
        ids[i, :len(a)] = a
        mask[i, :len(a)] = True
    return Batch(ids, mask)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    proj_dims: tuple[int, ...] = (64, 64)
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        self.proj_dims = tuple(self.proj_dims)
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.proj_dims) != 2 or min(self.proj_dims) < 1:
            raise ValueError("proj_dims must hold two positive widths")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proj_dims"] = list(self.proj_dims)
        return d


LAYER_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
              "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")
HEAD_KEYS = ("mlm_bias", "proj_w1", "proj_b1", "proj_w2", "proj_b2")


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, F, s = cfg.d_model, cfg.d_ff, cfg.init_std
    p = {
        "tok_emb": rng.normal(0, s, (cfg.vocab_size, D)),
        "pos_emb": rng.normal(0, s, (cfg.max_len, D)),
        "emb_ln_g": np.ones(D),
        "emb_ln_b": np.zeros(D),
    }
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + w] = rng.normal(0, s, (D, D))
            p[pre + "b" + w[1]] = np.zeros(D)
        p[pre + "ln1_g"], p[pre + "ln1_b"] = np.ones(D), np.zeros(D)
        p[pre + "w1"], p[pre + "b1"] = rng.normal(0, s, (D, F)), np.zeros(F)
        p[pre + "w2"], p[pre + "b2"] = rng.normal(0, s, (F, D)), np.zeros(D)
        p[pre + "ln2_g"], p[pre + "ln2_b"] = np.ones(D), np.zeros(D)
    h1, h2 = cfg.proj_dims
    p["mlm_bias"] = np.zeros(cfg.vocab_size)
    p["proj_w1"] = rng.normal(0, 1.0 / np.sqrt(D), (D, h1))
    p["proj_b1"] = np.zeros(h1)
    p["proj_w2"] = rng.normal(0, 1.0 / np.sqrt(h1), (h1, h2))
    p["proj_b2"] = np.zeros(h2)
    return p


def zeros_like_params(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def save_checkpoint(params, cfg: EncoderConfig, path, extra: dict | None = None) -> None:
    header = {"config": cfg.to_dict(), **(extra or {})}
    _binio.dump(path, CKPT_MAGIC, header, params, cast="f4")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], EncoderConfig, dict]:
    header, tensors = _binio.load(path, CKPT_MAGIC)
    cfg = EncoderConfig.from_dict(header.pop("config"))
    return {k: v.astype(np.float64) for k, v in tensors.items()}, cfg, header


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _ln_fwd(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, cache, g):
    xhat, rstd = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(red)
    db = dy.sum(red)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _linear_bwd(x, w, dy):
    """Gradients of y = x @ w + b for x of any leading shape."""
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    return (dy @ w.T), x2.T @ d2, d2.sum(0)


def _split(x, H):
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


class EncoderOutput(NamedTuple):
    hidden: np.ndarray  # (B, T, D)
    cls: np.ndarray  # (B, D)
    cache: dict | None


def encoder_forward(params, cfg: EncoderConfig, batch: Batch, keep_cache: bool = True
                    ) -> EncoderOutput:
    ids, mask = batch.ids, batch.mask
    B, T = ids.shape
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range for the vocabulary")
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    H, eps = cfg.n_heads, cfg.ln_eps
    dh = cfg.d_model // H
    scale = 1.0 / np.sqrt(dh)
    key_ok = mask[:, None, None, :]

    e = params["tok_emb"][ids] + params["pos_emb"][:T]
    x, ln0 = _ln_fwd(e, params["emb_ln_g"], params["emb_ln_b"], eps)
    layers = []
    for i in range(cfg.n_layers):
        p = lambda k: params[f"layer{i}.{k}"]  # noqa: E731
        q = _split(x @ p("wq") + p("bq"), H)
        k = _split(x @ p("wk") + p("bk"), H)
        v = _split(x @ p("wv") + p("bv"), H)
        scores = np.where(key_ok, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        A = softmax(scores)
        ctx = _merge(A @ v)
        a = ctx @ p("wo") + p("bo")
        h1, ln1 = _ln_fwd(x + a, p("ln1_g"), p("ln1_b"), eps)
        pre = h1 @ p("w1") + p("b1")
        act = gelu(pre)
        f = act @ p("w2") + p("b2")
        h2, ln2 = _ln_fwd(h1 + f, p("ln2_g"), p("ln2_b"), eps)
        if keep_cache:
            layers.append(dict(x=x, q=q, k=k, v=v, A=A, ctx=ctx, ln1=ln1, h1=h1,
                               pre=pre, act=act, ln2=ln2))
        x = h2
    cache = dict(ids=ids, mask=mask, ln0=ln0, layers=layers) if keep_cache else None
    return EncoderOutput(x, x[:, 0], cache)


def encoder_backward(params, cfg: EncoderConfig, cache, d_hidden, d_cls=None):
    """Parameter gradients given upstream gradients on hidden states (and CLS).

    Returns a dict with an entry for every parameter; head parameters get
    zeros here and are filled in by the losses that use them.
    """
    if not cache or not cache.get("layers") and cfg.n_layers:
        raise ValueError("encoder_backward needs the cache from encoder_forward(keep_cache=True)")
    grads = zeros_like_params(params)
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = 1.0 / np.sqrt(dh)
    dx = np.array(d_hidden, dtype=np.float64, copy=True)
    if d_cls is not None:
        dx[:, 0] += d_cls
    for i in reversed(range(cfg.n_layers)):
        c = cache["layers"][i]
        pre_ = f"layer{i}."
        p = lambda k: params[pre_ + k]  # noqa: E731
        dr2, grads[pre_ + "ln2_g"], grads[pre_ + "ln2_b"] = _ln_bwd(dx, c["ln2"], p("ln2_g"))
        dact, grads[pre_ + "w2"], grads[pre_ + "b2"] = _linear_bwd(c["act"], p("w2"), dr2)
        dpre = dact * gelu_grad(c["pre"])
        dh1_f, grads[pre_ + "w1"], grads[pre_ + "b1"] = _linear_bwd(c["h1"], p("w1"), dpre)
        dh1 = dr2 + dh1_f
        dr1, grads[pre_ + "ln1_g"], grads[pre_ + "ln1_b"] = _ln_bwd(dh1, c["ln1"], p("ln1_g"))
        dctx, grads[pre_ + "wo"], grads[pre_ + "bo"] = _linear_bwd(c["ctx"], p("wo"), dr1)
        dctx = _split(dctx, H)
        A, q, k, v = c["A"], c["q"], c["k"], c["v"]
        dA = dctx @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dctx
        dS = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dq = dS @ k
        dk = dS.transpose(0, 1, 3, 2) @ q
        xin = c["x"]
        dxq, grads[pre_ + "wq"], grads[pre_ + "bq"] = _linear_bwd(xin, p("wq"), _merge(dq))
        dxk, grads[pre_ + "wk"], grads[pre_ + "bk"] = _linear_bwd(xin, p("wk"), _merge(dk))
        dxv, grads[pre_ + "wv"], grads[pre_ + "bv"] = _linear_bwd(xin, p("wv"), _merge(dv))
        dx = dr1 + dxq + dxk + dxv
    de, grads["emb_ln_g"], grads["emb_ln_b"] = _ln_bwd(dx, cache["ln0"], params["emb_ln_g"])
    ids = cache["ids"]
    T = ids.shape[1]
    np.add.at(grads["tok_emb"], ids.reshape(-1), de.reshape(-1, de.shape[-1]))
    grads["pos_emb"][:T] += de.sum(0)
    return grads


# ---------------------------------------------------------------------------
# Heads and pooling
# ---------------------------------------------------------------------------


def project(params, cls_state, keep_cache: bool = False):
    """Two-layer projection head (GELU between layers)."""
    pre = cls_state @ params["proj_w1"] + params["proj_b1"]
    act = gelu(pre)
    z = act @ params["proj_w2"] + params["proj_b2"]
    if keep_cache:
        return z, (cls_state, pre, act)
    return z


def project_backward(params, cache, dz):
    e, pre, act = cache
    g = {}
    dact, g["proj_w2"], g["proj_b2"] = _linear_bwd(act, params["proj_w2"], dz)
    dpre = dact * gelu_grad(pre)
    de, g["proj_w1"], g["proj_b1"] = _linear_bwd(e, params["proj_w1"], dpre)
    return de, g


def pool(hidden, batch: Batch, mode: str = "cls") -> np.ndarray:
    """``cls``, ``mean`` (non-special, non-padding tokens) or ``combined`` (both)."""
    if mode == "cls":
        return hidden[:, 0].copy()
    w = (batch.mask & ~batch.special).astype(np.float64)
    cnt = w.sum(1, keepdims=True)
    mean = np.einsum("bt,btd->bd", w, hidden) / np.maximum(cnt, 1.0)
    if mode == "mean":
        return mean
    if mode == "combined":
        return np.concatenate([hidden[:, 0], mean], axis=1)
    raise ValueError(f"unknown pooling {mode!r}")


def combined_embedding(params, cfg: EncoderConfig, seq: TokenSequence) -> np.ndarray:
    """CLS state concatenated with the mean of non-special token states.

    A sequence without ordinary tokens gets a zero mean part.
    """
    batch = collate([seq])
    out = encoder_forward(params, cfg, batch, keep_cache=False)
    return pool(out.hidden, batch, "combined")[0]
