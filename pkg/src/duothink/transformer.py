"""Decoder-only causal transformer used for both the Reasoner and the Generator.

Pre-layernorm blocks, learned absolute positions, GELU MLP. Exposes the
top-layer hidden state (post final layernorm, before unembedding) and a
forward path that consumes externally built input embeddings, so latent
vectors can be fused in before positions are added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

F32 = np.float32


class VocabularyError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


_FORWARD_COUNT = 0


def forward_count() -> int:
    """Number of full-sequence forward passes since the last reset."""
    return _FORWARD_COUNT


def reset_forward_count() -> None:
    global _FORWARD_COUNT
    _FORWARD_COUNT = 0


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_len: int
    tie_unembed: bool = False

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("n_layers and n_heads must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 1 or self.max_len < 1 or self.d_ff < 1:
            raise ValueError("vocab_size, max_len, d_ff must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_model": self.d_model, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "max_len": self.max_len,
            "tie_unembed": self.tie_unembed,
        }


INIT_STD = 0.02


class TransformerParams:
    """Config plus named parameter store for one causal transformer."""

    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=F32) -> "TransformerParams":
        d, dff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        s = ParamStore()

        def w(name, shape):
            s.add(name, rng.normal(0.0, INIT_STD, shape).astype(dtype))

        def ones(name, shape):
            s.add(name, np.ones(shape, dtype))

        def zeros(name, shape):
            s.add(name, np.zeros(shape, dtype))

        w("emb", (v, d))
        w("pos", (cfg.max_len, d))
        for l in range(cfg.n_layers):
            p = f"layers.{l}."
            ones(p + "ln1.w", d); zeros(p + "ln1.b", d)
            w(p + "attn.wqkv", (d, 3 * d)); zeros(p + "attn.bqkv", 3 * d)
            w(p + "attn.wo", (d, d)); zeros(p + "attn.bo", d)
            ones(p + "ln2.w", d); zeros(p + "ln2.b", d)
            w(p + "mlp.wfc", (d, dff)); zeros(p + "mlp.bfc", dff)
            w(p + "mlp.wproj", (dff, d)); zeros(p + "mlp.bproj", d)
        ones("lnf.w", d); zeros("lnf.b", d)
        if not cfg.tie_unembed:
            w("unemb", (d, v))
        return cls(cfg, s)

    @property
    def dtype(self):
        return self.store["emb"].dtype

    def num_params(self) -> int:
        return self.store.num_params()

    def astype(self, dtype) -> "TransformerParams":
        return TransformerParams(self.cfg, self.store.astype(dtype))


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise SequenceLengthError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise VocabularyError(f"token id outside [0, {cfg.vocab_size})")
    if tokens.shape[-1] > cfg.max_len:
        raise SequenceLengthError(f"sequence length {tokens.shape[-1]} > max_len {cfg.max_len}")
    return tokens


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def _blocks(model: TransformerParams, x: Tensor) -> Tensor:
    """Shared spine: positions + attention/MLP blocks + final layernorm.

    x is the content embedding, [B, N, d]. Returns [B, N, d] hidden states.
    """
    global _FORWARD_COUNT
    _FORWARD_COUNT += 1
    cfg = model.cfg
    s = model.store
    b, n, d = x.shape
    if n > cfg.max_len:
        raise SequenceLengthError(f"sequence length {n} > max_len {cfg.max_len}")
    h_dim, n_heads = cfg.head_dim, cfg.n_heads

    x = T.add_rows(x, T.slice_axis(s["pos"], 0, 0, n))
    mask = _causal_mask(n)[None, None]
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h = T.layernorm(x, s[p + "ln1.w"], s[p + "ln1.b"])
        qkv = T.linear(h, s[p + "attn.wqkv"], s[p + "attn.bqkv"])
        q = T.slice_axis(qkv, 2, 0, d)
        k = T.slice_axis(qkv, 2, d, 2 * d)
        v = T.slice_axis(qkv, 2, 2 * d, 3 * d)
        q = T.transpose(T.reshape(q, (b, n, n_heads, h_dim)), (0, 2, 1, 3))
        kt = T.transpose(T.reshape(k, (b, n, n_heads, h_dim)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(v, (b, n, n_heads, h_dim)), (0, 2, 1, 3))
        scores = T.scale(T.bmm(q, kt), 1.0 / np.sqrt(h_dim))
        scores = T.apply_additive_mask(scores, mask)
        probs = T.softmax_lastaxis(scores)
        ctx = T.reshape(T.transpose(T.bmm(probs, v), (0, 2, 1, 3)), (b, n, d))
        x = T.add(x, T.linear(ctx, s[p + "attn.wo"], s[p + "attn.bo"]))
        h2 = T.layernorm(x, s[p + "ln2.w"], s[p + "ln2.b"])
        u = T.gelu(T.linear(h2, s[p + "mlp.wfc"], s[p + "mlp.bfc"]))
        x = T.add(x, T.linear(u, s[p + "mlp.wproj"], s[p + "mlp.bproj"]))
    return T.layernorm(x, s["lnf.w"], s["lnf.b"])


def _unembed(model: TransformerParams, hidden: Tensor) -> Tensor:
    s = model.store
    if model.cfg.tie_unembed:
        return T.linear(hidden, T.transpose(s["emb"], (1, 0)))
    return T.linear(hidden, s["unemb"])


def embed_tokens(model: TransformerParams, tokens: np.ndarray) -> Tensor:
    """Token-content embeddings (no positions); [N] -> [N, d], [B, N] -> [B, N, d]."""
    tokens = _check_tokens(model.cfg, tokens)
    return T.embedding(model.store["emb"], tokens)


def forward_hidden(model: TransformerParams, tokens: np.ndarray) -> Tensor:
    """Top-layer hidden states (post final layernorm) at every position."""
    tokens = _check_tokens(model.cfg, tokens)
    single = tokens.ndim == 1
    tok2 = tokens[None] if single else tokens
    x = T.embedding(model.store["emb"], tok2)
    hid = _blocks(model, x)
    if single:
        hid = T.reshape(hid, hid.shape[1:])
    return hid


def forward_logits_from_embeddings(model: TransformerParams, emb: Tensor) -> Tensor:
    """Logits from caller-built content embeddings; positions are added here."""
    single = emb.data.ndim == 2
    x = T.reshape(emb, (1,) + emb.shape) if single else emb
    hid = _blocks(model, x)
    logits = _unembed(model, hid)
    if single:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


def forward_logits(model: TransformerParams, tokens: np.ndarray) -> Tensor:
    """Standard token-input forward; definitionally the embedding path."""
    return forward_logits_from_embeddings(model, embed_tokens(model, tokens))
