"""Packed per-token decode path: KV cache, numba step kernels, full-sequence prefill.

The step kernels run under @njit(nogil=True) so two decode workers can overlap
on separate cores; layernorm moments and softmax sums accumulate in float64 to
stay within 1e-5 of the batched training forward.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .transformer import ModelConfig, TransformerParams, SequenceLengthError

F32 = np.float32


class CacheOverflowError(RuntimeError):
    pass


_GELU_C = np.float32(0.7978845608028654)
_GELU_A = np.float32(0.044715)


@njit(cache=True, nogil=True)
def _step_core(ln1w, ln1b, wqkv, bqkv, wo, bo, ln2w, ln2b, wfc, bfc, wpr, bpr,
               lnfw, lnfb, unemb, kc, vc, n, x, n_heads):
    """One incremental position: x is the content+position embedding [d].

    Appends this position's K/V rows at index n and returns (hidden, logits).
    """
    n_layers, d = ln1w.shape
    hd = d // n_heads
    eps = 1e-5
    h = np.empty(d, np.float32)
    for l in range(n_layers):
        # pre-attention layernorm
        m = 0.0
        for i in range(d):
            m += x[i]
        m /= d
        mf = np.float32(m)
        var = 0.0
        for i in range(d):
            c = x[i] - mf
            var += c * c
        var /= d
        inv = np.float32(1.0 / np.sqrt(var + eps))
        for i in range(d):
            h[i] = (x[i] - mf) * inv * ln1w[l, i] + ln1b[l, i]
        qkv = h @ wqkv[l] + bqkv[l]
        for i in range(d):
            kc[l, n, i] = qkv[d + i]
            vc[l, n, i] = qkv[2 * d + i]
        ctx = np.empty(d, np.float32)
        scale = np.float32(1.0 / np.sqrt(hd))
        for head in range(n_heads):
            q0 = head * hd
            sc = np.empty(n + 1, np.float32)
            mx = np.float32(-1e30)
            for j in range(n + 1):
                s = 0.0
                for k in range(hd):
                    s += qkv[q0 + k] * kc[l, j, q0 + k]
                sj = np.float32(s) * scale
                sc[j] = sj
                if sj > mx:
                    mx = sj
            tot = 0.0
            for j in range(n + 1):
                ej = np.exp(sc[j] - mx)
                sc[j] = ej
                tot += ej
            for k in range(hd):
                acc = 0.0
                for j in range(n + 1):
                    acc += (sc[j] / tot) * vc[l, j, q0 + k]
                ctx[q0 + k] = acc
        x = x + (ctx @ wo[l] + bo[l])
        # pre-MLP layernorm
        m = 0.0
        for i in range(d):
            m += x[i]
        m /= d
        mf = np.float32(m)
        var = 0.0
        for i in range(d):
            c = x[i] - mf
            var += c * c
        var /= d
        inv = np.float32(1.0 / np.sqrt(var + eps))
        for i in range(d):
            h[i] = (x[i] - mf) * inv * ln2w[l, i] + ln2b[l, i]
        u = h @ wfc[l] + bfc[l]
        for i in range(u.shape[0]):
            ui = u[i]
            t = np.tanh(_GELU_C * (ui + _GELU_A * ui * ui * ui))
            u[i] = np.float32(0.5) * ui * (np.float32(1.0) + t)
        x = x + (u @ wpr[l] + bpr[l])
    # final layernorm
    m = 0.0
    for i in range(d):
        m += x[i]
    m /= d
    mf = np.float32(m)
    var = 0.0
    for i in range(d):
        c = x[i] - mf
        var += c * c
    var /= d
    inv = np.float32(1.0 / np.sqrt(var + eps))
    hid = np.empty(d, np.float32)
    for i in range(d):
        hid[i] = (x[i] - mf) * inv * lnfw[i] + lnfb[i]
    logits = hid @ unemb
    return hid, logits


@njit(cache=True, nogil=True)
def _step_token(ln1w, ln1b, wqkv, bqkv, wo, bo, ln2w, ln2b, wfc, bfc, wpr, bpr,
                lnfw, lnfb, unemb, emb, pos, kc, vc, n, tok, lam, latent, n_heads):
    """Token-in step: builds emb[tok] + pos[n] + lam*latent, returns argmax too."""
    d = ln1w.shape[1]
    x = np.empty(d, np.float32)
    if lam == np.float32(0.0):
        for i in range(d):
            x[i] = emb[tok, i] + pos[n, i]
    else:
        for i in range(d):
            x[i] = emb[tok, i] + pos[n, i] + lam * latent[i]
    hid, logits = _step_core(ln1w, ln1b, wqkv, bqkv, wo, bo, ln2w, ln2b,
                             wfc, bfc, wpr, bpr, lnfw, lnfb, unemb, kc, vc, n, x, n_heads)
    best = 0
    bv = logits[0]
    for i in range(1, logits.shape[0]):
        if logits[i] > bv:
            bv = logits[i]
            best = i
    return hid, logits, best


class DecodeCache:
    """Per-layer K/V rows for positions processed so far; owned by one worker."""

    def __init__(self, n_layers: int, max_len: int, d_model: int):
        self.k = np.zeros((n_layers, max_len, d_model), F32)
        self.v = np.zeros((n_layers, max_len, d_model), F32)
        self.n = 0
        self.max_len = max_len

    def copy(self) -> "DecodeCache":
        out = DecodeCache.__new__(DecodeCache)
        out.k = self.k.copy()
        out.v = self.v.copy()
        out.n = self.n
        out.max_len = self.max_len
        return out


class PackedModel:
    """Float32 weights of one transformer, stacked per layer for the kernels."""

    def __init__(self, cfg: ModelConfig, arrays: dict):
        self.cfg = cfg
        self.arrays = arrays
        self.step_count = 0
        self.prefill_count = 0
        a = arrays
        self._wargs = (a["ln1w"], a["ln1b"], a["wqkv"], a["bqkv"], a["wo"], a["bo"],
                       a["ln2w"], a["ln2b"], a["wfc"], a["bfc"], a["wpr"], a["bpr"],
                       a["lnfw"], a["lnfb"], a["unemb"])
        self.emb = a["emb"]
        self.pos = a["pos"]

    @classmethod
    def from_params(cls, model: TransformerParams) -> "PackedModel":
        cfg = model.cfg
        s = model.store
        L, d, dff, v = cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.vocab_size

        def f32(name):
            return np.ascontiguousarray(s[name].data.astype(F32))

        a = {
            "ln1w": np.empty((L, d), F32), "ln1b": np.empty((L, d), F32),
            "wqkv": np.empty((L, d, 3 * d), F32), "bqkv": np.empty((L, 3 * d), F32),
            "wo": np.empty((L, d, d), F32), "bo": np.empty((L, d), F32),
            "ln2w": np.empty((L, d), F32), "ln2b": np.empty((L, d), F32),
            "wfc": np.empty((L, d, dff), F32), "bfc": np.empty((L, dff), F32),
            "wpr": np.empty((L, dff, d), F32), "bpr": np.empty((L, d), F32),
        }
        for l in range(L):
            p = f"layers.{l}."
            a["ln1w"][l] = f32(p + "ln1.w"); a["ln1b"][l] = f32(p + "ln1.b")
            a["wqkv"][l] = f32(p + "attn.wqkv"); a["bqkv"][l] = f32(p + "attn.bqkv")
            a["wo"][l] = f32(p + "attn.wo"); a["bo"][l] = f32(p + "attn.bo")
            a["ln2w"][l] = f32(p + "ln2.w"); a["ln2b"][l] = f32(p + "ln2.b")
            a["wfc"][l] = f32(p + "mlp.wfc"); a["bfc"][l] = f32(p + "mlp.bfc")
            a["wpr"][l] = f32(p + "mlp.wproj"); a["bpr"][l] = f32(p + "mlp.bproj")
        a["lnfw"] = f32("lnf.w"); a["lnfb"] = f32("lnf.b")
        a["emb"] = f32("emb")
        a["pos"] = f32("pos")
        a["unemb"] = np.ascontiguousarray(a["emb"].T) if cfg.tie_unembed else f32("unemb")
        return cls(cfg, a)

    def new_cache(self, max_len: int | None = None) -> DecodeCache:
        return DecodeCache(self.cfg.n_layers, max_len or self.cfg.max_len, self.cfg.d_model)

    def step_emb(self, cache: DecodeCache, content_emb: np.ndarray):
        """Advance one position from a content embedding; positions added here."""
        if cache.n >= cache.max_len:
            raise CacheOverflowError(f"cache full at {cache.n}")
        x = content_emb.reshape(-1).astype(F32, copy=True)
        x += self.pos[cache.n]
        hid, logits = _step_core(*self._wargs, cache.k, cache.v, cache.n, x,
                                 self.cfg.n_heads)
        cache.n += 1
        self.step_count += 1
        return hid, logits

    def step_token(self, cache: DecodeCache, tok: int, lam: float = 0.0,
                   latent: np.ndarray | None = None):
        """Advance one position from a token id, optionally fused with a latent."""
        if cache.n >= cache.max_len:
            raise CacheOverflowError(f"cache full at {cache.n}")
        if latent is None:
            latent = _ZERO_LATENTS.setdefault(self.cfg.d_model,
                                              np.zeros(self.cfg.d_model, F32))
        hid, logits, best = _step_token(*self._wargs, self.emb, self.pos,
                                        cache.k, cache.v, cache.n, tok,
                                        F32(lam), latent, self.cfg.n_heads)
        cache.n += 1
        self.step_count += 1
        return hid, logits, best


_ZERO_LATENTS: dict[int, np.ndarray] = {}


def incremental_step(packed: PackedModel, cache: DecodeCache, new_emb: np.ndarray):
    """Documented incremental op: content embedding [1, d] in, one position out.

    Returns (hidden [1, d], logits [1, V], cache); the cache is extended in
    place and is also the returned cache.
    """
    hid, logits = packed.step_emb(cache, new_emb)
    return hid[None, :], logits[None, :], cache


def _ln_np(x, w, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x - mu.astype(F32)
    var = np.mean(xc.astype(np.float64) ** 2, axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(F32)
    return xc * inv * w + b


def _gelu_np(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return F32(0.5) * x * (F32(1.0) + t)


def prefill(packed: PackedModel, cache: DecodeCache, content_emb: np.ndarray):
    """Full-sequence forward over a prompt that also fills the KV cache.

    content_emb: [P, d] float32 content embeddings (fusion already applied by
    the caller). Returns (hidden [P, d], logits [P, V]).
    """
    cfg = packed.cfg
    p_len = content_emb.shape[0]
    if cache.n != 0:
        raise CacheOverflowError("prefill requires an empty cache")
    if p_len > cache.max_len:
        raise SequenceLengthError(f"prompt length {p_len} > cache max_len {cache.max_len}")
    if p_len > cfg.max_len:
        raise SequenceLengthError(f"prompt length {p_len} > max_len {cfg.max_len}")
    a = packed.arrays
    h_dim, n_heads = cfg.head_dim, cfg.n_heads
    d = cfg.d_model
    x = content_emb.astype(F32) + packed.pos[:p_len]
    mask = np.triu(np.ones((p_len, p_len), dtype=bool), k=1)
    scale = F32(1.0 / np.sqrt(h_dim))
    for l in range(cfg.n_layers):
        h = _ln_np(x, a["ln1w"][l], a["ln1b"][l])
        qkv = h @ a["wqkv"][l] + a["bqkv"][l]
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        cache.k[l, :p_len] = k
        cache.v[l, :p_len] = v
        ctx = np.empty((p_len, d), F32)
        for head in range(n_heads):
            q0 = head * h_dim
            sc = (q[:, q0:q0 + h_dim] @ k[:, q0:q0 + h_dim].T) * scale
            sc[mask] = -np.inf
            mx = sc.max(axis=1, keepdims=True)
            e = np.exp(sc - mx)
            denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
            probs = (e / denom).astype(F32)
            ctx[:, q0:q0 + h_dim] = probs @ v[:, q0:q0 + h_dim]
        x = x + (ctx @ a["wo"][l] + a["bo"][l])
        h2 = _ln_np(x, a["ln2w"][l], a["ln2b"][l])
        u = _gelu_np(h2 @ a["wfc"][l] + a["bfc"][l])
        x = x + (u @ a["wpr"][l] + a["bpr"][l])
    hid = _ln_np(x, a["lnfw"], a["lnfb"])
    logits = hid @ a["unemb"]
    cache.n = p_len
    packed.prefill_count += p_len
    return hid, logits
