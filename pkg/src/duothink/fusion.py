"""Latent reasoning production and fusion into the Generator's input embeddings.

The Reasoner's top-layer hidden state at position j (a function of tokens
0..j only) is added, scaled by lambda, onto the Generator's input embedding
at position j+1. That one-step lag is what lets training run in two forward
passes and inference run staggered on two workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import transformer as tf
from .tensor import ParamStore, Tensor
from .transformer import TransformerParams
from .stepkernel import DecodeCache, PackedModel

F32 = np.float32

REGIONS = ("global", "input_only", "output_only")
DEFAULT_LAMBDA = 0.5
LAMBDA_SWEEP = (0.0, 0.2, 0.5, 1.0, 1.5, 2.0, 5.0)


class FusionShapeError(ValueError):
    pass


@dataclass
class PromptLayout:
    """Token counts for one serialized sample: prompt part and response part."""
    prompt_len: int
    response_len: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.response_len < 1:
            raise ValueError("prompt_len and response_len must be >= 1")

    @property
    def total(self) -> int:
        return self.prompt_len + self.response_len


@dataclass
class FusionConfig:
    lam: float = DEFAULT_LAMBDA
    region: str = "global"
    projection: Tensor | None = None  # [d_R, d_G], present iff widths differ

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.region not in REGIONS:
            raise ValueError(f"region must be one of {REGIONS}")


def init_projection(d_r: int, d_g: int, rng: np.random.Generator, dtype=F32) -> ParamStore:
    """Trainable width bridge; parameters live in their own store."""
    store = ParamStore()
    store.add("proj.w", rng.normal(0.0, tf.INIT_STD, (d_r, d_g)).astype(dtype))
    return store


def make_fusion_config(lam: float, region: str, reasoner_cfg, generator_cfg,
                       proj_store: ParamStore | None) -> FusionConfig:
    """Validate the projection-presence invariant and build the config."""
    need_proj = reasoner_cfg.d_model != generator_cfg.d_model
    if need_proj and proj_store is None:
        raise FusionShapeError("Reasoner/Generator widths differ; projection required")
    if not need_proj and proj_store is not None:
        raise FusionShapeError("projection configured but widths already match")
    proj = proj_store["proj.w"] if proj_store is not None else None
    if proj is not None and proj.shape != (reasoner_cfg.d_model, generator_cfg.d_model):
        raise FusionShapeError(f"projection shape {proj.shape} does not bridge "
                               f"{reasoner_cfg.d_model}->{generator_cfg.d_model}")
    return FusionConfig(lam=lam, region=region, projection=proj)


@dataclass
class LatentThoughts:
    """Per-position latent vectors, already projected to the Generator width."""
    vectors: Tensor                      # [T_used, d_G] or [B, T_used, d_G]
    source_positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.source_positions is None:
            t_used = self.vectors.shape[-2]
            self.source_positions = np.arange(t_used)


def project_latent(r: Tensor, w: Tensor) -> Tensor:
    """Linear width bridge [.., d_R] -> [.., d_G]; trained jointly."""
    return T.linear(r, w)


def reason_all(reasoner: TransformerParams, tokens: np.ndarray,
               projection: Tensor | None = None) -> LatentThoughts:
    """One Reasoner pass over the whole sequence; latents for positions 0..N-2.

    The vector tapped at position j will enhance the Generator input at j+1.
    """
    tokens = np.asarray(tokens)
    n = tokens.shape[-1]
    if n < 2:
        raise ValueError("reason_all needs a sequence of length >= 2")
    hidden = tf.forward_hidden(reasoner, tokens)          # [.., N, d_R]
    axis = hidden.data.ndim - 2
    lat = T.slice_axis(hidden, axis, 0, n - 1)            # [.., N-1, d_R]
    if projection is not None:
        lat = project_latent(lat, projection)
    return LatentThoughts(vectors=lat, source_positions=np.arange(n - 1))


def reason_step(packed_reasoner: PackedModel, cache: DecodeCache, token: int,
                projection: np.ndarray | None = None) -> np.ndarray:
    """Incremental latent: Reasoner consumes one token, returns the projected tap."""
    hid, _logits, _best = packed_reasoner.step_token(cache, int(token))
    if projection is not None:
        return (hid @ projection).astype(F32)
    return hid


def region_rows(region: str, layout: PromptLayout, n: int) -> np.ndarray:
    """Boolean row mask of positions that receive fusion; row 0 never does."""
    keep = np.zeros(n, dtype=bool)
    p = layout.prompt_len
    if region == "global":
        keep[1:] = True
    elif region == "input_only":
        keep[1:min(p, n)] = True
    elif region == "output_only":
        keep[min(p, n):] = True
    else:
        raise ValueError(f"unknown region {region!r}")
    keep[0] = False
    return keep


def fuse(token_emb: Tensor, latents: LatentThoughts, cfg: FusionConfig,
         layout: PromptLayout) -> Tensor:
    """Fused row i = token_emb[i] + lam * latent[i-1] inside the region.

    token_emb: [N, d_G]; latents must cover source positions 0..N-2. With
    lam == 0 the token embeddings are returned unchanged (bit-exact).
    """
    n, d_g = token_emb.shape
    if cfg.lam == 0.0:
        return token_emb
    if latents.vectors.data.ndim != 2:
        raise FusionShapeError("fuse expects unbatched latents [T, d_G]")
    if latents.vectors.shape[-1] != d_g:
        raise FusionShapeError(f"latent width {latents.vectors.shape[-1]} != "
                               f"embedding width {d_g} (projection misconfigured)")
    if latents.vectors.shape[0] < n - 1:
        raise FusionShapeError(f"latents cover {latents.vectors.shape[0]} positions, "
                               f"need {n - 1}")
    lat = latents.vectors
    if lat.shape[0] > n - 1:
        lat = T.slice_axis(lat, 0, 0, n - 1)
    zero = Tensor(np.zeros((1, d_g), dtype=lat.dtype))
    shifted = T.concat([zero, lat], axis=0)               # row i holds latent i-1
    keep = region_rows(cfg.region, layout, n)[:, None]
    return T.add(token_emb, T.scale(T.mul_const(shifted, keep), cfg.lam))


def fuse_batch(token_emb: Tensor, latents: Tensor, cfg: FusionConfig,
               enhance_mask: np.ndarray) -> Tensor:
    """Batched fuse: token_emb [B, N, d_G], latents [B, N-1, d_G].

    enhance_mask [B, N] marks rows that receive fusion (region composed with
    per-sample lengths and padding); row 0 must be False everywhere.
    """
    if cfg.lam == 0.0:
        return token_emb
    b, n, d_g = token_emb.shape
    if latents.shape != (b, n - 1, d_g):
        raise FusionShapeError(f"batched latents {latents.shape} != {(b, n - 1, d_g)}")
    if enhance_mask[:, 0].any():
        raise FusionShapeError("row 0 can never be enhanced")
    zero = Tensor(np.zeros((b, 1, d_g), dtype=latents.dtype))
    shifted = T.concat([zero, latents], axis=1)
    masked = T.mul_const(shifted, enhance_mask[:, :, None])
    return T.add(token_emb, T.scale(masked, cfg.lam))
