"""Inference engines: sequential reference, staggered two-worker decoding,
SFT and sequential-latent latency baselines, and the latency benchmark.

The staggered decoder runs the Generator's step for position t and the
Reasoner's step for the same position on two threads; the one-step latent lag
means neither waits on the other, and token output is exact against the
sequential reference.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

from . import fusion as fu
from .training import DuoModel
from .transformer import SequenceLengthError
from .stepkernel import PackedModel, prefill

F32 = np.float32


class DeadlockError(RuntimeError):
    pass


@dataclass
class DecodeConfig:
    max_steps: int = 64
    mode: str = "greedy"              # "greedy" | "sample"
    temperature: float = 1.0
    seed: int = 0
    stop_token: int | None = None
    lam: float = fu.DEFAULT_LAMBDA
    region: str = "global"
    rendezvous_timeout: float = 30.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.mode not in ("greedy", "sample"):
            raise ValueError("mode must be 'greedy' or 'sample'")
        if self.mode == "sample" and self.temperature <= 0:
            raise ValueError("temperature must be > 0 when sampling")


@dataclass
class DecodeResult:
    tokens: list[int]
    per_step_latency: list[float]
    total_wall: float
    worker_timeline: dict | None = None
    extra_steps: int = 0              # latent-prefix steps of the sequential-latent baseline


@dataclass
class BenchReport:
    """Measured decoding costs; names mirror the per-policy CSV columns."""
    params_g: int
    params_r: int
    n1: int
    n2: int
    c_g_us: float
    c_r_us: float
    ell_g_us: float
    ell_r_us: float
    totals_ms: dict = field(default_factory=dict)  # policy -> total wall ms

    POLICIES = ("sft", "flythinker_staggered", "sequential_latent")
    CSV_HEADER = "policy,params_G,params_R,N1,N2,C_G_us,C_R_us,ell_G_us,ell_R_us,total_ms"

    def n2_for(self, policy: str) -> int:
        if policy == "sft":
            return 0
        return self.n2

    def to_csv(self, path: str | Path, config_hash: str = ""):
        with open(path, "w", newline="") as f:
            f.write(self.CSV_HEADER + "\n")
            w = csv.writer(f)
            for policy in self.POLICIES:
                w.writerow([policy, self.params_g, self.params_r, self.n1,
                            self.n2_for(policy), repr(self.c_g_us), repr(self.c_r_us),
                            repr(self.ell_g_us), repr(self.ell_r_us),
                            repr(self.totals_ms[policy])])
            if config_hash:
                f.write(f"# config_hash={config_hash}\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "BenchReport":
        with open(path, newline="") as f:
            lines = [ln for ln in f.read().splitlines() if ln and not ln.startswith("#")]
        if lines[0] != cls.CSV_HEADER:
            raise ValueError("unexpected bench CSV header")
        totals = {}
        fields = None
        n2_fly = 0
        for ln in lines[1:]:
            row = next(csv.reader([ln]))
            policy = row[0]
            totals[policy] = float(row[9])
            fields = row
            if policy != "sft":
                n2_fly = int(row[4])
        return cls(params_g=int(fields[1]), params_r=int(fields[2]), n1=int(fields[3]),
                   n2=n2_fly, c_g_us=float(fields[5]), c_r_us=float(fields[6]),
                   ell_g_us=float(fields[7]), ell_r_us=float(fields[8]), totals_ms=totals)


@dataclass
class PackedDuo:
    gen: PackedModel
    rea: PackedModel | None
    proj: np.ndarray | None
    params_g: int
    params_r: int

    @classmethod
    def from_duo(cls, model: DuoModel) -> "PackedDuo":
        gen = PackedModel.from_params(model.generator)
        rea = PackedModel.from_params(model.reasoner) if model.reasoner is not None else None
        proj = None
        if model.fusion.projection is not None:
            proj = np.ascontiguousarray(model.fusion.projection.data.astype(F32))
        counts = model.num_params()
        return cls(gen=gen, rea=rea, proj=proj, params_g=counts.get("generator", 0),
                   params_r=counts.get("reasoner", 0) + counts.get("projection", 0))


def _as_packed(models) -> PackedDuo:
    if isinstance(models, PackedDuo):
        return models
    return PackedDuo.from_duo(models)


def _fusable(region: str, pos: int, prompt_len: int) -> bool:
    if pos < 1:
        return False
    if region == "global":
        return True
    if region == "input_only":
        return pos < prompt_len
    return pos >= prompt_len  # output_only


def select_token(logits: np.ndarray, kernel_argmax: int, cfg: DecodeConfig,
                 rng: np.random.Generator | None) -> int:
    """Greedy (lowest-index tie break) or seeded temperature sampling."""
    if cfg.mode == "greedy":
        return int(kernel_argmax) if kernel_argmax >= 0 else int(np.argmax(logits))
    z = logits.astype(np.float64) / cfg.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u), len(p) - 1))


def _prefill_pipeline(packed: PackedDuo, prompt: np.ndarray, cfg: DecodeConfig,
                      total_len: int):
    """Full-sequence prefill of both models over prompt[0..P-2].

    Returns (gen_cache, rea_cache, prev_latent, last_tok). prev_latent is the
    projected Reasoner tap at position P-2 (zeros when unavailable/unused).
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    p_len = len(prompt)
    if p_len < 1:
        raise ValueError("empty prompt")
    gcfg = packed.gen.cfg
    if total_len > gcfg.max_len:
        raise SequenceLengthError(f"prompt+steps {total_len} > generator max_len {gcfg.max_len}")
    if prompt.max() >= gcfg.vocab_size:
        raise ValueError("prompt token outside generator vocabulary")
    gen_cache = packed.gen.new_cache(total_len)
    rea_cache = packed.rea.new_cache(total_len) if packed.rea is not None else None
    d_g = gcfg.d_model
    prev_latent = np.zeros(d_g, F32)

    n_pre = p_len - 1
    if n_pre == 0:
        return gen_cache, rea_cache, prev_latent, int(prompt[-1])

    latents = None
    if packed.rea is not None:
        if total_len > packed.rea.cfg.max_len:
            raise SequenceLengthError("prompt+steps exceeds reasoner max_len")
        rhid, _ = prefill(packed.rea, rea_cache, packed.rea.emb[prompt[:n_pre]])
        latents = rhid @ packed.proj if packed.proj is not None else rhid
        latents = latents.astype(F32)

    gemb = packed.gen.emb[prompt[:n_pre]].copy()
    if latents is not None and cfg.lam != 0.0:
        for i in range(1, n_pre):
            if _fusable(cfg.region, i, p_len):
                gemb[i] += F32(cfg.lam) * latents[i - 1]
    prefill(packed.gen, gen_cache, gemb)
    if latents is not None:
        prev_latent = latents[-1]
    return gen_cache, rea_cache, prev_latent, int(prompt[-1])


def _gen_step(packed: PackedDuo, gen_cache, tok: int, prev_latent: np.ndarray,
              cfg: DecodeConfig, prompt_len: int):
    """One Generator step at position gen_cache.n consuming tok fused with prev_latent."""
    pos = gen_cache.n
    lam = cfg.lam if (packed.rea is not None and _fusable(cfg.region, pos, prompt_len)) else 0.0
    return packed.gen.step_token(gen_cache, tok, lam, prev_latent)


def _rea_step(packed: PackedDuo, rea_cache, tok: int) -> np.ndarray:
    return fu.reason_step(packed.rea, rea_cache, tok, packed.proj)


def decode_sequential(models, prompt, cfg: DecodeConfig) -> DecodeResult:
    """Reference decoder: Reasoner step then Generator step, one thread."""
    packed = _as_packed(models)
    if packed.rea is None:
        raise ValueError("decode_sequential needs a Reasoner; use decode_baseline_sft")
    prompt = np.asarray(prompt, dtype=np.int64)
    p_len = len(prompt)
    total_len = p_len + cfg.max_steps
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "sample" else None

    t_start = time.perf_counter()
    gen_cache, rea_cache, prev_latent, tok = _prefill_pipeline(packed, prompt, cfg, total_len)
    tokens: list[int] = []
    latencies: list[float] = []
    t_prev = time.perf_counter()
    for _ in range(cfg.max_steps):
        new_latent = _rea_step(packed, rea_cache, tok)
        hid, logits, best = _gen_step(packed, gen_cache, tok, prev_latent, cfg, p_len)
        tok = select_token(logits, best, cfg, rng)
        prev_latent = new_latent
        tokens.append(tok)
        now = time.perf_counter()
        latencies.append(now - t_prev)
        t_prev = now
        if cfg.stop_token is not None and tok == cfg.stop_token:
            break
    return DecodeResult(tokens=tokens, per_step_latency=latencies,
                        total_wall=time.perf_counter() - t_start)


_STOP = object()


def decode_staggered(models, prompt, cfg: DecodeConfig) -> DecodeResult:
    """Two-worker decoder: Generator and Reasoner steps overlap each emission.

    Worker A (generation) consumes the latent the Reasoner produced one step
    earlier; worker B (reasoning) consumes the token A emitted one step
    earlier; a queue pair forms the per-step rendezvous. Token output is exact
    against decode_sequential.
    """
    packed = _as_packed(models)
    if packed.rea is None:
        raise ValueError("decode_staggered needs a Reasoner; use decode_baseline_sft")
    prompt = np.asarray(prompt, dtype=np.int64)
    p_len = len(prompt)
    total_len = p_len + cfg.max_steps
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "sample" else None

    t_start = time.perf_counter()
    gen_cache, rea_cache, prev_latent0, tok0 = _prefill_pipeline(packed, prompt, cfg, total_len)

    q_tok: queue.SimpleQueue = queue.SimpleQueue()
    q_lat: queue.SimpleQueue = queue.SimpleQueue()
    tokens: list[int] = []
    latencies: list[float] = []
    gen_timeline: list[tuple[float, float]] = []
    rea_timeline: list[tuple[float, float]] = []
    errors: list[BaseException] = []
    timeout = cfg.rendezvous_timeout

    def gen_worker():
        try:
            tok = tok0
            prev_latent = prev_latent0
            prev_src = gen_cache.n - 1
            t_prev = time.perf_counter()
            for step in range(cfg.max_steps):
                c0 = time.perf_counter()
                pos = gen_cache.n
                assert prev_src == pos - 1 or cfg.lam == 0.0, "latent provenance mismatch"
                hid, logits, best = _gen_step(packed, gen_cache, tok, prev_latent, cfg, p_len)
                tok = select_token(logits, best, cfg, rng)
                c1 = time.perf_counter()
                gen_timeline.append((c0, c1))
                tokens.append(tok)
                latencies.append(c1 - t_prev)
                t_prev = c1
                stopping = (step == cfg.max_steps - 1 or
                            (cfg.stop_token is not None and tok == cfg.stop_token))
                q_tok.put(_STOP if stopping else tok)
                if stopping:
                    break
                try:
                    prev_src, prev_latent = q_lat.get(timeout=timeout)
                except queue.Empty:
                    raise DeadlockError("generation worker timed out waiting for latent")
        except BaseException as e:  # noqa: BLE001 - propagated to caller
            errors.append(e)
            q_tok.put(_STOP)

    def rea_worker():
        try:
            tok = tok0
            while True:
                c0 = time.perf_counter()
                src = rea_cache.n
                latent = _rea_step(packed, rea_cache, tok)
                c1 = time.perf_counter()
                rea_timeline.append((c0, c1))
                q_lat.put((src, latent))
                try:
                    nxt = q_tok.get(timeout=timeout)
                except queue.Empty:
                    raise DeadlockError("reasoning worker timed out waiting for token")
                if nxt is _STOP:
                    return
                tok = nxt
        except BaseException as e:  # noqa: BLE001
            errors.append(e)
            q_lat.put((-1, None))

    tb = threading.Thread(target=rea_worker, name="reasoner")
    ta = threading.Thread(target=gen_worker, name="generator")
    tb.start()
    ta.start()
    ta.join()
    tb.join()
    if errors:
        raise errors[0]
    return DecodeResult(tokens=tokens, per_step_latency=latencies,
                        total_wall=time.perf_counter() - t_start,
                        worker_timeline={"generator": gen_timeline,
                                         "reasoner": rea_timeline})


def decode_baseline_sft(generator, prompt, cfg: DecodeConfig) -> DecodeResult:
    """Generator-only incremental decoding (no Reasoner, no fusion)."""
    if isinstance(generator, PackedDuo):
        packed = PackedDuo(gen=generator.gen, rea=None, proj=None,
                           params_g=generator.params_g, params_r=0)
    elif isinstance(generator, DuoModel):
        packed = PackedDuo(gen=PackedModel.from_params(generator.generator), rea=None,
                           proj=None, params_g=generator.generator.num_params(), params_r=0)
    else:
        packed = PackedDuo(gen=generator, rea=None, proj=None, params_g=0, params_r=0)
    prompt = np.asarray(prompt, dtype=np.int64)
    total_len = len(prompt) + cfg.max_steps
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "sample" else None

    t_start = time.perf_counter()
    gen_cache, _, zero_lat, tok = _prefill_pipeline(packed, prompt, cfg, total_len)
    tokens, latencies = [], []
    t_prev = time.perf_counter()
    for _ in range(cfg.max_steps):
        hid, logits, best = packed.gen.step_token(gen_cache, tok)
        tok = select_token(logits, best, cfg, rng)
        tokens.append(tok)
        now = time.perf_counter()
        latencies.append(now - t_prev)
        t_prev = now
        if cfg.stop_token is not None and tok == cfg.stop_token:
            break
    return DecodeResult(tokens=tokens, per_step_latency=latencies,
                        total_wall=time.perf_counter() - t_start)


def decode_baseline_seq_latent(models, prompt, n_latent: int, cfg: DecodeConfig) -> DecodeResult:
    """Latency baseline: n_latent serial self-fed Generator steps, then decode.

    The latent prefix feeds the Generator's own top hidden state back as the
    next input embedding (untrained, cost model only). With n_latent == 0 the
    step sequence is exactly the SFT baseline's.
    """
    if n_latent < 0:
        raise ValueError("n_latent must be >= 0")
    packed = _as_packed(models)
    prompt = np.asarray(prompt, dtype=np.int64)
    total_len = len(prompt) + n_latent + cfg.max_steps
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "sample" else None
    sub = PackedDuo(gen=packed.gen, rea=None, proj=None,
                    params_g=packed.params_g, params_r=0)

    t_start = time.perf_counter()
    gen_cache, _, _zero, tok = _prefill_pipeline(sub, prompt, cfg, total_len)
    carry_emb = None  # when set, the next step consumes this embedding, not a token
    for _ in range(n_latent):
        if carry_emb is None:
            hid, _logits, _best = packed.gen.step_token(gen_cache, tok)
        else:
            hid, _logits = packed.gen.step_emb(gen_cache, carry_emb)
        carry_emb = hid

    tokens, latencies = [], []
    t_prev = time.perf_counter()
    for _ in range(cfg.max_steps):
        if carry_emb is None:
            _hid, logits, best = packed.gen.step_token(gen_cache, tok)
        else:
            _hid, logits = packed.gen.step_emb(gen_cache, carry_emb)
            best = -1
            carry_emb = None
        tok = select_token(logits, best, cfg, rng)
        tokens.append(tok)
        now = time.perf_counter()
        latencies.append(now - t_prev)
        t_prev = now
        if cfg.stop_token is not None and tok == cfg.stop_token:
            break
    return DecodeResult(tokens=tokens, per_step_latency=latencies,
                        total_wall=time.perf_counter() - t_start, extra_steps=n_latent)


def timeline_overlap_fraction(result: DecodeResult) -> float:
    """Fraction of steps whose generator and reasoner compute intervals overlap."""
    tl = result.worker_timeline
    if not tl:
        return 0.0
    pairs = zip(tl["generator"], tl["reasoner"])
    n, overlapping = 0, 0
    for (gs, ge), (rs, re) in pairs:
        n += 1
        if gs < re and rs < ge:
            overlapping += 1
    return overlapping / max(n, 1)


def bench(models, prompts, cfg: DecodeConfig, warmup: int = 3) -> BenchReport:
    """Latency/cost benchmark: medians over prompts for every report field."""
    packed = _as_packed(models)
    if packed.rea is None:
        raise ValueError("bench needs a full Reasoner+Generator model")
    prompts = [np.asarray(p, dtype=np.int64) for p in prompts]
    if len(prompts) < 1:
        raise ValueError("bench needs at least one prompt")
    n1 = cfg.max_steps
    if n1 < 2:
        raise ValueError("timer resolution insufficient: fewer than 2 generated "
                         "tokens per measurement")

    short = DecodeConfig(max_steps=min(8, n1), mode="greedy", lam=cfg.lam,
                         region=cfg.region, stop_token=None)
    for i in range(warmup):
        p = prompts[i % len(prompts)]
        decode_baseline_sft(packed, p, short)
        decode_staggered(packed, p, short)
        decode_baseline_seq_latent(packed, p, 4, short)

    run_cfg = DecodeConfig(max_steps=n1, mode=cfg.mode, temperature=cfg.temperature,
                           seed=cfg.seed, stop_token=None, lam=cfg.lam, region=cfg.region,
                           rendezvous_timeout=cfg.rendezvous_timeout)
    sft_totals, stag_totals, lat_totals = [], [], []
    ell_g, ell_r, c_g, c_r = [], [], [], []
    for p in prompts:
        r_sft = decode_baseline_sft(packed, p, run_cfg)
        sft_totals.append(r_sft.total_wall * 1e3)
        ell_g.append(median(r_sft.per_step_latency) * 1e6)

        r_stag = decode_staggered(packed, p, run_cfg)
        stag_totals.append(r_stag.total_wall * 1e3)

        r_lat = decode_baseline_seq_latent(packed, p, n1, run_cfg)
        lat_totals.append(r_lat.total_wall * 1e3)

        # reasoner per-token latency over the same transcript
        rcache = packed.rea.new_cache(p.size + n1)
        steps = []
        seq = list(p) + r_sft.tokens
        for tok in seq[:n1]:
            t0 = time.perf_counter()
            packed.rea.step_token(rcache, int(tok))
            steps.append((time.perf_counter() - t0) * 1e6)
        ell_r.append(median(steps))

        # single full-sequence forward cost over prompt + N1 tokens
        full = np.asarray(seq[:p.size + n1], dtype=np.int64)
        gcache = packed.gen.new_cache(full.size)
        t0 = time.perf_counter()
        prefill(packed.gen, gcache, packed.gen.emb[full])
        c_g.append((time.perf_counter() - t0) * 1e6)
        rcache2 = packed.rea.new_cache(full.size)
        t0 = time.perf_counter()
        prefill(packed.rea, rcache2, packed.rea.emb[full])
        c_r.append((time.perf_counter() - t0) * 1e6)

    return BenchReport(
        params_g=packed.params_g, params_r=packed.params_r, n1=n1, n2=n1,
        c_g_us=median(c_g), c_r_us=median(c_r),
        ell_g_us=median(ell_g), ell_r_us=median(ell_r),
        totals_ms={"sft": median(sft_totals),
                   "flythinker_staggered": median(stag_totals),
                   "sequential_latent": median(lat_totals)})
