"""Joint teacher-forced training of Reasoner + Generator (+ projection).

One Reasoner pass and one Generator pass per step regardless of sequence
length; the loss is masked next-token cross-entropy over response positions
and gradients flow end to end through fusion and the projection bridge.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import transformer as tf
from . import fusion as fu
from .tensor import ParamStore, Tensor
from .transformer import ModelConfig, TransformerParams

F32 = np.float32
F64 = np.float64

PAD_ID = 0

# fixed spawn keys so SFT and dual-model runs draw identical per-component streams
RNG_GENERATOR, RNG_REASONER, RNG_PROJECTION, RNG_DATA, RNG_SAMPLING = range(5)


def component_rng(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(component,)))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    batch_size: int = 4
    steps: int = 200
    seed: int = 0
    lam: float = fu.DEFAULT_LAMBDA
    region: str = "global"
    eval_every: int = 50
    eval_samples: int = 64
    loss_mask_policy: str = "response_only"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_mask_policy != "response_only":
            raise ValueError("loss is always masked to response positions")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2, "adam_eps": self.adam_eps,
            "grad_clip_norm": self.grad_clip_norm, "batch_size": self.batch_size,
            "steps": self.steps, "seed": self.seed, "lam": self.lam,
            "region": self.region, "eval_every": self.eval_every,
            "eval_samples": self.eval_samples,
        }


@dataclass
class TrainMetrics:
    step: int
    train_loss: float
    heldout_loss: float | None
    tokens_per_sec: float
    forwards_per_step: int


class DuoModel:
    """Generator plus optional Reasoner and projection; SFT when reasoner is None."""

    def __init__(self, generator: TransformerParams, reasoner: TransformerParams | None,
                 proj_store: ParamStore | None, fusion_cfg: fu.FusionConfig):
        self.generator = generator
        self.reasoner = reasoner
        self.proj_store = proj_store
        self.fusion = fusion_cfg

    @classmethod
    def init(cls, gen_cfg: ModelConfig, rea_cfg: ModelConfig | None,
             lam: float, region: str, seed: int, dtype=F32) -> "DuoModel":
        gen = TransformerParams.init(gen_cfg, component_rng(seed, RNG_GENERATOR), dtype)
        if rea_cfg is None:
            return cls(gen, None, None, fu.FusionConfig(lam=0.0, region=region))
        rea = TransformerParams.init(rea_cfg, component_rng(seed, RNG_REASONER), dtype)
        proj = None
        if rea_cfg.d_model != gen_cfg.d_model:
            proj = fu.init_projection(rea_cfg.d_model, gen_cfg.d_model,
                                      component_rng(seed, RNG_PROJECTION), dtype)
        fusion_cfg = fu.make_fusion_config(lam, region, rea_cfg, gen_cfg, proj)
        return cls(gen, rea, proj, fusion_cfg)

    @property
    def is_sft(self) -> bool:
        return self.reasoner is None

    def param_groups(self) -> dict[str, ParamStore]:
        groups = {"generator": self.generator.store}
        if self.reasoner is not None:
            groups["reasoner"] = self.reasoner.store
        if self.proj_store is not None:
            groups["projection"] = self.proj_store
        return groups

    def num_params(self) -> dict[str, int]:
        return {g: s.num_params() for g, s in self.param_groups().items()}

    def zero_grad(self):
        for store in self.param_groups().values():
            store.zero_grad()

    def astype(self, dtype) -> "DuoModel":
        gen = self.generator.astype(dtype)
        rea = self.reasoner.astype(dtype) if self.reasoner is not None else None
        proj = self.proj_store.astype(dtype) if self.proj_store is not None else None
        fusion_cfg = fu.FusionConfig(lam=self.fusion.lam, region=self.fusion.region,
                                     projection=proj["proj.w"] if proj is not None else None)
        return DuoModel(gen, rea, proj, fusion_cfg)


@dataclass
class Batch:
    """Right-padded token batch with per-sample lengths and prompt lengths."""
    tokens: np.ndarray        # [B, N] int64
    lengths: np.ndarray       # [B]
    prompt_lens: np.ndarray   # [B]

    @property
    def size(self):
        return self.tokens.shape[0]


def collate(encoded: list[tuple[np.ndarray, int]], pad_id: int = PAD_ID) -> Batch:
    """Pad (ids, prompt_len) pairs to a common length."""
    if not encoded:
        raise ValueError("empty batch")
    lengths = np.array([len(ids) for ids, _ in encoded])
    prompt_lens = np.array([p for _, p in encoded])
    if (prompt_lens >= lengths).any():
        raise ValueError("sample with empty response (all prompt)")
    n = int(lengths.max())
    tokens = np.full((len(encoded), n), pad_id, dtype=np.int64)
    for i, (ids, _) in enumerate(encoded):
        tokens[i, :len(ids)] = ids
    return Batch(tokens=tokens, lengths=lengths, prompt_lens=prompt_lens)


def _loss_targets_and_mask(batch: Batch):
    """Next-token targets plus the response-only loss mask over logit rows."""
    b, n = batch.tokens.shape
    targets = np.zeros((b, n), dtype=np.int64)
    targets[:, :-1] = batch.tokens[:, 1:]
    mask = np.zeros((b, n), dtype=bool)
    for i in range(b):
        mask[i, batch.prompt_lens[i] - 1:batch.lengths[i] - 1] = True
    return targets, mask


def _enhance_mask(batch: Batch, region: str) -> np.ndarray:
    """Rows that receive latent fusion: region rows, real (non-pad) positions only."""
    b, n = batch.tokens.shape
    mask = np.zeros((b, n), dtype=bool)
    for i in range(b):
        layout = fu.PromptLayout(int(batch.prompt_lens[i]),
                                 int(batch.lengths[i] - batch.prompt_lens[i]))
        mask[i] = fu.region_rows(region, layout, n)
        mask[i, batch.lengths[i]:] = False
    return mask


def compute_loss(logits: Tensor, targets: np.ndarray, response_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over response positions (teacher forcing)."""
    v = logits.shape[-1]
    flat = T.reshape(logits, (-1, v)) if logits.data.ndim == 3 else logits
    return T.cross_entropy(flat, np.asarray(targets).reshape(-1),
                           np.asarray(response_mask).reshape(-1))


def forward_loss(model: DuoModel, batch: Batch) -> Tensor:
    """Run the one-pass-per-model pipeline and return the training loss node."""
    targets, loss_mask = _loss_targets_and_mask(batch)
    token_emb = tf.embed_tokens(model.generator, batch.tokens)
    if model.reasoner is not None:
        thoughts = fu.reason_all(model.reasoner, batch.tokens, model.fusion.projection)
        enh = _enhance_mask(batch, model.fusion.region)
        fused = fu.fuse_batch(token_emb, thoughts.vectors, model.fusion, enh)
    else:
        fused = token_emb
    logits = tf.forward_logits_from_embeddings(model.generator, fused)
    return compute_loss(logits, targets, loss_mask)


class Adam:
    """Plain Adam over several named parameter groups, deterministic order."""

    def __init__(self, groups: dict[str, ParamStore], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for gname in sorted(groups):
            for name, tens in groups[gname].items():
                key = f"{gname}.{name}"
                self.m[key] = np.zeros_like(tens.data)
                self.v[key] = np.zeros_like(tens.data)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for gname in sorted(self.groups):
            store = self.groups[gname]
            for name, tens in store.items():
                if tens.grad is None:
                    continue
                key = f"{gname}.{name}"
                dt = tens.data.dtype.type
                g = tens.grad
                m = self.m[key]
                v = self.v[key]
                m *= dt(b1); m += dt(1 - b1) * g
                v *= dt(b2); v += dt(1 - b2) * (g * g)
                update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
                tens.data -= dt(self.lr) * update

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for key in sorted(self.m):
            out[f"opt.m.{key}"] = self.m[key]
            out[f"opt.v.{key}"] = self.v[key]
        return out

    def load_state(self, t: int, tensors: dict[str, np.ndarray]):
        self.t = t
        for key in self.m:
            self.m[key] = tensors[f"opt.m.{key}"].copy()
            self.v[key] = tensors[f"opt.v.{key}"].copy()


def clip_global_norm(groups: dict[str, ParamStore], max_norm: float) -> float:
    total = 0.0
    for gname in sorted(groups):
        for _name, tens in groups[gname].items():
            if tens.grad is not None:
                g = tens.grad.ravel()
                total += float(np.dot(g.astype(F64), g.astype(F64)))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for gname in sorted(groups):
            for _name, tens in groups[gname].items():
                if tens.grad is not None:
                    tens.grad *= tens.grad.dtype.type(factor)
    return norm


def train_step(model: DuoModel, batch: Batch, cfg: TrainConfig, opt: Adam,
               step: int = 0) -> TrainMetrics:
    t0 = time.perf_counter()
    before = tf.forward_count()
    model.zero_grad()
    loss = forward_loss(model, batch)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise T.NonFiniteError(f"non-finite training loss at step {step}")
    T.backward(loss)
    clip_global_norm(model.param_groups(), cfg.grad_clip_norm)
    opt.step()
    dt = time.perf_counter() - t0
    n_tokens = int(batch.lengths.sum())
    return TrainMetrics(step=step, train_loss=loss_val, heldout_loss=None,
                        tokens_per_sec=n_tokens / max(dt, 1e-9),
                        forwards_per_step=tf.forward_count() - before)


def heldout_loss(model: DuoModel, encoded: list[tuple[np.ndarray, int]],
                 batch_size: int) -> float:
    """Teacher-forced mean loss over held-out samples (no updates)."""
    total, count = 0.0, 0
    for i in range(0, len(encoded), batch_size):
        batch = collate(encoded[i:i + batch_size])
        _targets, mask = _loss_targets_and_mask(batch)
        loss = forward_loss(model, batch)
        n = int(mask.sum())
        total += float(loss.data) * n
        count += n
    if count == 0:
        raise T.EmptyLossError("no held-out positions to evaluate")
    return total / count


# --- gradient verification --------------------------------------------------

def grad_check_joint(model: DuoModel, batch: Batch, h: float = 1e-5,
                     rel_floor: float = 1e-6) -> float:
    """Central finite differences vs analytic gradients over every parameter.

    Expects a float64 model (use DuoModel.astype(np.float64)). Returns the
    maximum relative error across all parameters of all groups.
    """
    groups = model.param_groups()
    model.zero_grad()
    loss = forward_loss(model, batch)
    T.backward(loss)
    analytic = {g: {n: s.grad(n).copy() for n, _ in s.items()} for g, s in groups.items()}

    max_rel = 0.0
    for gname in sorted(groups):
        store = groups[gname]
        for name, tens in store.items():
            flat = tens.data.reshape(-1)
            an = analytic[gname][name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(forward_loss(model, batch).data)
                flat[i] = orig - h
                down = float(forward_loss(model, batch).data)
                flat[i] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), abs(an[i]), rel_floor)
                max_rel = max(max_rel, abs(fd - an[i]) / denom)
    return max_rel


# --- full run -----------------------------------------------------------------

METRICS_COLUMNS = ["step", "train_loss", "heldout_loss", "tokens_per_sec",
                   "forwards_per_step"]


def train_run(model: DuoModel, train_encoded: list, heldout_encoded: list,
              cfg: TrainConfig, out_dir: str | Path, config_hash: str = "",
              resume_from: str | Path | None = None,
              checkpoint_name: str = "checkpoint.dt") -> dict:
    """Train with periodic held-out evaluation; write checkpoint + metrics CSV.

    Batches are drawn i.i.d. with the data stream of cfg.seed so a resumed
    run reproduces the unsplit trajectory bit-exactly.
    """
    from . import checkpoint as ckpt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_encoded:
        raise ValueError("empty training set")

    opt = Adam({g: s for g, s in model.param_groups().items()},
               lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    data_rng = component_rng(cfg.seed, RNG_DATA)
    start_step = 0
    rows: list[TrainMetrics] = []

    if resume_from is not None:
        state = ckpt.load_checkpoint(resume_from)
        ckpt.restore_into(state, model, opt)
        data_rng.bit_generator.state = state.rng_state
        start_step = state.step

    eval_set = heldout_encoded[:cfg.eval_samples]

    def eval_row(step, train_loss_val):
        hl = heldout_loss(model, eval_set, cfg.batch_size) if eval_set else float("nan")
        rows.append(TrainMetrics(step=step, train_loss=train_loss_val,
                                 heldout_loss=hl, tokens_per_sec=float("nan"),
                                 forwards_per_step=0))
        return hl

    if start_step == 0:
        eval_row(0, float("nan"))

    last = None
    for step in range(start_step + 1, cfg.steps + 1):
        idx = data_rng.integers(0, len(train_encoded), size=cfg.batch_size)
        batch = collate([train_encoded[int(i)] for i in idx])
        last = train_step(model, batch, cfg, opt, step=step)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            m = TrainMetrics(step=step, train_loss=last.train_loss,
                             heldout_loss=None, tokens_per_sec=last.tokens_per_sec,
                             forwards_per_step=last.forwards_per_step)
            m.heldout_loss = heldout_loss(model, eval_set, cfg.batch_size) if eval_set else float("nan")
            rows.append(m)

    ckpt_path = out_dir / checkpoint_name
    ckpt.save_checkpoint(ckpt_path, ckpt.build_state(model, opt, cfg.steps,
                                                     data_rng.bit_generator.state,
                                                     config_hash))
    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(metrics_path, rows, config_hash)
    return {"checkpoint": ckpt_path, "metrics": metrics_path, "rows": rows,
            "final_heldout": rows[-1].heldout_loss if rows else float("nan")}


def write_metrics_csv(path: str | Path, rows: list[TrainMetrics], config_hash: str = ""):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for m in rows:
            w.writerow([m.step, repr(m.train_loss),
                        repr(m.heldout_loss) if m.heldout_loss is not None else "",
                        repr(m.tokens_per_sec), m.forwards_per_step])
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
