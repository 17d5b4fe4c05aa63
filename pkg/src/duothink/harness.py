"""Evaluation harnesses: decode-and-score, position-segmented tables,
latent-trajectory export, and the lambda sweep."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fusion as fu
from . import metrics as mx
from .data import Dataset, Sample, EOS
from .decoding import DecodeConfig, decode_sequential, decode_baseline_sft
from .training import DuoModel, TrainConfig, train_run

F32 = np.float32


def decode_sample(model: DuoModel, sample: Sample, cfg: DecodeConfig) -> list[int]:
    """Decode one sample's prompt; returns candidate ids with <eos> stripped.

    Non-SFT models decode with their own trained lambda/region settings.
    """
    prompt = sample.prompt_ids()
    if model.is_sft:
        result = decode_baseline_sft(model, prompt, cfg)
    else:
        cfg = replace(cfg, lam=model.fusion.lam, region=model.fusion.region)
        result = decode_sequential(model, prompt, cfg)
    toks = result.tokens
    if cfg.stop_token is not None and toks and toks[-1] == cfg.stop_token:
        toks = toks[:-1]
    return toks


def decode_pairs(model: DuoModel, samples, cfg: DecodeConfig):
    """(candidate, reference) id pairs for scoring."""
    return [(decode_sample(model, s, cfg), list(s.response)) for s in samples]


def score_model(model: DuoModel, samples, cfg: DecodeConfig) -> dict:
    pairs = decode_pairs(model, samples, cfg)
    pairs = [(c, r) for c, r in pairs if r]
    out = {}
    for name in mx.METRIC_NAMES:
        vals = []
        for c, r in pairs:
            vals.append(0.0 if not c else getattr(mx, name)(c, r))
        out[name] = sum(vals) / max(len(vals), 1)
    return out


def segment_report(models: dict[str, DuoModel], samples, cfg: DecodeConfig,
                   k: int = 4) -> dict[str, mx.SegmentedScores]:
    """Position-segmented metric table for each named system."""
    report = {}
    for name, model in models.items():
        pairs = decode_pairs(model, samples, cfg)
        report[name] = mx.segment_eval(pairs, k=k)
    return report


def write_segment_csv(path: str | Path, report: dict, config_hash: str = ""):
    ks = {scores.k for scores in report.values()}
    k = ks.pop()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["system", "metric"] + [f"seg{i + 1}" for i in range(k)] + ["overall"])
        for system, scores in report.items():
            for metric, seg_vals, overall in scores.rows():
                w.writerow([system, metric] + [repr(v) for v in seg_vals] + [repr(overall)])
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")


def dump_latents(model: DuoModel, samples, out_path: str | Path,
                 config_hash: str = "") -> int:
    """One CSV row per (sample, position) with the projected latent vector."""
    if model.reasoner is None:
        raise ValueError("dump_latents needs a Reasoner")
    d_g = model.generator.cfg.d_model
    n_rows = 0
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["user_id", "sample_id", "position"] + [f"v{i}" for i in range(d_g)])
        for s in samples:
            ids, _p = s.encode()
            thoughts = fu.reason_all(model.reasoner, ids, model.fusion.projection)
            vecs = thoughts.vectors.data
            for pos in range(vecs.shape[0]):
                w.writerow([s.user_id, s.sample_id, pos] + [repr(float(x)) for x in vecs[pos]])
                n_rows += 1
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
    return n_rows


SWEEP_CSV_HEADER = ["lambda", "heldout_loss", "rouge1", "rougeL", "bleu"]


def lambda_sweep(gen_cfg, rea_cfg, dataset: Dataset, train_cfg: TrainConfig,
                 lambdas, out_dir: str | Path, decode_cfg: DecodeConfig | None = None,
                 n_eval: int = 16, config_hash: str = "") -> list[dict]:
    """Train one model per lambda and emit one metrics row per lambda."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_enc = [s.encode() for s in dataset.train_samples()]
    held = dataset.heldout_samples()
    held_enc = [s.encode() for s in held]
    eval_samples = held[:n_eval]
    if decode_cfg is None:
        decode_cfg = DecodeConfig(max_steps=24, mode="greedy", stop_token=EOS)
    longest_prompt = max(len(s.prompt_ids()) for s in eval_samples) if eval_samples else 0
    room = min(gen_cfg.max_len, rea_cfg.max_len) - longest_prompt
    if decode_cfg.max_steps > room:
        decode_cfg = replace(decode_cfg, max_steps=max(room, 1))
    rows = []
    for lam in lambdas:
        cfg = replace(train_cfg, lam=float(lam))
        model = DuoModel.init(gen_cfg, rea_cfg, cfg.lam, cfg.region, cfg.seed)
        run = train_run(model, train_enc, held_enc, cfg,
                        out_dir / f"lam_{lam}", config_hash)
        dcfg = replace(decode_cfg, lam=cfg.lam, region=cfg.region)
        scores = score_model(model, eval_samples, dcfg)
        rows.append({"lambda": float(lam), "heldout_loss": run["final_heldout"], **scores})
    csv_path = out_dir / "lambda_sweep.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_CSV_HEADER)
        for row in rows:
            w.writerow([repr(row["lambda"]), repr(row["heldout_loss"]),
                        repr(row["rouge1"]), repr(row["rougeL"]), repr(row["bleu"])])
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
    return rows
