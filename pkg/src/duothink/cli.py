"""Command-line entry point: gen-data, train, decode, eval, bench, grad-check,
dump-latents. Exit 0 on success, 2 on usage errors, 3 on validation errors,
1 on runtime failures; errors print one machine-parseable line to stderr."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as dz
from . import harness
from .config import ConfigError, RunConfig
from .decoding import bench as run_bench
from .training import DuoModel, collate, grad_check_joint, train_run

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2, 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duothink",
                                description="dual-model think-while-generating runner")
    sub = p.add_subparsers(dest="command", required=True)
    for name, hlp in [
        ("gen-data", "generate the synthetic corpus + manifest"),
        ("train", "train a model, write checkpoint + metrics CSV"),
        ("decode", "decode held-out prompts from a checkpoint"),
        ("eval", "metrics + position-segmented table for a checkpoint"),
        ("bench", "latency/cost benchmark, writes the bench CSV"),
        ("grad-check", "finite-difference verification of joint gradients"),
        ("dump-latents", "export latent vectors per (sample, position) to CSV"),
        ("sweep", "train/eval one model per lambda in the sweep set"),
    ]:
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--config", required=True, help="path to the run config JSON")
        if name == "train":
            sp.add_argument("--resume", default=None, help="checkpoint to resume from")
            sp.add_argument("--allow-hash-mismatch", action="store_true")
            sp.add_argument("--sft", action="store_true",
                            help="train the Generator only (ignore reasoner section)")
        if name in ("decode", "eval", "dump-latents"):
            sp.add_argument("--checkpoint", default=None)
        if name == "eval":
            sp.add_argument("--sft-checkpoint", default=None,
                            help="optional second system for the segment table")
    return p


def _load_dataset(cfg: RunConfig) -> dz.Dataset:
    path = cfg.resolve(cfg.dataset_path, "dataset.jsonl")
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found at {path}; run gen-data first")
    return dz.Dataset.load_jsonl(path)


def _cmd_gen_data(cfg: RunConfig) -> int:
    ds = dz.generate_corpus(cfg.corpus["n_users"], cfg.corpus["samples_per_user"],
                            seed=cfg.corpus["seed"],
                            heldout_frac=cfg.corpus["heldout_frac"],
                            history_pairs=cfg.corpus["history_pairs"])
    if ds.max_seq_len() > cfg.generator.max_len:
        raise ConfigError(f"corpus max sequence {ds.max_seq_len()} exceeds "
                          f"generator max_len {cfg.generator.max_len}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.resolve(cfg.dataset_path, "dataset.jsonl")
    corpus_hash = ds.save_jsonl(path, cfg.config_hash)
    print(f"wrote {path} ({len(ds.samples)} samples, vocab {len(ds.vocab)}, "
          f"corpus_hash {corpus_hash[:12]})")
    return EXIT_OK


def _cmd_train(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg)
    rea_cfg = None if args.sft else cfg.reasoner
    model = DuoModel.init(cfg.generator, rea_cfg, cfg.lam, cfg.region, cfg.seed)
    train_enc = [s.encode() for s in ds.train_samples()]
    held_enc = [s.encode() for s in ds.heldout_samples()]
    run = train_run(model, train_enc, held_enc, cfg.train, cfg.out_dir,
                    cfg.config_hash, resume_from=args.resume)
    print(f"wrote {run['checkpoint']} and {run['metrics']} "
          f"(final heldout loss {run['final_heldout']:.4f})")
    return EXIT_OK


def _load_model(cfg: RunConfig, checkpoint_arg) -> DuoModel:
    path = cfg.resolve(checkpoint_arg or cfg.checkpoint_path, "checkpoint.dt")
    state = ckpt.load_checkpoint(path)
    return ckpt.build_model_from_state(state)


def _cmd_decode(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg)
    model = _load_model(cfg, args.checkpoint)
    held = ds.heldout_samples() or ds.samples
    sample = held[cfg.sample_index % len(held)]
    toks = harness.decode_sample(model, sample, cfg.decode)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "decode.txt"
    with open(out, "w") as f:
        f.write(" ".join(str(t) for t in toks) + "\n")
        f.write(" ".join(ds.vocab.decode(toks)) + "\n")
        f.write(f"# config_hash={cfg.config_hash}\n")
    print(f"wrote {out}: {' '.join(ds.vocab.decode(toks))}")
    return EXIT_OK


def _cmd_eval(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg)
    model = _load_model(cfg, args.checkpoint)
    systems = {"model": model}
    if args.sft_checkpoint:
        systems["sft"] = ckpt.build_model_from_state(ckpt.load_checkpoint(args.sft_checkpoint))
    held = ds.heldout_samples()[:cfg.sweep_n_eval]
    report = harness.segment_report(systems, held, cfg.decode, k=4)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "segments.csv"
    harness.write_segment_csv(out, report, cfg.config_hash)
    for system, scores in report.items():
        for metric, segs, overall in scores.rows():
            print(f"{system} {metric}: overall {overall:.4f} segments "
                  + " ".join(f"{v:.4f}" for v in segs))
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_bench(cfg: RunConfig) -> int:
    if cfg.reasoner is None:
        raise ConfigError("bench requires a reasoner section")
    model = DuoModel.init(cfg.generator, cfg.reasoner, cfg.lam, cfg.region, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n1 = cfg.bench["max_steps"]
    need = 2 * n1 + 17  # sequential-latent baseline holds n_latent extra positions
    if cfg.generator.max_len < need or cfg.reasoner.max_len < need:
        raise ConfigError(f"bench needs max_len >= {need} on both models")
    prompts = [rng.integers(3, cfg.generator.vocab_size, size=16)
               for _ in range(cfg.bench["n_prompts"])]
    dcfg = cfg.decode
    dcfg.max_steps = n1
    dcfg.stop_token = None
    report = run_bench(model, prompts, dcfg, warmup=cfg.bench["warmup"])
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "bench.csv"
    report.to_csv(out, cfg.config_hash)
    for policy, total in report.totals_ms.items():
        print(f"{policy}: {total:.1f} ms total, "
              f"{total / report.n1 * 1e3:.0f} us/token")
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_grad_check(cfg: RunConfig) -> int:
    model = DuoModel.init(cfg.generator, cfg.reasoner, cfg.lam, cfg.region,
                          cfg.seed).astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    v = cfg.generator.vocab_size
    n = min(8, cfg.generator.max_len)
    ids = rng.integers(1, v, size=n)
    batch = collate([(ids, max(2, n // 2))])
    err = grad_check_joint(model, batch)
    print(f"max relative gradient error: {err:.3e}")
    return EXIT_OK if err <= 1e-3 else EXIT_RUNTIME


def _cmd_dump_latents(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg)
    model = _load_model(cfg, args.checkpoint)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "latents.csv"
    n = harness.dump_latents(model, ds.heldout_samples()[:cfg.sweep_n_eval], out,
                             cfg.config_hash)
    print(f"wrote {out} ({n} rows)")
    return EXIT_OK


def _cmd_sweep(cfg: RunConfig) -> int:
    if cfg.reasoner is None:
        raise ConfigError("sweep requires a reasoner section")
    ds = _load_dataset(cfg)
    rows = harness.lambda_sweep(cfg.generator, cfg.reasoner, ds, cfg.train,
                                cfg.sweep_lambdas, cfg.out_dir / "sweep",
                                decode_cfg=cfg.decode, n_eval=cfg.sweep_n_eval,
                                config_hash=cfg.config_hash)
    for row in rows:
        print(f"lambda={row['lambda']}: heldout {row['heldout_loss']:.4f} "
              f"rouge1 {row['rouge1']:.4f} bleu {row['bleu']:.4f}")
    print(f"wrote {cfg.out_dir / 'sweep' / 'lambda_sweep.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        cfg = RunConfig.from_file(args.config)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg)
        if args.command == "train":
            return _cmd_train(cfg, args)
        if args.command == "decode":
            return _cmd_decode(cfg, args)
        if args.command == "eval":
            return _cmd_eval(cfg, args)
        if args.command == "bench":
            return _cmd_bench(cfg)
        if args.command == "grad-check":
            return _cmd_grad_check(cfg)
        if args.command == "dump-latents":
            return _cmd_dump_latents(cfg, args)
        if args.command == "sweep":
            return _cmd_sweep(cfg)
        print(f"error: usage: unknown command {args.command!r}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error: validation: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - single-line machine-parseable contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
