"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured runtime. Model sizes, tolerances, and budgets are as stated."""

import os
import time

import numpy as np
import pytest

import duothink as dt
import duothink.fusion as fu
import duothink.harness as hz
import duothink.metrics as mx
import duothink.tensor as T
import duothink.training as tr
from duothink.decoding import PackedDuo


def _report(n, label, t0, budget_s):
    elapsed = time.perf_counter() - t0
    print(f"\nACCEPTANCE {n} PASS: {label} ({elapsed:.1f}s, budget {budget_s}s)")
    assert elapsed <= budget_s, f"criterion {n} exceeded its runtime budget"


def _bench_models(max_len, seed=99, vocab=61):
    gen = dt.ModelConfig(n_layers=4, n_heads=4, d_model=128, d_ff=512,
                         vocab_size=vocab, max_len=max_len)
    rea = dt.ModelConfig(n_layers=2, n_heads=2, d_model=64, d_ff=256,
                         vocab_size=vocab, max_len=max_len)
    return dt.DuoModel.init(gen, rea, lam=0.5, region="global", seed=seed)


def test_criterion_1_parallel_equals_sequential_reasoning():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    for trial in range(100):
        layers = int(rng.integers(1, 3))
        heads = int(rng.choice([1, 2]))
        d_r = int(rng.choice([8, 16, 32]))
        d_g = int(rng.choice([8, 16, 32]))
        v = int(rng.integers(8, 40))
        n = int(rng.integers(2, 24))
        rea_cfg = dt.ModelConfig(layers, heads, d_r, 2 * d_r, v, 32)
        rea = dt.TransformerParams.init(rea_cfg, np.random.default_rng(3000 + trial))
        proj_t = None
        proj_np = None
        if d_r != d_g:
            store = fu.init_projection(d_r, d_g, np.random.default_rng(4000 + trial))
            proj_t = store["proj.w"]
            proj_np = np.ascontiguousarray(proj_t.data.astype(np.float32))
        toks = rng.integers(1, v, size=n)
        batch_vectors = dt.reason_all(rea, toks, proj_t).vectors.data
        packed = dt.PackedModel.from_params(rea)
        cache = packed.new_cache()
        for j in range(n - 1):
            step_vec = dt.reason_step(packed, cache, int(toks[j]), proj_np)
            diff = np.abs(step_vec - batch_vectors[j]).max()
            assert diff <= 1e-5, f"trial {trial} pos {j}: {diff}"
    _report(1, "reason_all == step-by-step reason_step over 100 random pairs", t0, 60)


def test_criterion_2_staggered_equals_sequential_decoding():
    t0 = time.perf_counter()
    duo = _bench_models(max_len=150)
    packed = PackedDuo.from_duo(duo)
    rng = np.random.default_rng(1002)
    v = duo.generator.cfg.vocab_size
    for trial in range(50):
        prompt = rng.integers(1, v, size=int(rng.integers(1, 12)))
        mode = "greedy" if trial % 2 == 0 else "sample"
        cfg = dt.DecodeConfig(max_steps=128, mode=mode, temperature=1.2,
                              seed=777 + trial, lam=0.5, region="global")
        seq = dt.decode_sequential(packed, prompt, cfg)
        stag = dt.decode_staggered(packed, prompt, cfg)
        assert stag.tokens == seq.tokens, f"trial {trial} mode {mode}"
        assert len(seq.tokens) == 128
    _report(2, "staggered == sequential, token-exact, greedy + sampling, 50 prompts",
            t0, 120)


def test_criterion_3_sft_reduction_bit_exact(tiny_corpus):
    t0 = time.perf_counter()
    # (a) full-pipeline logits at lambda=0 equal the standalone Generator's
    gen_cfg = dt.ModelConfig(2, 2, 32, 64, 47, 64)
    rea_cfg = dt.ModelConfig(1, 2, 16, 32, 47, 64)
    duo = dt.DuoModel.init(gen_cfg, rea_cfg, lam=0.0, region="global", seed=303)
    toks = np.arange(1, 20)
    thoughts = dt.reason_all(duo.reasoner, toks, duo.fusion.projection)
    fused = dt.fuse(dt.embed_tokens(duo.generator, toks), thoughts,
                    fu.FusionConfig(lam=0.0), fu.PromptLayout(5, 14))
    pipeline = dt.forward_logits_from_embeddings(duo.generator, fused).data
    standalone = dt.forward_logits(duo.generator, toks).data
    assert np.array_equal(pipeline, standalone)

    # (b) 200-step lambda=0 run matches a pure-SFT run bit-exactly
    v = len(tiny_corpus.vocab)
    g = dt.ModelConfig(2, 2, 32, 64, v, tiny_corpus.max_seq_len())
    r = dt.ModelConfig(1, 2, 16, 32, v, tiny_corpus.max_seq_len())
    train_enc = [s.encode() for s in tiny_corpus.train_samples()]
    cfg = dt.TrainConfig(learning_rate=1e-3, batch_size=2, steps=200, seed=303,
                         lam=0.0, eval_every=10 ** 9)

    def run(model):
        opt = dt.Adam(model.param_groups(), lr=cfg.learning_rate)
        data_rng = dt.component_rng(cfg.seed, dt.RNG_DATA)
        losses = []
        for step in range(cfg.steps):
            idx = data_rng.integers(0, len(train_enc), size=cfg.batch_size)
            batch = dt.collate([train_enc[int(i)] for i in idx])
            losses.append(dt.train_step(model, batch, cfg, opt, step).train_loss)
        return losses

    duo_losses = run(dt.DuoModel.init(g, r, 0.0, "global", seed=303))
    sft_losses = run(dt.DuoModel.init(g, None, 0.0, "global", seed=303))
    assert duo_losses == sft_losses
    _report(3, "lambda=0 reduces to SFT bit-exactly (logits + 200-step trajectory)",
            t0, 120)


def test_criterion_4_joint_gradient_correctness():
    t0 = time.perf_counter()
    gen = dt.ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, vocab_size=11,
                         max_len=12)
    rea = dt.ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=8, vocab_size=11,
                         max_len=12)
    rng = np.random.default_rng(1004)
    batch = dt.collate([(rng.integers(1, 11, size=9), 4)])

    duo64 = dt.DuoModel.init(gen, rea, lam=0.5, region="global", seed=404).astype(np.float64)
    err = dt.grad_check_joint(duo64, batch)
    assert err <= 1e-3, f"projection bundle max rel err {err}"

    same = dt.ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, vocab_size=11,
                          max_len=12)
    duo_same = dt.DuoModel.init(gen, same, lam=0.5, region="global",
                                seed=405).astype(np.float64)
    err2 = dt.grad_check_joint(duo_same, batch)
    assert err2 <= 1e-3, f"width-matched bundle max rel err {err2}"

    duo_zero = dt.DuoModel.init(gen, rea, lam=0.0, region="global",
                                seed=406).astype(np.float64)
    duo_zero.zero_grad()
    loss = dt.forward_loss(duo_zero, batch)
    T.backward(loss)
    for name, _ in duo_zero.reasoner.store.items():
        g = duo_zero.reasoner.store.grad(name)
        assert np.array_equal(g, np.zeros_like(g)), name
    _report(4, f"joint finite-difference check (max rel err {max(err, err2):.2e}; "
               f"lambda=0 theta-grads exactly 0)", t0, 300)


def test_criterion_5_training_parallelism():
    t0 = time.perf_counter()
    for t_resp in (4, 16, 64, 256):
        max_len = t_resp + 8
        gen = dt.ModelConfig(2, 2, 32, 64, 31, max_len)
        rea = dt.ModelConfig(1, 2, 16, 32, 31, max_len)
        duo = dt.DuoModel.init(gen, rea, lam=0.5, region="global", seed=505)
        cfg = dt.TrainConfig(learning_rate=1e-3, batch_size=2, steps=1, seed=505, lam=0.5)
        opt = dt.Adam(duo.param_groups(), lr=1e-3)
        rng = np.random.default_rng(t_resp)
        ids = rng.integers(1, 31, size=(2, 4 + t_resp))
        m = dt.train_step(duo, dt.collate([(row, 4) for row in ids]), cfg, opt)
        assert m.forwards_per_step == 2, f"T={t_resp}"
    _report(5, "exactly 2 model forwards per step for T in {4,16,64,256}", t0, 60)


def test_criterion_6_inference_efficiency():
    t0 = time.perf_counter()
    assert os.cpu_count() >= 2, "needs >= 2 hardware threads"
    duo = _bench_models(max_len=544)  # room for the n_latent=N1 prefix baseline
    rng = np.random.default_rng(1006)
    prompts = [rng.integers(1, 61, size=16) for _ in range(10)]
    cfg = dt.DecodeConfig(max_steps=256, mode="greedy", lam=0.5, region="global")
    report = dt.bench(duo, prompts, cfg, warmup=3)

    per_tok_sft = report.totals_ms["sft"] / report.n1
    per_tok_stag = report.totals_ms["flythinker_staggered"] / report.n1
    ratio_stag = per_tok_stag / per_tok_sft
    ratio_lat = report.totals_ms["sequential_latent"] / report.totals_ms["sft"]
    assert ratio_stag <= 1.25, f"staggered/sft per-token ratio {ratio_stag:.3f}"
    assert ratio_lat >= 1.6, f"sequential-latent/sft total ratio {ratio_lat:.3f}"
    assert (report.totals_ms["sft"] <= report.totals_ms["flythinker_staggered"]
            <= report.totals_ms["sequential_latent"])
    assert report.ell_r_us < report.ell_g_us
    assert report.params_r < report.params_g

    stag = dt.decode_staggered(duo, prompts[0], cfg)
    overlap = dt.timeline_overlap_fraction(stag)
    assert overlap >= 0.9, f"workers overlapped in only {overlap:.0%} of steps"
    _report(6, f"staggered/sft = {ratio_stag:.3f} (<=1.25), "
               f"seq-latent/sft = {ratio_lat:.2f} (>=1.6), "
               f"worker overlap {overlap:.0%}", t0, 300)


SMOKE_SEEDS = (11, 12, 13)


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    """3-seed FlyThinker + SFT smoke training at the stated configuration."""
    corpus = dt.generate_corpus(200, 4, seed=77)
    assert len(corpus.vocab) <= 512
    max_len = corpus.max_seq_len() + 24  # headroom for held-out decoding
    gen = dt.ModelConfig(4, 4, 128, 512, len(corpus.vocab), max_len)
    rea = dt.ModelConfig(2, 2, 64, 256, len(corpus.vocab), max_len)
    train_enc = [s.encode() for s in corpus.train_samples()]
    held_enc = [s.encode() for s in corpus.heldout_samples()]
    out_root = tmp_path_factory.mktemp("smoke")
    results = {"ft": [], "sft": [], "corpus": corpus, "gen": gen, "rea": rea,
               "dir": out_root}
    t0 = time.perf_counter()
    for seed in SMOKE_SEEDS:
        for kind, rcfg, lam in (("ft", rea, 0.5), ("sft", None, 0.0)):
            cfg = dt.TrainConfig(learning_rate=1e-3, batch_size=4, steps=2000,
                                 seed=seed, lam=lam, eval_every=2000,
                                 eval_samples=64)
            model = dt.DuoModel.init(gen, rcfg, lam, "global", seed)
            run = tr.train_run(model, train_enc, held_enc, cfg,
                               out_root / f"{kind}_{seed}")
            rows = run["rows"]
            results[kind].append({"seed": seed, "step0": rows[0].heldout_loss,
                                  "final": rows[-1].heldout_loss, "model": model})
    results["elapsed"] = time.perf_counter() - t0
    return results


def test_criterion_7_smoke_training(smoke_runs):
    t0 = time.perf_counter() - smoke_runs["elapsed"]
    ft, sft = smoke_runs["ft"], smoke_runs["sft"]
    for r in ft:
        drop = (r["step0"] - r["final"]) / r["step0"]
        assert drop >= 0.30, f"seed {r['seed']}: held-out loss dropped only {drop:.1%}"
    ft_mean = float(np.mean([r["final"] for r in ft]))
    sft_mean = float(np.mean([r["final"] for r in sft]))
    assert ft_mean <= sft_mean + 0.02, \
        f"FlyThinker {ft_mean:.4f} vs SFT {sft_mean:.4f} (+0.02 allowed)"
    _report(7, f"2k-step smoke x3 seeds: heldout {ft[0]['step0']:.3f} -> "
               f"ft {ft_mean:.4f} / sft {sft_mean:.4f}", t0, 900)


def test_criterion_8_metrics_suite_and_segment_harness(smoke_runs):
    t0 = time.perf_counter()
    # exact metric examples
    assert mx.rouge1("a b c".split(), "a b d".split()) == pytest.approx(2 / 3)
    assert mx.rouge1("a b".split(), "c d".split()) == 0.0
    assert mx.rougeL("a c b".split(), "a b c".split()) == pytest.approx(2 / 3)
    assert mx.rougeL([1, 2, 3], [1, 2, 3]) == 1.0
    assert mx.bleu([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    ref, cand = "a b c d e f".split(), "a b c d".split()
    assert mx.bleu(cand, ref) == pytest.approx(np.exp(1 - 6 / 4))
    rng = np.random.default_rng(8)
    pairs = [(list(rng.integers(0, 5, size=10)), list(rng.integers(0, 5, size=10)))
             for _ in range(4)]
    k1 = mx.segment_eval(pairs, k=1)
    for name in mx.METRIC_NAMES:
        assert k1.segments[name][0] == k1.overall[name]

    # four-segment table from both trained checkpoints
    corpus = smoke_runs["corpus"]
    held = corpus.heldout_samples()[:12]
    dcfg = dt.DecodeConfig(max_steps=16, mode="greedy", stop_token=dt.EOS,
                           lam=0.5, region="global")
    report = hz.segment_report({"flythinker": smoke_runs["ft"][0]["model"],
                                "sft": smoke_runs["sft"][0]["model"]}, held, dcfg, k=4)
    out_csv = smoke_runs["dir"] / "segments.csv"
    hz.write_segment_csv(out_csv, report, config_hash="acc8")
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "system,metric,seg1,seg2,seg3,seg4,overall"
    assert len([ln for ln in lines if ln.startswith("flythinker")]) == 3
    assert len([ln for ln in lines if ln.startswith("sft")]) == 3
    for system in ("flythinker", "sft"):
        for name in mx.METRIC_NAMES:
            assert len(report[system].segments[name]) == 4
    _report(8, "metric examples exact; 4-segment table emitted for both systems",
            t0, 60)


def test_criterion_9_lambda_sweep(tmp_path, tiny_corpus):
    t0 = time.perf_counter()
    sweep_set = (0.0, 0.2, 0.5, 1.0, 1.5, 2.0, 5.0)
    assert tuple(dt.LAMBDA_SWEEP) == sweep_set
    v = len(tiny_corpus.vocab)
    gen = dt.ModelConfig(2, 2, 32, 64, v, tiny_corpus.max_seq_len())
    rea = dt.ModelConfig(1, 2, 16, 32, v, tiny_corpus.max_seq_len())
    cfg = dt.TrainConfig(learning_rate=2e-3, batch_size=4, steps=120, seed=909,
                         lam=0.5, eval_every=120, eval_samples=8)
    rows = hz.lambda_sweep(gen, rea, tiny_corpus, cfg, sweep_set,
                           tmp_path / "sweep", n_eval=6, config_hash="acc9")
    assert [row["lambda"] for row in rows] == list(sweep_set)
    csv_lines = (tmp_path / "sweep" / "lambda_sweep.csv").read_text().splitlines()
    assert csv_lines[0] == "lambda,heldout_loss,rouge1,rougeL,bleu"
    data_lines = [ln for ln in csv_lines[1:] if ln and not ln.startswith("#")]
    assert len(data_lines) == len(sweep_set)
    for row in rows:
        assert np.isfinite(row["heldout_loss"])
    _report(9, "lambda sweep emitted one metrics row per lambda in "
               f"{{{', '.join(str(x) for x in sweep_set)}}}", t0, 1800)


def test_criterion_10_persistence(tmp_path, tiny_corpus):
    t0 = time.perf_counter()
    import duothink.checkpoint as ck

    v = len(tiny_corpus.vocab)
    gen = dt.ModelConfig(2, 2, 32, 64, v, tiny_corpus.max_seq_len())
    rea = dt.ModelConfig(1, 2, 16, 32, v, tiny_corpus.max_seq_len())
    model = dt.DuoModel.init(gen, rea, 0.5, "global", seed=1010)
    opt = dt.Adam(model.param_groups(), lr=1e-3)
    state = ck.build_state(model, opt, step=5,
                           rng_state=dt.component_rng(1, dt.RNG_DATA).bit_generator.state,
                           config_hash="acc10")
    p1, p2 = tmp_path / "a.dt", tmp_path / "b.dt"
    ck.save_checkpoint(p1, state)
    ck.save_checkpoint(p2, ck.load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()

    train_enc = [s.encode() for s in tiny_corpus.train_samples()]
    held_enc = [s.encode() for s in tiny_corpus.heldout_samples()]

    def cfg(steps):
        return dt.TrainConfig(learning_rate=1e-3, batch_size=2, steps=steps,
                              seed=6, lam=0.5, eval_every=5, eval_samples=4)

    full_model = dt.DuoModel.init(gen, rea, 0.5, "global", seed=6)
    full = tr.train_run(full_model, train_enc, held_enc, cfg(10), tmp_path / "full")
    half_model = dt.DuoModel.init(gen, rea, 0.5, "global", seed=6)
    tr.train_run(half_model, train_enc, held_enc, cfg(5), tmp_path / "half")
    res_model = dt.DuoModel.init(gen, rea, 0.5, "global", seed=6)
    resumed = tr.train_run(res_model, train_enc, held_enc, cfg(10), tmp_path / "res",
                           resume_from=tmp_path / "half" / "checkpoint.dt")
    full_by_step = {m.step: m.train_loss for m in full["rows"] if m.step > 5}
    for m in resumed["rows"]:
        if m.step > 5:
            assert full_by_step[m.step] == m.train_loss
    assert (tmp_path / "full" / "checkpoint.dt").read_bytes() \
        == (tmp_path / "res" / "checkpoint.dt").read_bytes()
    _report(10, "checkpoint round-trip byte-identical; split-run resume bit-exact",
            t0, 120)
