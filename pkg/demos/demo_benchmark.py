"""Latency/cost benchmark across decoding policies.

Reports parameter counts, single-forward costs, per-token step latencies, and
total wall time for the SFT baseline, the staggered dual-model decoder, and a
sequential latent-prefix baseline that pays for its reasoning serially.
"""

import numpy as np

import duothink as dt

V = 61
N1 = 256
MAX_LEN = 2 * N1 + 32
gen_cfg = dt.ModelConfig(n_layers=4, n_heads=4, d_model=128, d_ff=512,
                         vocab_size=V, max_len=MAX_LEN)
rea_cfg = dt.ModelConfig(n_layers=2, n_heads=2, d_model=64, d_ff=256,
                         vocab_size=V, max_len=MAX_LEN)
duo = dt.DuoModel.init(gen_cfg, rea_cfg, lam=0.5, region="global", seed=5)

rng = np.random.default_rng(1)
prompts = [rng.integers(1, V, size=16) for _ in range(10)]
cfg = dt.DecodeConfig(max_steps=N1, mode="greedy", lam=0.5, region="global")

print(f"benchmarking {N1} generated tokens, medians over {len(prompts)} prompts...")
report = dt.bench(duo, prompts, cfg, warmup=3)

print(f"\nparams: generator {report.params_g:,} | reasoner(+bridge) {report.params_r:,}")
print(f"full-forward cost: generator {report.c_g_us:,.0f} us | "
      f"reasoner {report.c_r_us:,.0f} us")
print(f"per-token step:    generator {report.ell_g_us:,.1f} us | "
      f"reasoner {report.ell_r_us:,.1f} us")
print()
sft = report.totals_ms["sft"]
for policy in report.POLICIES:
    total = report.totals_ms[policy]
    print(f"{policy:22s} {total:8.1f} ms total  {total / report.n1 * 1e3:6.0f} us/token"
          f"   {total / sft:5.2f}x SFT")

report.to_csv("/tmp/duothink_demo_bench.csv")
print("\nwrote /tmp/duothink_demo_bench.csv")
print("round-trips losslessly:",
      dt.BenchReport.from_csv("/tmp/duothink_demo_bench.csv") == report)
