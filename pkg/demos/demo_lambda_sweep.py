"""Sweep the latent-signal strength and emit one metrics row per value.

lambda = 0 is the SFT reduction; moderate values inject the Reasoner's signal;
large values let it drown out the token embeddings.
"""

import duothink as dt
from duothink.harness import lambda_sweep

corpus = dt.generate_corpus(n_users=16, samples_per_user=3, seed=21, history_pairs=1)
v = len(corpus.vocab)
gen_cfg = dt.ModelConfig(2, 2, 32, 64, v, corpus.max_seq_len())
rea_cfg = dt.ModelConfig(1, 2, 16, 32, v, corpus.max_seq_len())
train_cfg = dt.TrainConfig(learning_rate=2e-3, batch_size=4, steps=150, seed=21,
                           eval_every=150, eval_samples=8)

print(f"sweeping lambda over {dt.LAMBDA_SWEEP} at {train_cfg.steps} steps each...")
rows = lambda_sweep(gen_cfg, rea_cfg, corpus, train_cfg, dt.LAMBDA_SWEEP,
                    "/tmp/duothink_demo/sweep", n_eval=8)

print(f"\n{'lambda':>7} {'heldout':>9} {'rouge1':>8} {'rougeL':>8} {'bleu':>8}")
for r in rows:
    print(f"{r['lambda']:7.1f} {r['heldout_loss']:9.4f} {r['rouge1']:8.4f} "
          f"{r['rougeL']:8.4f} {r['bleu']:8.4f}")
print("\nwrote /tmp/duothink_demo/sweep/lambda_sweep.csv")
