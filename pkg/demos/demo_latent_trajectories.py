"""Export per-position latent vectors for offline trajectory visualization.

One CSV row per (sample, position) holding the projected Reasoner tap, ready
for t-SNE or any other embedding tool; the dump is independent of lambda
because latents are recorded before fusion.
"""

import csv

import numpy as np

import duothink as dt
from duothink.harness import dump_latents

corpus = dt.generate_corpus(n_users=8, samples_per_user=2, seed=4, history_pairs=1)
v = len(corpus.vocab)
gen_cfg = dt.ModelConfig(2, 2, 32, 64, v, corpus.max_seq_len())
rea_cfg = dt.ModelConfig(1, 2, 16, 32, v, corpus.max_seq_len())
duo = dt.DuoModel.init(gen_cfg, rea_cfg, lam=0.5, region="global", seed=4)

samples = corpus.heldout_samples()[:4]
out = "/tmp/duothink_demo_latents.csv"
n = dump_latents(duo, samples, out)
expected = sum(len(s.encode()[0]) - 1 for s in samples)
print(f"wrote {out}: {n} rows (= sum over samples of sequence length - 1: {expected})")

with open(out) as f:
    rows = list(csv.reader(f))
header, first = rows[0], rows[1]
print(f"columns: {header[:3]} + {len(header) - 3} latent components")
vec = np.array([float(x) for x in first[3:]])
print(f"first row: user {first[0]} sample {first[1]} position {first[2]}, "
      f"|latent| = {np.linalg.norm(vec):.3f}")
print("rows are per-user trajectories over positions; feed them to t-SNE/PCA "
      "to compare users")
