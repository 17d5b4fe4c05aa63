import numpy as np
import pytest

import duothink as dt


def small_gen_cfg(vocab=31, max_len=48, **kw):
    args = dict(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=vocab,
                max_len=max_len)
    args.update(kw)
    return dt.ModelConfig(**args)


def small_rea_cfg(vocab=31, max_len=48, **kw):
    args = dict(n_layers=1, n_heads=2, d_model=16, d_ff=32, vocab_size=vocab,
                max_len=max_len)
    args.update(kw)
    return dt.ModelConfig(**args)


@pytest.fixture(scope="session")
def small_duo():
    """A small random Reasoner+Generator pair with a projection bridge."""
    return dt.DuoModel.init(small_gen_cfg(), small_rea_cfg(), lam=0.5,
                            region="global", seed=7)


@pytest.fixture(scope="session")
def tiny_corpus():
    return dt.generate_corpus(12, 3, seed=3, history_pairs=1)


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba step kernels once before any timed test runs."""
    cfg = dt.ModelConfig(n_layers=1, n_heads=1, d_model=8, d_ff=16,
                         vocab_size=9, max_len=8)
    m = dt.TransformerParams.init(cfg, np.random.default_rng(0))
    packed = dt.PackedModel.from_params(m)
    cache = packed.new_cache()
    packed.step_token(cache, 1)
    packed.step_emb(cache, np.zeros((1, 8), np.float32))
    dt.prefill(packed, packed.new_cache(), packed.emb[np.array([1, 2])])
