"""duothink: a dual-model think-while-generating decoder.

A small Reasoner LM emits one latent vector per position, fused into a
Generator LM's input embeddings with a one-step lag. Training runs one
forward pass per model regardless of sequence length; inference staggers the
two models on separate workers with no added per-token delay.
"""

import os as _os

# Single-threaded BLAS: faster at these matrix sizes, bit-deterministic, and
# keeps the two staggered decode workers from fighting over cores. Must be
# set before numpy first loads; no effect if numpy is already imported.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")

from .tensor import (Tensor, ParamStore, backward, matmul, softmax_rows,
                     cross_entropy, NonFiniteError, StaleGraphError, EmptyLossError)
from .transformer import (ModelConfig, TransformerParams, forward_hidden,
                          forward_logits, forward_logits_from_embeddings,
                          embed_tokens, forward_count, reset_forward_count,
                          VocabularyError, SequenceLengthError)
from .stepkernel import DecodeCache, PackedModel, incremental_step, prefill, CacheOverflowError
from .fusion import (FusionConfig, LatentThoughts, PromptLayout, reason_all,
                     reason_step, fuse, fuse_batch, project_latent,
                     init_projection, DEFAULT_LAMBDA, LAMBDA_SWEEP, REGIONS)
from .training import (TrainConfig, TrainMetrics, DuoModel, Adam, Batch, collate,
                       compute_loss, forward_loss, train_step, train_run,
                       heldout_loss, grad_check_joint, component_rng,
                       RNG_GENERATOR, RNG_REASONER, RNG_PROJECTION, RNG_DATA,
                       RNG_SAMPLING, PAD_ID)
from .decoding import (DecodeConfig, DecodeResult, BenchReport, PackedDuo,
                       decode_sequential, decode_staggered, decode_baseline_sft,
                       decode_baseline_seq_latent, bench, DeadlockError,
                       timeline_overlap_fraction)
from .data import (StyleSpace, DEFAULT_STYLE_SPACE, Vocab, UserStyle, Sample,
                   Dataset, generate_corpus, bigram_style_accuracy, PAD, SEP, EOS)
from .metrics import (rouge1, rougeL, bleu, segment_eval, SegmentedScores,
                      EmptyReferenceError, METRIC_NAMES)
from .harness import (decode_sample, decode_pairs, score_model, segment_report,
                      write_segment_csv, dump_latents, lambda_sweep)
from .checkpoint import (CheckpointState, save_checkpoint, load_checkpoint,
                         build_state, restore_into, build_model_from_state,
                         CheckpointError, CorruptCheckpointError, ConfigMismatchError)
from .config import RunConfig, ConfigError
from .cli import main as cli_main

__version__ = "0.1.0"
