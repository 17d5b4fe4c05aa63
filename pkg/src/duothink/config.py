"""Run configuration: one JSON file of record per experiment, schema-validated
with unknown keys rejected, hashed for provenance."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .transformer import ModelConfig
from .training import TrainConfig
from .decoding import DecodeConfig
from .fusion import REGIONS, DEFAULT_LAMBDA, LAMBDA_SWEEP
from .data import EOS


class ConfigError(ValueError):
    pass


_INT = ("int",)
_NUM = ("int", "float")
_MODEL_SCHEMA = {
    "n_layers": (_INT, True), "n_heads": (_INT, True), "d_model": (_INT, True),
    "d_ff": (_INT, True), "vocab_size": (_INT, True), "max_len": (_INT, True),
    "tie_unembed": (("bool",), False),
}
_SCHEMA = {
    "seed": (_INT, True),
    "out_dir": (("str",), True),
    "generator": (_MODEL_SCHEMA, True),
    "reasoner": (_MODEL_SCHEMA, False),      # null or absent -> SFT-only model
    "fusion": ({
        "lambda": (_NUM, False), "region": (("str",), False),
    }, False),
    "train": ({
        "learning_rate": (_NUM, True), "batch_size": (_INT, True),
        "steps": (_INT, True), "eval_every": (_INT, False),
        "eval_samples": (_INT, False), "adam_beta1": (_NUM, False),
        "adam_beta2": (_NUM, False), "adam_eps": (_NUM, False),
        "grad_clip_norm": (_NUM, False),
    }, False),
    "decode": ({
        "max_steps": (_INT, False), "mode": (("str",), False),
        "temperature": (_NUM, False), "seed": (_INT, False),
        "stop_token": (_INT, False), "sample_index": (_INT, False),
        "rendezvous_timeout": (_NUM, False),
    }, False),
    "corpus": ({
        "n_users": (_INT, False), "samples_per_user": (_INT, False),
        "seed": (_INT, False), "heldout_frac": (_NUM, False),
        "history_pairs": (_INT, False),
    }, False),
    "bench": ({
        "n_prompts": (_INT, False), "warmup": (_INT, False),
        "max_steps": (_INT, False),
    }, False),
    "sweep": ({
        "lambdas": (("list",), False), "n_eval": (_INT, False),
    }, False),
    "paths": ({
        "dataset": (("str",), False), "checkpoint": (("str",), False),
    }, False),
}

_TYPE_CHECKS = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, float),
    "str": lambda v: isinstance(v, str),
    "bool": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
}


def _validate_section(section: dict, schema: dict, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    for key in section:
        if key not in schema:
            raise ConfigError(f"{where}: unknown key {key!r}")
    for key, (types, required) in schema.items():
        if key not in section or section[key] is None:
            if required:
                raise ConfigError(f"{where}: missing required key {key!r}")
            continue
        val = section[key]
        if isinstance(types, dict):
            _validate_section(val, types, f"{where}.{key}")
        elif not any(_TYPE_CHECKS[t](val) for t in types):
            raise ConfigError(f"{where}.{key}: expected {'/'.join(types)}, "
                              f"got {type(val).__name__}")


class RunConfig:
    """Validated experiment configuration; hashed over the resolved content."""

    def __init__(self, raw: dict):
        _validate_section(raw, _SCHEMA, "config")
        fus = raw.get("fusion") or {}
        region = fus.get("region", "global")
        if region not in REGIONS:
            raise ConfigError(f"fusion.region must be one of {REGIONS}")
        self.raw = raw
        self.seed = raw["seed"]
        self.out_dir = Path(os.environ.get("DUOTHINK_OUT", raw["out_dir"]))
        self.generator = ModelConfig(**raw["generator"])
        self.reasoner = ModelConfig(**raw["reasoner"]) if raw.get("reasoner") else None
        self.lam = float(fus.get("lambda", DEFAULT_LAMBDA))
        self.region = region
        tr = raw.get("train") or {}
        self.train = TrainConfig(
            learning_rate=float(tr.get("learning_rate", 1e-3)),
            adam_beta1=float(tr.get("adam_beta1", 0.9)),
            adam_beta2=float(tr.get("adam_beta2", 0.999)),
            adam_eps=float(tr.get("adam_eps", 1e-8)),
            grad_clip_norm=float(tr.get("grad_clip_norm", 1.0)),
            batch_size=tr.get("batch_size", 4), steps=tr.get("steps", 200),
            seed=self.seed, lam=self.lam, region=self.region,
            eval_every=tr.get("eval_every", 50),
            eval_samples=tr.get("eval_samples", 64),
        )
        dc = raw.get("decode") or {}
        self.decode = DecodeConfig(
            max_steps=dc.get("max_steps", 24), mode=dc.get("mode", "greedy"),
            temperature=float(dc.get("temperature", 1.0)), seed=dc.get("seed", self.seed),
            stop_token=dc.get("stop_token", EOS), lam=self.lam, region=self.region,
            rendezvous_timeout=float(dc.get("rendezvous_timeout", 30.0)),
        )
        self.sample_index = dc.get("sample_index", 0)
        co = raw.get("corpus") or {}
        self.corpus = {
            "n_users": co.get("n_users", 200),
            "samples_per_user": co.get("samples_per_user", 4),
            "seed": co.get("seed", self.seed),
            "heldout_frac": float(co.get("heldout_frac", 0.2)),
            "history_pairs": co.get("history_pairs", 2),
        }
        be = raw.get("bench") or {}
        self.bench = {"n_prompts": be.get("n_prompts", 10),
                      "warmup": be.get("warmup", 3),
                      "max_steps": be.get("max_steps", 256)}
        sw = raw.get("sweep") or {}
        self.sweep_lambdas = [float(x) for x in sw.get("lambdas", list(LAMBDA_SWEEP))]
        self.sweep_n_eval = sw.get("n_eval", 16)
        paths = raw.get("paths") or {}
        self.dataset_path = paths.get("dataset")
        self.checkpoint_path = paths.get("checkpoint")
        self.config_hash = hashlib.sha256(
            json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
        return cls(raw)

    def resolve(self, maybe_path: str | None, default_name: str) -> Path:
        if maybe_path:
            return Path(maybe_path)
        return self.out_dir / default_name
