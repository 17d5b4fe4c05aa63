"""Versioned checkpoint container: JSON header + named little-endian tensors.

Layout: magic "DTCK", u32 version, u64 header length, header JSON (sorted
keys), then the raw tensor payload in name order. save -> load -> save is
byte-identical; truncated or mismatched files fail before any state mutation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ParamStore
from .transformer import ModelConfig, TransformerParams
from . import fusion as fu

MAGIC = b"DTCK"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class CheckpointState:
    format_version: int
    config_hash: str
    step: int
    model_configs: dict          # {"generator": {...}, "reasoner": {...}|None}
    fusion: dict                 # {"lambda": float, "region": str}
    rng_state: dict
    opt_t: int
    tensors: dict                # name -> np.ndarray


def build_state(model, opt, step: int, rng_state: dict, config_hash: str = "") -> CheckpointState:
    """Snapshot a DuoModel (+ optional Adam optimizer) into a checkpoint state."""
    tensors: dict[str, np.ndarray] = {}
    for gname, store in model.param_groups().items():
        for name, tens in store.items():
            tensors[f"{gname}.{name}"] = tens.data
    opt_t = 0
    if opt is not None:
        opt_t = opt.t
        tensors.update(opt.state_tensors())
    return CheckpointState(
        format_version=FORMAT_VERSION, config_hash=config_hash, step=step,
        model_configs={
            "generator": model.generator.cfg.to_dict(),
            "reasoner": model.reasoner.cfg.to_dict() if model.reasoner is not None else None,
        },
        fusion={"lambda": model.fusion.lam, "region": model.fusion.region},
        rng_state=rng_state, opt_t=opt_t, tensors=tensors)


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path: str | Path, state: CheckpointState) -> None:
    names = sorted(state.tensors)
    index = {}
    offset = 0
    for name in names:
        arr = state.tensors[name]
        nbytes = arr.size * arr.dtype.itemsize
        index[name] = {"dtype": _dtype_tag(arr), "shape": list(arr.shape),
                       "offset": offset, "nbytes": nbytes}
        offset += nbytes
    header = {
        "format_version": state.format_version,
        "config_hash": state.config_hash,
        "step": state.step,
        "model_configs": state.model_configs,
        "fusion": state.fusion,
        "rng_state": state.rng_state,
        "opt_t": state.opt_t,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            arr = state.tensors[name]
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[_dtype_tag(arr)]).tobytes())


def load_checkpoint(path: str | Path) -> CheckpointState:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path} is not a checkpoint file")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    if 16 + hlen > len(raw):
        raise CorruptCheckpointError("truncated checkpoint header")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    payload = raw[16 + hlen:]
    total = sum(meta["nbytes"] for meta in header["tensors"].values())
    if total != len(payload):
        raise CorruptCheckpointError(
            f"payload is {len(payload)} bytes, index expects {total}")
    tensors = {}
    for name, meta in header["tensors"].items():
        dt = _DTYPES.get(meta["dtype"])
        if dt is None:
            raise CorruptCheckpointError(f"unknown tensor dtype {meta['dtype']!r}")
        lo, nb = meta["offset"], meta["nbytes"]
        arr = np.frombuffer(payload[lo:lo + nb], dtype=dt).reshape(meta["shape"]).copy()
        tensors[name] = arr
    return CheckpointState(
        format_version=header["format_version"], config_hash=header["config_hash"],
        step=header["step"], model_configs=header["model_configs"],
        fusion=header["fusion"], rng_state=header["rng_state"],
        opt_t=header["opt_t"], tensors=tensors)


def _fill_store(store: ParamStore, prefix: str, tensors: dict) -> None:
    for name, tens in store.items():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CorruptCheckpointError(f"checkpoint missing tensor {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tens.data.shape:
            raise ConfigMismatchError(
                f"{key}: checkpoint shape {arr.shape} != model shape {tens.data.shape}")
        tens.data = arr.astype(tens.data.dtype)


def restore_into(state: CheckpointState, model, opt=None,
                 expect_config_hash: str | None = None,
                 allow_hash_mismatch: bool = False) -> None:
    """Load parameters (and optimizer state) into an existing model, atomically
    validated: nothing is mutated if any tensor is missing or mis-shaped."""
    if expect_config_hash is not None and state.config_hash != expect_config_hash:
        if not allow_hash_mismatch:
            raise ConfigMismatchError(
                f"checkpoint config hash {state.config_hash[:12]}... does not match "
                f"{expect_config_hash[:12]}... (pass allow_hash_mismatch to override)")
    want_gen = state.model_configs["generator"]
    if model.generator.cfg.to_dict() != want_gen:
        raise ConfigMismatchError("generator ModelConfig differs from checkpoint")
    want_rea = state.model_configs["reasoner"]
    have_rea = model.reasoner.cfg.to_dict() if model.reasoner is not None else None
    if want_rea != have_rea:
        raise ConfigMismatchError("reasoner ModelConfig differs from checkpoint")
    # validate everything before mutating
    for gname, store in model.param_groups().items():
        for name, tens in store.items():
            key = f"{gname}.{name}"
            if key not in state.tensors:
                raise CorruptCheckpointError(f"checkpoint missing tensor {key}")
            if tuple(state.tensors[key].shape) != tens.data.shape:
                raise ConfigMismatchError(f"{key}: shape mismatch")
    for gname, store in model.param_groups().items():
        _fill_store(store, gname, state.tensors)
    if opt is not None:
        opt.load_state(state.opt_t, state.tensors)


def build_model_from_state(state: CheckpointState, dtype=np.float32):
    """Reconstruct a DuoModel directly from a checkpoint (decode/eval path)."""
    from .training import DuoModel

    gen_cfg = ModelConfig(**state.model_configs["generator"])
    gen = TransformerParams.init(gen_cfg, np.random.default_rng(0), dtype)
    rea = None
    proj = None
    if state.model_configs["reasoner"] is not None:
        rea_cfg = ModelConfig(**state.model_configs["reasoner"])
        rea = TransformerParams.init(rea_cfg, np.random.default_rng(0), dtype)
        if rea_cfg.d_model != gen_cfg.d_model:
            proj = fu.init_projection(rea_cfg.d_model, gen_cfg.d_model,
                                      np.random.default_rng(0), dtype)
    if rea is not None:
        fusion_cfg = fu.make_fusion_config(state.fusion["lambda"], state.fusion["region"],
                                           rea.cfg, gen_cfg, proj)
    else:
        fusion_cfg = fu.FusionConfig(lam=0.0, region=state.fusion["region"])
    model = DuoModel(gen, rea, proj, fusion_cfg)
    for gname, store in model.param_groups().items():
        _fill_store(store, gname, state.tensors)
    return model
