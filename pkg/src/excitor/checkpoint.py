"""Flat binary tensor container (XCT1) and model persistence.

Layout: 4-byte magic "XCT1", a little-endian u64 metadata length, UTF-8
JSON metadata (free-form "meta" dict plus a tensor table with name, dtype,
shape, offset, byte count), then the raw little-endian row-major float
payload. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, Transformer
from .tensor import current_dtype

MAGIC = b"XCT1"
_HEADER = struct.Struct("<Q")
_DTYPE_TAGS = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(ValueError):
    """Base class for container problems."""


class BadMagicError(CheckpointError):
    """File does not start with the XCT1 magic."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the bytes its own metadata promises."""


class CheckpointFormatError(CheckpointError):
    """Metadata is malformed or inconsistent with the payload."""


class UnknownTensorError(CheckpointError):
    """A tensor name does not match the receiving model."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointFormatError(f"only f32/f64 tensors are stored, got {arr.dtype}")


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float arrays plus a free-form JSON meta dict."""
    entries = []
    chunks = []
    offset = 0
    seen = set()
    for name, arr in tensors.items():
        if not isinstance(name, str) or not name:
            raise CheckpointFormatError(f"tensor name must be a non-empty string, got {name!r}")
        if name in seen:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        entries.append({
            "name": name,
            "dtype": tag,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; arrays come out with their stored dtype."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC):
        raise TruncatedCheckpointError(f"{path}: shorter than the magic")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: magic is {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    header_end = len(MAGIC) + _HEADER.size
    if len(data) < header_end:
        raise TruncatedCheckpointError(f"{path}: metadata length field cut off")
    (meta_len,) = _HEADER.unpack_from(data, len(MAGIC))
    payload_start = header_end + meta_len
    if len(data) < payload_start:
        raise TruncatedCheckpointError(f"{path}: metadata cut off")
    try:
        doc = json.loads(data[header_end:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: metadata is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "tensors" not in doc:
        raise CheckpointFormatError(f"{path}: metadata lacks a tensor table")
    payload_len = len(data) - payload_start
    out: dict[str, np.ndarray] = {}
    for entry in doc["tensors"]:
        try:
            name = entry["name"]
            tag = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"{path}: malformed tensor entry {entry!r}") from e
        if tag not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has unknown dtype {tag!r}")
        dt = np.dtype(_DTYPE_TAGS[tag])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != count * dt.itemsize:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} shape {shape} disagrees with nbytes {nbytes}"
            )
        if offset < 0 or offset + nbytes > payload_len:
            raise TruncatedCheckpointError(
                f"{path}: tensor {name!r} spans [{offset}, {offset + nbytes}) "
                f"but payload has {payload_len} bytes"
            )
        if name in out:
            raise CheckpointFormatError(f"{path}: duplicate tensor name {name!r}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=payload_start + offset)
        out[name] = arr.reshape(shape).copy()
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise CheckpointFormatError(f"{path}: meta must be a JSON object")
    return out, meta


# ---- model-level persistence ----


def _adapter_meta(model: Transformer) -> dict:
    return getattr(model, "adapter_config", {"kind": model.adapter_kind})


def save_model(model: Transformer, path) -> None:
    named = model.named_parameters()
    meta = {
        "kind": "model",
        "adapter": model.adapter_kind,
        "model": model.config_dict(),
        "adapter_config": _adapter_meta(model),
    }
    save_tensors(path, {n: p.data for n, p in named.items()}, meta)


def _load_named(model: Transformer, tensors: Mapping[str, np.ndarray], path) -> None:
    named = model.named_parameters()
    unknown = sorted(set(tensors) - set(named))
    if unknown:
        raise UnknownTensorError(f"{path}: tensors not present in the model: {unknown}")
    missing = sorted(set(named) - set(tensors))
    if missing:
        raise CheckpointFormatError(f"{path}: tensors missing from the file: {missing}")
    for name, p in named.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data = arr.astype(current_dtype(), copy=False).copy() if arr.dtype != current_dtype() else arr
        p.grad = None


def load_into(model: Transformer, path) -> Transformer:
    """Load a full-model container into an already-built model; names and
    shapes must match exactly."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") not in (None, "model"):
        raise CheckpointFormatError(f"{path}: not a model container (kind={meta.get('kind')!r})")
    _load_named(model, tensors, path)
    return model


def load_model(path) -> Transformer:
    """Rebuild a model (and its adapter structure) from a container."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "model":
        raise CheckpointFormatError(f"{path}: not a model container (kind={meta.get('kind')!r})")
    try:
        cfg = ModelConfig(**meta["model"])
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: bad model config in metadata: {e}") from e
    model = Transformer(cfg, seed=0)
    ac = dict(meta.get("adapter_config", {}))
    kind = meta.get("adapter", ac.get("kind", "none"))
    if kind in ("excitor", "excitor-mm"):
        from .adapter import ExcitorConfig, attach_excitor

        visual_rank = ac.pop("visual_rank", None)
        ecfg = ExcitorConfig(
            n_excited_layers=ac.get("n_excited_layers"),
            prompt_len=ac.get("prompt_len", 16),
            rank=ac.get("rank", 4),
            gate_std=ac.get("gate_std", 0.01),
            gate_per_head=ac.get("gate_per_head", True),
            proj=ac.get("proj", "q"),
            visual_dim=ac.get("visual_dim"),
        )
        attach_excitor(model, ecfg, seed=0)
        if kind == "excitor-mm":
            from .multimodal import attach_visual

            attach_visual(model, visual_dim=ac.get("visual_dim"), rank=visual_rank, seed=0)
    elif kind == "lora":
        from .baselines import attach_lora

        attach_lora(model, rank=ac.get("rank", 4), alpha=ac.get("alpha"), seed=0)
    elif kind == "prefix":
        from .baselines import attach_prefix

        attach_prefix(model, prompt_len=ac.get("prompt_len", 16),
                      n_prefixed_layers=ac.get("layers"), seed=0)
    elif kind == "full":
        from .baselines import set_full_finetune

        set_full_finetune(model, True)
    elif kind != "none":
        raise CheckpointFormatError(f"{path}: unknown adapter kind {kind!r}")
    _load_named(model, tensors, path)
    return model


def _adapter_names(model: Transformer) -> list[str]:
    return [p.name for p in model.adapter_parameters()]


def save_adapter(model: Transformer, path) -> None:
    """Write only the adapter tensors (plus enough metadata to re-attach)."""
    names = _adapter_names(model)
    if not names:
        raise CheckpointFormatError("model has no adapter tensors to save")
    named = model.named_parameters()
    meta = {
        "kind": "adapter",
        "adapter": model.adapter_kind,
        "model": model.config_dict(),
        "adapter_config": _adapter_meta(model),
    }
    save_tensors(path, {n: named[n].data for n in names}, meta)


def load_adapter_into(model: Transformer, path) -> Transformer:
    """Load adapter tensors into a model whose adapter structure already
    matches the file."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "adapter":
        raise CheckpointFormatError(f"{path}: not an adapter container (kind={meta.get('kind')!r})")
    if meta.get("adapter") != model.adapter_kind:
        raise CheckpointFormatError(
            f"{path}: adapter kind {meta.get('adapter')!r} != model {model.adapter_kind!r}"
        )
    names = set(_adapter_names(model))
    unknown = sorted(set(tensors) - names)
    if unknown:
        raise UnknownTensorError(f"{path}: tensors not present in the adapter: {unknown}")
    missing = sorted(names - set(tensors))
    if missing:
        raise CheckpointFormatError(f"{path}: adapter tensors missing from the file: {missing}")
    named = model.named_parameters()
    for name in names:
        arr = tensors[name]
        p = named[name]
        if arr.shape != p.data.shape:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data = arr.astype(current_dtype(), copy=False).copy() if arr.dtype != current_dtype() else arr
        p.grad = None
    return model
