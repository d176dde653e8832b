"""Single-file checkpoint archives.

Layout::

    8-byte magic | u32 version | u32 manifest length   (16-byte header, little-endian)
    JSON manifest (UTF-8)
    raw little-endian blob

The manifest lists every tensor with shape, dtype, byte offset and byte
length into the blob, plus free-form metadata (model config etc). Boolean
masks are stored as packed bitmasks with dtype ``"bits"``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from impact.model.vit import ModelConfig, VitModel, init_model

MAGIC = b"IMPACTCK"
VERSION = 1
_HEADER = struct.Struct("<8sII")

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _encode(arr: np.ndarray) -> tuple[str, bytes]:
    if arr.dtype == np.bool_:
        return "bits", np.packbits(arr.ravel(), bitorder="little").tobytes()
    code = _CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code, np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _decode(code: str, raw: bytes, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    if code == "bits":
        if len(raw) != (n + 7) // 8:
            raise CheckpointError(f"bitmask length {len(raw)} does not fit shape {shape}")
        return np.unpackbits(np.frombuffer(raw, np.uint8), count=n, bitorder="little").astype(bool).reshape(shape)
    dt = _DTYPES.get(code)
    if dt is None:
        raise CheckpointError(f"unknown dtype code {code!r}")
    if len(raw) != n * dt.itemsize:
        raise CheckpointError(f"shape mismatch: {shape} needs {n * dt.itemsize} bytes, entry has {len(raw)}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def pack_archive(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code, raw = _encode(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def unpack_archive(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("bad magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    blob = memoryview(data)[start:]
    declared = sum(e["length"] for e in manifest["tensors"])
    if len(blob) < declared:
        raise CheckpointError(f"truncated blob: {len(blob)} of {declared} bytes")
    if len(blob) > declared:
        raise CheckpointError(f"blob has {len(blob) - declared} bytes beyond the manifest")
    out = {}
    for e in manifest["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["length"]
        if hi > len(blob):
            raise CheckpointError(f"{e['name']}: entry runs past the blob")
        out[e["name"]] = _decode(e["dtype"], bytes(blob[lo:hi]), tuple(e["shape"]))
    return out, manifest["meta"]


def atomic_write(path: str | os.PathLike, data: bytes) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, p)
    return p


def write_archive(path: str | os.PathLike, tensors, meta=None) -> Path:
    return atomic_write(path, pack_archive(tensors, meta))


def read_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return unpack_archive(Path(path).read_bytes())


_MASK_PREFIX = "mask/"


def model_to_bytes(model: VitModel) -> bytes:
    tensors = dict(model.params)
    for k, m in (model.prune_mask or {}).items():
        tensors[_MASK_PREFIX + k] = np.asarray(m, dtype=bool)
    return pack_archive(tensors, {"kind": "vit", "config": model.config.to_dict(), "model_meta": model.meta})


def model_from_bytes(data: bytes) -> VitModel:
    tensors, meta = unpack_archive(data)
    if meta.get("kind") != "vit":
        raise CheckpointError("archive does not hold a ViT model")
    params = {k: v for k, v in tensors.items() if not k.startswith(_MASK_PREFIX)}
    masks = {k[len(_MASK_PREFIX):]: v for k, v in tensors.items() if k.startswith(_MASK_PREFIX)}
    config = ModelConfig.from_dict(meta["config"])
    expected = {k: v.shape for k, v in init_model(config).params.items()}
    if set(expected) != set(params):
        raise CheckpointError(f"parameter set differs from config: {sorted(set(expected) ^ set(params))}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise CheckpointError(f"shape mismatch for {k}: archive {params[k].shape}, config {shape}")
    for k, m in masks.items():
        if k not in params or params[k].shape != m.shape:
            raise CheckpointError(f"mask {k!r} does not match a parameter")
    return VitModel(config, params, masks or None, dict(meta.get("model_meta", {})))


def save_checkpoint(model: VitModel, path: str | os.PathLike) -> Path:
    return atomic_write(path, model_to_bytes(model))


def load_checkpoint(path: str | os.PathLike) -> VitModel:
    return model_from_bytes(Path(path).read_bytes())
