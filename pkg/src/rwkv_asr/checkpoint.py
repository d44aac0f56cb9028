"""Binary checkpoint format.

Layout: b"RWKVASR1" | u32 LE header length | UTF-8 JSON header | tensor payloads.
The header holds the format version, the model config and an ordered list of
``[name, dtype, shape]`` declarations; payloads follow in that order as
little-endian row-major IEEE-754 data.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransducerModel

MAGIC = b"RWKVASR1"
FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    return "f32" if arr.dtype == np.float32 else "f64"


def to_bytes(model: TransducerModel) -> bytes:
    named = model.named_parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": [[name, _dtype_tag(t.data), list(t.shape)] for name, t in named.items()],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hb)), hb]
    for name, t in named.items():
        parts.append(np.ascontiguousarray(t.data, dtype=_DTYPES[_dtype_tag(t.data)]).tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> TransducerModel:
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an RWKVASR1 checkpoint")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid config in checkpoint: {e}") from e
    model = TransducerModel(config)
    named = model.named_parameters()
    decls = header.get("tensors", [])
    declared = [d[0] for d in decls]
    unknown = sorted(set(declared) - set(named))
    missing = sorted(set(named) - set(declared))
    if unknown or missing:
        raise CheckpointError(f"tensor table mismatch: unknown={unknown} missing={missing}")
    off = start + hlen
    for name, tag, shape in decls:
        target = named[name]
        if tuple(shape) != target.shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} vs {list(target.shape)}")
        if tag not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {tag} for {name}")
        dt = np.dtype(_DTYPES[tag])
        n = int(np.prod(shape)) * dt.itemsize
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: payload for {name} incomplete")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
        target.data = arr.astype(target.dtype)
        off += n
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after tensor payloads")
    return model


def save_checkpoint(model: TransducerModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path) -> TransducerModel:
    return from_bytes(Path(path).read_bytes())
