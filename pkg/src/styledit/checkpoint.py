"""Binary checkpoints.

Layout: b"SPIE", uint32 LE version, uint64 LE manifest length, UTF-8 JSON
manifest, then the tensors as contiguous little-endian float64 blobs. The
manifest stores the config snapshot, the step counter and, per tensor, its
name, shape and byte offset relative to the start of the blob section.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import ParamStore

MAGIC = b"SPIE"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    config: dict = field(default_factory=dict)
    step: int = 0
    kind: str = "base"
    version: int = VERSION


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name in ckpt.params:
        arr = np.asarray(ckpt.params[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = {"config": ckpt.config, "step": int(ckpt.step), "kind": ckpt.kind, "tensors": tensors, "blob_bytes": offset}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError(f"offset {len(data)}: truncated header, need {_HEADER.size} bytes")
    magic, version, mlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"offset 0: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"offset 4: unsupported version {version}, this reader handles version {VERSION}")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise CheckpointError(f"offset {len(data)}: truncated manifest, expected {mlen} bytes from offset {start}")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
        tensors = manifest["tensors"]
        blob_bytes = int(manifest["blob_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"offset {start}: unreadable manifest ({e})") from None
    base = start + mlen
    if len(data) != base + blob_bytes:
        kind = "truncated" if len(data) < base + blob_bytes else "trailing bytes after"
        raise CheckpointError(f"offset {len(data)}: {kind} tensor data, expected file size {base + blob_bytes}")
    params = {}
    for t in tensors:
        shape = tuple(int(s) for s in t["shape"])
        lo = base + int(t["offset"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if lo < base or lo + n > len(data):
            raise CheckpointError(f"offset {lo}: tensor {t['name']!r} extends past the end of the file")
        params[t["name"]] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=lo).astype(np.float64).reshape(shape)
    try:
        store = ParamStore(params)
    except ValueError as e:
        raise CheckpointError(f"offset {base}: {e}") from None
    return Checkpoint(store, manifest.get("config", {}), int(manifest.get("step", 0)), manifest.get("kind", "base"), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically through a temporary file in the same directory."""
    data = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
