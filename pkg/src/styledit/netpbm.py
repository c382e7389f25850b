"""Binary PPM (P6) / PGM (P5) reading and writing for [-1, 1] images."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 via round((v + 1) * 127.5)."""
    v = np.clip(np.asarray(image, dtype=float), -1.0, 1.0)
    return np.rint((v + 1.0) * 127.5).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    return raw.astype(float) / 127.5 - 1.0


def encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3:
        raise NetpbmError(f"PPM needs an H x W x 3 image, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(image).tobytes()


def encode_pgm(mask: np.ndarray) -> bytes:
    if mask.ndim != 2:
        raise NetpbmError(f"PGM needs an H x W mask, got {mask.shape}")
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.where(mask > 0, 255, 0).astype(np.uint8).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(data[start:pos])
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def decode(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to raw uint8 (H x W or H x W x 3)."""
    toks, pos = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise NetpbmError(f"bad header {toks!r}") from exc
    if maxval != 255:
        raise NetpbmError(f"only 8-bit rasters are supported, maxval={maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise NetpbmError(f"raster truncated: expected {need} bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path: str | os.PathLike, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw = decode(Path(path).read_bytes())
    if raw.ndim != 3:
        raise NetpbmError(f"{path}: expected a P6 image")
    return from_bytes(raw)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = decode(Path(path).read_bytes())
    if raw.ndim != 2:
        raise NetpbmError(f"{path}: expected a P5 image")
    return (raw > 127).astype(float)
