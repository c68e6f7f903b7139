"""Flat little-endian weight container.

Layout: magic ``SRTW``, version (u32), entry count (u32), then per entry the
name length (u16), UTF-8 name, rank (u8), dims (u32 each) and a float64
payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SRTW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank {arr.ndim} too large for entry {name}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"{source}: truncated at offset {pos} (needed {n} bytes)")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightFormatError(f"{source}: bad magic at offset 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFormatError(f"{source}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64)
        out[name] = payload.reshape(dims)
    if pos != len(view):
        raise WeightFormatError(f"{source}: {len(view) - pos} trailing bytes at offset {pos}")
    return out


def save_weights(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    return loads(path.read_bytes(), source=str(path))
