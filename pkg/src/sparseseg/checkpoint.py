"""Binary parameter checkpoint codec.

Layout: the 6-byte magic ``SPSEG1``, then one record per tensor in
insertion order.  Each record is

    name_len   u64 little-endian
    name       name_len bytes, UTF-8
    rank       u64 little-endian
    extents    rank * u64 little-endian
    values     product(extents) * f32 little-endian

Round-trips are bit-exact on the stored float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"SPSEG1"

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint"]


class CheckpointError(ValueError):
    """Raised on malformed or truncated checkpoint files."""


def _coerce(value) -> np.ndarray:
    data = getattr(value, "data", value)
    arr = np.asarray(data, dtype="<f4")
    # ascontiguousarray would promote rank-0 to rank-1, so only call it when needed
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def save_checkpoint(path: Union[str, Path], params: Mapping[str, object]) -> None:
    """Write ``params`` (name -> Tensor or ndarray) to ``path``."""
    chunks = [MAGIC]
    for name, value in params.items():
        raw_name = name.encode("utf-8")
        arr = _coerce(value)
        chunks.append(struct.pack("<Q", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def pull(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        piece = self.blob[self.pos:end]
        self.pos = end
        return piece

    def u64(self) -> int:
        return struct.unpack("<Q", self.pull(8))[0]

    def done(self) -> bool:
        return self.pos == len(self.blob)


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Read a checkpoint back as an ordered name -> float32 ndarray dict."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.pull(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a parameter checkpoint")
    out: dict[str, np.ndarray] = {}
    while not reader.done():
        name = reader.pull(reader.u64()).decode("utf-8")
        rank = reader.u64()
        shape = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(reader.pull(count * 4), dtype="<f4")
        out[name] = values.reshape(shape).copy()
    return out
