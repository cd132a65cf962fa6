"""
Binary checkpoint format.

Layout (little-endian)::

    b"CPLN" | version u32 | precision u32 (4 or 8) | entry count u32
    per entry: name length u32 | name utf-8 | rank u32 | dims u32 * rank | values (precision bytes each)

Entries are written sorted by name, so identical stores produce identical files.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from models import PlannerError

from .params import ParamStore

MAGIC = b"CPLN"
VERSION = 1
PRECISION_ENV = "CPLN_PRECISION"


class CheckpointError(PlannerError):
    pass


def _precision(precision: Optional[int]) -> int:
    value = precision if precision is not None else int(os.environ.get(PRECISION_ENV, "8") or 8)
    if value not in (4, 8):
        raise CheckpointError(f"Unsupported real precision {value}; use 4 or 8")
    return value


def serialize(store: ParamStore, precision: Optional[int] = None) -> bytes:
    width = _precision(precision)
    dtype = "<f8" if width == 8 else "<f4"
    parts = [MAGIC, struct.pack("<III", VERSION, width, len(store.params))]
    for name in store.names():
        value = store.params[name]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointError(
                f"Checkpoint truncated while reading {what}",
                {"offset": self.offset, "needed": count, "available": len(self.data) - self.offset},
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize(data: bytes) -> ParamStore:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)", {"offset": 0})
    version, width, count = reader.unpack("<III", "header")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", {"offset": 4})
    if width not in (4, 8):
        raise CheckpointError(f"Unsupported real precision {width}", {"offset": 8})
    dtype = "<f8" if width == 8 else "<f4"
    store = ParamStore()
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<I", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("Parameter name is not valid UTF-8", {"offset": start}) from exc
        (rank,) = reader.unpack("<I", "rank")
        dims = reader.unpack(f"<{rank}I", "dims") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        raw = reader.take(size * width, f"values of {name}")
        value = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(dims)
        if name in store.params:
            raise CheckpointError(f"Duplicate entry {name}", {"offset": start})
        store.params[name] = value
    if reader.offset != len(data):
        raise CheckpointError("Trailing bytes after last entry", {"offset": reader.offset})
    return store


def save_checkpoint(store: ParamStore, path: Path, precision: Optional[int] = None) -> None:
    """Write atomically (temp file + replace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    tmp_path.write_bytes(serialize(store, precision))
    tmp_path.replace(path)


def load_checkpoint(path: Path) -> ParamStore:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return deserialize(path.read_bytes())


def store_digest(store: ParamStore) -> str:
    """sha256 of the serialized parameters (what the checkpoint file would hash to)."""
    return hashlib.sha256(serialize(store)).hexdigest()


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
