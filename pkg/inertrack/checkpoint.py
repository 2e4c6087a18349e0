"""Self-describing binary container for named float64 arrays plus JSON metadata.

Layout (all integers little-endian)::

    MAGIC (8 bytes) | version u32 | array count u32
    per array: name length u32 | UTF-8 name | dtype tag (4 bytes, "f64\\0")
               | rank u32 | extents u64 * rank | raw float64 payload
    metadata length u64 | canonical JSON metadata

Arrays are written sorted by name, so saving a loaded checkpoint reproduces
the original bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np
from numpy.typing import NDArray

from .errors import CheckpointError
from .utils import canonical_json

logger = logging.getLogger(__name__)

MAGIC = b"INRTCKPT"
FORMAT_VERSION = 1
DTYPE_TAG = b"f64\x00"


@dataclass
class Checkpoint:
    arrays: Dict[str, NDArray[np.float64]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


class _Reader:
    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def encode(checkpoint: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(checkpoint.arrays))]
    for name in sorted(checkpoint.arrays):
        array = np.asarray(checkpoint.arrays[name], dtype="<f8")
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(DTYPE_TAG)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array).tobytes())
    metadata = canonical_json(checkpoint.metadata).encode("utf-8")
    parts.append(struct.pack("<Q", len(metadata)))
    parts.append(metadata)
    return b"".join(parts)


def decode(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError("not an inertrack checkpoint (bad magic)")
    version, count = reader.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")

    arrays: Dict[str, NDArray[np.float64]] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<I", "array name length")
        name = reader.take(name_length, "array name").decode("utf-8")
        tag = reader.take(len(DTYPE_TAG), f"dtype of {name}")
        if tag != DTYPE_TAG:
            raise CheckpointError(f"array {name} has unsupported dtype tag {tag!r}")
        (rank,) = reader.unpack("<I", f"rank of {name}")
        shape = reader.unpack(f"<{rank}Q", f"extents of {name}")
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = reader.take(8 * size, f"payload of {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)

    (metadata_length,) = reader.unpack("<Q", "metadata length")
    metadata = json.loads(reader.take(metadata_length, "metadata").decode("utf-8"))
    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} unexpected trailing bytes")
    return Checkpoint(arrays=arrays, metadata=metadata)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(checkpoint))
    logger.info("checkpoint written to %s (%d arrays)", path, len(checkpoint.arrays))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
