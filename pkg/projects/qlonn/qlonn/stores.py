# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
from traitlets import CaselessStrEnum
from traitlets.config import LoggingConfigurable

from .utils import BadMagic, TruncatedFile

MAGIC_FLOAT64 = b"ONNW1"
MAGIC_FLOAT32 = b"ONNS1"

_DTYPES = {MAGIC_FLOAT64: np.dtype("<f8"), MAGIC_FLOAT32: np.dtype("<f4")}
_MAGICS = {"float64": MAGIC_FLOAT64, "float32": MAGIC_FLOAT32}

_U64 = struct.Struct("<Q")


def encode_weights(tensors: Mapping[str, np.ndarray], precision: str = "float64") -> bytes:
    """
    Serializes named tensors to a weight blob.

    Layout: the magic, then for every tensor in order the name length and the UTF-8 name,
    the rank, the dimensions (all unsigned 64-bit little-endian) and the row-major
    little-endian IEEE-754 values.
    """
    magic = _MAGICS[precision]
    dtype = _DTYPES[magic]
    chunks = [magic]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(tensor)
        chunks.append(_U64.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U64.pack(array.ndim))
        chunks.extend(_U64.pack(d) for d in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedFile(
                f"{self.source} ends at byte {len(self.data)}, "
                f"{self.offset + size} bytes were expected"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(_U64.size))[0]


def decode_weights(data: bytes, source: str = "<weights>") -> tuple[dict[str, np.ndarray], str]:
    """Parses a weight blob. Returns the tensors, as float64, and the storage precision."""
    magic = data[: len(MAGIC_FLOAT64)]
    if magic not in _DTYPES:
        raise BadMagic(f"{source} is not a weight blob (magic {magic!r})")
    dtype = _DTYPES[magic]
    reader = _Reader(data, source)
    reader.take(len(magic))
    tensors: dict[str, np.ndarray] = {}
    while reader.offset < len(data):
        name = reader.take(reader.u64()).decode("utf-8")
        shape = tuple(reader.u64() for _ in range(reader.u64()))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype)
        tensors[name] = values.astype(np.float64).reshape(shape)
    precision = "float64" if magic == MAGIC_FLOAT64 else "float32"
    return tensors, precision


class WeightStore(LoggingConfigurable):
    """Reads and writes weight blobs on disk."""

    precision = CaselessStrEnum(
        ["float64", "float32"],
        default_value="float64",
        config=True,
        help="""Storage precision of written blobs. Computation is always done in double
        precision; float32 blobs are only smaller.""",
    )

    def write(self, path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
        path = Path(path)
        try:
            path.write_bytes(encode_weights(tensors, self.precision))
        except OSError as e:
            raise OSError(f"Cannot write weights to {path}: {e}") from e
        self.log.debug("Wrote %s tensor(s) to %s", len(tensors), path)

    def read(self, path: str | Path) -> dict[str, np.ndarray]:
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise OSError(f"Cannot read weights from {path}: {e}") from e
        tensors, _ = decode_weights(data, str(path))
        self.log.debug("Read %s tensor(s) from %s", len(tensors), path)
        return tensors

