"""Named-tensor weights file: magic "MFVCW", version byte, tensor count,
then per tensor a UTF-8 name, four little-endian u32 extents, and a
little-endian float32 payload."""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"MFVCW"
VERSION = 1


class WeightsFormatError(ValueError):
    """Raised when a weights file does not match the expected layout."""


def serialize_named_tensors(named: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += MAGIC
    out.append(VERSION)
    out += struct.pack("<I", len(named))
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 4:
            raise WeightsFormatError(f"tensor '{name}' must be 4-D, got shape {arr.shape}")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<4I", *arr.shape)
        out += arr.astype("<f4").tobytes(order="C")
    return bytes(out)


def deserialize_named_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[: len(MAGIC)] != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    pos = len(MAGIC)
    version = data[pos]
    pos += 1
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        shape = struct.unpack_from("<4I", data, pos)
        pos += 16
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        named[name] = arr.astype(np.float32)
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after the last tensor")
    return named


def save_named_tensors(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_named_tensors(named))


def load_named_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return deserialize_named_tensors(fh.read())


def weights_digest(*serialized: bytes) -> bytes:
    """8-byte digest identifying one or more serialized weight blobs."""
    h = hashlib.sha256()
    for blob in serialized:
        h.update(blob)
    return h.digest()[:8]
