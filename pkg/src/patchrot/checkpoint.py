"""Versioned binary checkpoints.

Layout (little-endian):
    magic   8 bytes  b"PRSSLCKP"
    version u32      (currently 1)
    hash    32 bytes sha256 of the model's architecture string
    count   u32
    entries count times:
        name_len u32, name utf-8,
        ndim u32, dims u32 * ndim,
        payload float32 raw (C order)

Entries are the model's parameters followed by its buffers (BN running
statistics), in declaration order.  Round-trips are bit-exact.
"""

import hashlib
import struct

import numpy as np

from .errors import CheckpointMismatchError, DataError

MAGIC = b"PRSSLCKP"
VERSION = 1


def arch_hash(arch_string: str) -> bytes:
    return hashlib.sha256(arch_string.encode()).digest()


def _entries(model):
    for name, tensor in model.named_params():
        yield name, tensor.data
    for name, arr in model.named_buffers():
        yield name, arr


def save(model, path) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION), arch_hash(model.arch_string)]
    entries = list(_entries(model))
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_raw(path) -> tuple[bytes, dict]:
    """Returns (arch hash, name -> float32 array) without verification."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44 or raw[:8] != MAGIC:
        raise DataError(f"{path}: not a patchrot checkpoint")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = raw[12:44]
    off = 44
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if ndim else 4
        payload = raw[off : off + n_bytes]
        if len(payload) < n_bytes:
            raise DataError(f"{path}: truncated payload for entry {name!r}")
        off += n_bytes
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return stored_hash, arrays


def load_into(model, path) -> None:
    """Restore a model in place; the architecture hash must match."""
    stored_hash, arrays = load_raw(path)
    if stored_hash != arch_hash(model.arch_string):
        raise CheckpointMismatchError(
            f"{path}: checkpoint was written for a different architecture"
        )
    for name, target in _entries(model):
        if name not in arrays:
            raise CheckpointMismatchError(f"{path}: missing entry {name!r}")
        src = arrays[name]
        if src.shape != target.shape:
            raise CheckpointMismatchError(
                f"{path}: entry {name!r} has shape {src.shape}, expected {target.shape}"
            )
        target[...] = src


def encoder_bytes(model) -> bytes:
    """Concatenated bytes of all encoder parameters and buffers, for
    frozen-weights assertions."""
    parts = []
    for name, arr in _entries(model):
        if name.startswith("encoder."):
            parts.append(arr.tobytes())
    return b"".join(parts)
