"""Self-describing binary model container.

Layout: magic, a length-prefixed JSON metadata blob (model kind, config
echo, optional binarization threshold), a count of named float64 arrays
(little-endian, shape-prefixed), then a SHA-256 checksum of everything
before it. Serialization is deterministic, so save/load/save round-trips
byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"PRBM\x01"


class ContainerError(IOError):
    """Corrupt, truncated or mismatching container file."""


def save_container(path, kind: str, arrays: dict[str, np.ndarray],
                   meta: dict) -> None:
    """Write a model container; `meta` must be JSON-serializable."""
    meta = dict(meta)
    meta["kind"] = kind
    blob = bytearray()
    blob += MAGIC
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        name_b = name.encode()
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_container(path) -> tuple[str, dict[str, np.ndarray], dict]:
    """Read a model container, returning (kind, arrays, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 32 or blob[:len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a model container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch")

    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise ContainerError(f"{path}: truncated container")
        chunk = body[off:off + n]
        off += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode())
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8")
        arrays[name] = data.reshape(shape).copy()
    if off != len(body):
        raise ContainerError(f"{path}: trailing bytes after arrays")
    return meta["kind"], arrays, meta
