"""SIDL checkpoint container.

Layout (all integers little-endian)::

    b"SIDL" | u16 version | u32 section count
    per section: u16 name length | name (utf-8) | u32 ndim | u64 dims... | f64 payload
    u64 FNV-1a checksum of every preceding byte
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"SIDL"
VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class ChecksumError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK
    return h


def encode(sections: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(sections))]
    for name in sorted(sections):
        arr = np.array(sections[name], dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise ValueError("not a SIDL checkpoint")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 10
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        out[name] = arr
    return out


def save(path, sections: dict) -> int:
    blob = encode(sections)
    with open(path, "wb") as f:
        f.write(blob)
    return struct.unpack("<Q", blob[-8:])[0]


def load(path) -> dict:
    with open(path, "rb") as f:
        return decode(f.read())


def file_checksum(path) -> str:
    """Digest of the whole file as hex. Used for checkpoints and manifests alike."""
    with open(path, "rb") as f:
        return hashlib.blake2b(f.read(), digest_size=8).hexdigest()


def params_checksum(arrays) -> str:
    """Digest over a list of arrays (or a name->array dict) for freeze checks."""
    if isinstance(arrays, dict):
        arrays = [arrays[k] for k in sorted(arrays)]
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        h.update(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        h.update(a.tobytes())
    return h.hexdigest()
