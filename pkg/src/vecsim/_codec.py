"""Small byte-level helpers shared by the canonical encoders."""

from __future__ import annotations

import hashlib
import struct


def lp(data: bytes) -> bytes:
    """Length-prefix ``data`` with a 4-byte big-endian length."""
    return struct.pack(">I", len(data)) + data


def u8(n: int) -> bytes:
    return struct.pack(">B", n)


def u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def uint(n: int) -> bytes:
    """Length-prefixed minimal big-endian encoding of a non-negative integer."""
    if n < 0:
        raise ValueError("negative integer in canonical encoding")
    return lp(n.to_bytes((n.bit_length() + 7) // 8, "big"))


def text(s: str) -> bytes:
    return lp(s.encode("utf-8"))


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.digest()
