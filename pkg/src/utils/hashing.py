"""Stable content hashes used to bind artifacts to each other."""

import hashlib
import json
from typing import Any, Iterable

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a over ``data``."""
    value = FNV64_OFFSET
    for byte in data:
        value ^= byte
        value = (value * FNV64_PRIME) & _MASK64
    return value


def fnv1a_hex(data: bytes) -> str:
    return f"{fnv1a_64(data):016x}"


def canonical_json(payload: Any) -> bytes:
    """JSON encoding with sorted keys and no whitespace, for hashing."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def digest_chunks(chunks: Iterable[bytes]) -> str:
    """16-hex-digit blake2b digest over a sequence of byte chunks.

    Used for large parameter blobs where a byte-at-a-time FNV loop is too slow.
    """
    hasher = hashlib.blake2b(digest_size=8)
    for chunk in chunks:
        hasher.update(chunk)
    return hasher.hexdigest()
