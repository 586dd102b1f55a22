"""Wire formats for the secret block structure.

Bitstring form (what travels over the secure channel)::

    N (32 bits) | R (32 bits) | version (32 bits) | N ids of ceil(log2 R) bits

File form (``.bvbs``)::

    b"BVBS" | version u16 | N u32 | R u32 | payload bits packed into bytes

Integers in the file header are little-endian.  Every field in the bitstring,
and the packed payload, uses little-endian bit order (least significant bit
first).  Block ids are stored as ``id - 1``.
"""
from __future__ import annotations

import math
import struct

import numpy as np

from .errors import (
    BlockIdRangeError,
    HeaderError,
    TruncatedPayloadError,
    UnequalBlocksError,
)
from .model import BlockStructure

FORMAT_VERSION = 1
MAGIC = b"BVBS"
HEADER_BITS = 96
_FILE_HEADER = struct.Struct("<4sHII")


def id_width(R: int) -> int:
    """Bits per coordinate for ``R`` blocks."""
    return math.ceil(math.log2(R)) if R > 1 else 0


def payload_bits(N: int, R: int) -> int:
    return N * id_width(R)


def _uint_bits(value: int, width: int) -> str:
    return "".join("1" if (value >> k) & 1 else "0" for k in range(width))


def _bits_uint(bits: str) -> int:
    return sum(1 << k for k, b in enumerate(bits) if b == "1")


def _payload(bs: BlockStructure) -> str:
    w = id_width(bs.R)
    return "".join(_uint_bits(int(v), w) for v in bs.labels)


def serialize_structure(bs: BlockStructure) -> str:
    """Header plus payload as a string of ``'0'``/``'1'`` characters."""
    header = _uint_bits(bs.N, 32) + _uint_bits(bs.R, 32) + _uint_bits(FORMAT_VERSION, 32)
    return header + _payload(bs)


def _decode_payload(bits: str, N: int, R: int) -> BlockStructure:
    w = id_width(R)
    need = N * w
    if len(bits) < need:
        raise TruncatedPayloadError(f"payload has {len(bits)} bits, expected {need}")
    if len(bits) > need:
        raise TruncatedPayloadError(f"payload has {len(bits)} bits, expected {need} (trailing data)")
    labels = np.array([_bits_uint(bits[i * w:(i + 1) * w]) for i in range(N)], dtype=np.int64)
    if labels.size and labels.max() >= R:
        bad = int(np.flatnonzero(labels >= R)[0])
        raise BlockIdRangeError(f"coordinate {bad + 1} has block id {labels[bad] + 1} > R={R}")
    counts = np.bincount(labels, minlength=R)
    if np.any(counts != N // R):
        raise UnequalBlocksError(f"block sizes differ: min {counts.min()}, max {counts.max()}")
    return BlockStructure(labels, R)


def _check_header(N: int, R: int, version: int) -> None:
    if version != FORMAT_VERSION:
        raise HeaderError(f"unsupported format version {version}")
    if N == 0 or R == 0 or R > N or N % R:
        raise HeaderError(f"inconsistent header: N={N}, R={R}")


def deserialize_structure(bits: str, N: int | None = None, R: int | None = None) -> BlockStructure:
    """Inverse of :func:`serialize_structure`.

    When ``N`` or ``R`` are given they must match the header.
    """
    if set(bits) - {"0", "1"}:
        raise HeaderError("bitstring may only contain '0' and '1'")
    if len(bits) < HEADER_BITS:
        raise HeaderError(f"bitstring shorter than the {HEADER_BITS}-bit header")
    hN, hR, version = (_bits_uint(bits[k:k + 32]) for k in (0, 32, 64))
    _check_header(hN, hR, version)
    if (N is not None and N != hN) or (R is not None and R != hR):
        raise HeaderError(f"header describes N={hN}, R={hR}; expected N={N}, R={R}")
    return _decode_payload(bits[HEADER_BITS:], hN, hR)


def structure_to_bytes(bs: BlockStructure) -> bytes:
    bits = np.array([c == "1" for c in _payload(bs)], dtype=np.uint8)
    packed = np.packbits(bits, bitorder="little").tobytes()
    return _FILE_HEADER.pack(MAGIC, FORMAT_VERSION, bs.N, bs.R) + packed


def structure_from_bytes(data: bytes) -> BlockStructure:
    if len(data) < _FILE_HEADER.size:
        raise HeaderError("file shorter than its header")
    magic, version, N, R = _FILE_HEADER.unpack_from(data)
    if magic != MAGIC:
        raise HeaderError(f"bad magic {magic!r}")
    _check_header(N, R, version)
    body = np.frombuffer(data, dtype=np.uint8, offset=_FILE_HEADER.size)
    need = payload_bits(N, R)
    if body.size != math.ceil(need / 8):
        raise TruncatedPayloadError(f"payload has {body.size} bytes, expected {math.ceil(need / 8)}")
    bits = np.unpackbits(body, bitorder="little")
    if bits[need:].any():
        raise HeaderError("non-zero padding after the payload")
    return _decode_payload("".join("1" if b else "0" for b in bits[:need]), N, R)


def write_structure(path, bs: BlockStructure) -> int:
    """Write a structure file and return the payload size in bits."""
    with open(path, "wb") as fh:
        fh.write(structure_to_bytes(bs))
    return payload_bits(bs.N, bs.R)


def read_structure(path) -> BlockStructure:
    with open(path, "rb") as fh:
        return structure_from_bytes(fh.read())
