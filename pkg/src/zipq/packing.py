"""Bit-level packing of small unsigned integers.

Layout convention (frozen, used by the on-disk container): values are laid
out in order, each contributing ``width`` bits starting from its least
significant bit, and the resulting bit stream fills bytes LSB-first.
Multi-byte quantities elsewhere in the package are little-endian.
"""

import numpy as np


def pack_fields(fields) -> bytes:
    """Pack ``(values, width)`` pairs into one contiguous bit stream.

    Fields are concatenated at the bit level (no per-field padding); only
    the final stream is padded up to a whole byte.
    """
    chunks = []
    for values, width in fields:
        if width == 0:
            continue
        v = np.ascontiguousarray(values, dtype=np.uint64).ravel()
        if np.any(v >> np.uint64(width)):
            raise ValueError(f"value does not fit in {width} bits")
        bits = (v[:, None] >> np.arange(width, dtype=np.uint64)) & np.uint64(1)
        chunks.append(bits.astype(np.uint8).ravel())
    if not chunks:
        return b""
    return np.packbits(np.concatenate(chunks), bitorder="little").tobytes()


def unpack_fields(buf: bytes, specs) -> list[np.ndarray]:
    """Inverse of :func:`pack_fields`; ``specs`` is ``(width, count)`` per field."""
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    out, pos = [], 0
    for width, count in specs:
        need = width * count
        if pos + need > bits.size:
            raise ValueError("bit stream too short for requested fields")
        if width == 0:
            out.append(np.zeros(count, dtype=np.uint64))
            continue
        f = bits[pos : pos + need].reshape(count, width).astype(np.uint64)
        out.append((f << np.arange(width, dtype=np.uint64)).sum(axis=1))
        pos += need
    return out


def pack_bits(values, width: int) -> bytes:
    return pack_fields([(values, width)])


def unpack_bits(buf: bytes, width: int, count: int) -> np.ndarray:
    return unpack_fields(buf, [(width, count)])[0]


def packed_nbytes(total_bits: int) -> int:
    return (total_bits + 7) // 8
