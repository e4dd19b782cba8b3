"""Tiny helpers for the fixed little-endian binary container formats.

Every container starts with an 8-byte ASCII magic, followed by u64 header
fields, float64 payload blocks, and length-prefixed UTF-8 strings.  All
integers and floats are little-endian; arrays are stored column-major so a
column (one snapshot, one basis vector) is contiguous on disk.
"""

from __future__ import annotations

import numpy as np

from .errors import DataMismatchError

_U64 = np.dtype("<u8")
_F64 = np.dtype("<f8")


def write_magic(fh, magic: bytes) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    fh.write(magic)


def expect_magic(fh, magic: bytes, what: str) -> None:
    got = fh.read(8)
    if got != magic:
        raise DataMismatchError(
            f"{what}: bad magic {got!r}, expected {magic!r}")


def write_u64(fh, *values: int) -> None:
    fh.write(np.asarray(values, dtype=_U64).tobytes())


def read_u64(fh, n: int, what: str = "header") -> tuple[int, ...]:
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise DataMismatchError(f"truncated {what}")
    return tuple(int(v) for v in np.frombuffer(raw, dtype=_U64))


def write_f64(fh, arr: np.ndarray) -> None:
    fh.write(np.asfortranarray(arr, dtype=np.float64).tobytes(order="F"))


def read_f64(fh, shape: tuple[int, ...], what: str = "data") -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise DataMismatchError(f"truncated {what}")
    return np.frombuffer(raw, dtype=_F64).reshape(shape, order="F").copy()


def write_str(fh, s: str) -> None:
    data = s.encode("utf-8")
    write_u64(fh, len(data))
    fh.write(data)


def read_str(fh, what: str = "string") -> str:
    (n,) = read_u64(fh, 1, what)
    raw = fh.read(n)
    if len(raw) != n:
        raise DataMismatchError(f"truncated {what}")
    return raw.decode("utf-8")


def expect_eof(fh, what: str) -> None:
    if fh.read(1):
        raise DataMismatchError(f"{what}: trailing bytes after payload")
