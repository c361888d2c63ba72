"""LVX1 binary container plus the key=value text blocks used for configs and sidecars.

A single table is stored as::

    b"LVX1" | rows:u32 | dim:u32 | rows*dim float32 (row-major, little-endian)

A checkpoint stores several named tables back to back::

    b"LVX1" | n_sections:u32 | { name_len:u32 | name:utf-8 | rows:u32 | dim:u32 | data }*

The two layouts are told apart by the caller, not by the file.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"LVX1"
_U32 = struct.Struct("<I")


class ContainerError(ValueError):
    """Raised on a malformed LVX1 file."""


def _as_table(array) -> np.ndarray:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        arr = arr.reshape(arr.shape[0], -1)
    return np.ascontiguousarray(arr)


def _table_bytes(array) -> bytes:
    arr = _as_table(array)
    rows, dim = arr.shape
    return _U32.pack(rows) + _U32.pack(dim) + arr.tobytes(order="C")


def _read_u32(buf: memoryview, offset: int) -> tuple[int, int]:
    if offset + 4 > len(buf):
        raise ContainerError(f"truncated header at byte {offset}")
    return _U32.unpack_from(buf, offset)[0], offset + 4


def _read_table(buf: memoryview, offset: int) -> tuple[np.ndarray, int]:
    rows, offset = _read_u32(buf, offset)
    dim, offset = _read_u32(buf, offset)
    nbytes = rows * dim * 4
    if offset + nbytes > len(buf):
        raise ContainerError(
            f"table of {rows}x{dim} needs {nbytes} bytes, {len(buf) - offset} left"
        )
    data = np.frombuffer(buf[offset : offset + nbytes], dtype="<f4").reshape(rows, dim)
    return data.astype(np.float32), offset + nbytes


def _check_magic(buf: memoryview) -> None:
    if bytes(buf[:4]) != MAGIC:
        raise ContainerError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")


def dumps_table(array) -> bytes:
    return MAGIC + _table_bytes(array)


def loads_table(data: bytes) -> np.ndarray:
    buf = memoryview(data)
    _check_magic(buf)
    table, offset = _read_table(buf, 4)
    if offset != len(buf):
        raise ContainerError(f"{len(buf) - offset} trailing bytes after table")
    return table


def dumps_sections(sections: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(len(sections))]
    for name, array in sections.items():
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_table_bytes(array))
    return b"".join(parts)


def loads_sections(data: bytes) -> dict[str, np.ndarray]:
    buf = memoryview(data)
    _check_magic(buf)
    count, offset = _read_u32(buf, 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, offset = _read_u32(buf, offset)
        name = bytes(buf[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        out[name], offset = _read_table(buf, offset)
    if offset != len(buf):
        raise ContainerError(f"{len(buf) - offset} trailing bytes after sections")
    return out


def format_kv(values: Mapping[str, object]) -> str:
    """Render a flat mapping as sorted ``key=value`` lines."""
    return "".join(f"{key}={values[key]}\n" for key in sorted(values))


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines. Blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def config_hash(values: Mapping[str, object]) -> str:
    return hashlib.sha256(format_kv(values).encode("utf-8")).hexdigest()[:16]


def write_sidecar(artifact: Path, values: Mapping[str, object]) -> Path:
    """Write ``<artifact>.meta`` recording seeds/config plus a hash of both."""
    meta = dict(values)
    meta["config_hash"] = config_hash(values)
    path = Path(str(artifact) + ".meta")
    path.write_text(format_kv(meta), encoding="utf-8")
    return path
