"""Binary tensor archive shared by datasets, checkpoints and outlier sets.

Layout (little-endian)::

    b"SONA"  u32 version=1  u32 entry_count
    per entry:
        u8 name_len, name (ASCII)
        u8 kind          0 = float32 tensor, 1 = UTF-8 string
        kind 0: u8 ndim, ndim x u32 dims, prod(dims) x f32 (row-major)
        kind 1: u32 byte_len, bytes

Integer data (labels, indices) is stored as float32 and is exact below 2**24.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"SONA"
VERSION = 1
KIND_TENSOR = 0
KIND_TEXT = 1

Entry = Union[np.ndarray, str]


class FormatError(ValueError):
    """Malformed archive; the message names the byte offset."""


def _validate_name(name: str) -> bytes:
    try:
        raw = name.encode("ascii")
    except UnicodeEncodeError as exc:
        raise ValueError(f"entry name {name!r} is not ASCII") from exc
    if not 0 < len(raw) <= 255:
        raise ValueError(f"entry name {name!r} must be 1..255 bytes")
    return raw


def encode_archive(entries: Mapping[str, Entry]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        raw = _validate_name(name)
        parts.append(struct.pack("<B", len(raw)) + raw)
        if isinstance(value, str):
            data = value.encode("utf-8")
            parts.append(struct.pack("<BI", KIND_TEXT, len(data)) + data)
            continue
        arr = np.asarray(value, dtype="<f4")
        if arr.ndim > 255:
            raise ValueError(f"{name}: too many dimensions")
        parts.append(struct.pack("<BB", KIND_TENSOR, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_archive(buf: bytes) -> dict[str, Entry]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated archive: need {n} bytes for {what} at offset {pos}, have {len(view) - pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    entries: dict[str, Entry] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<B", take(1, "name length"))
        if nlen == 0:
            raise FormatError(f"empty entry name at offset {start}")
        try:
            name = bytes(take(nlen, "name")).decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"non-ASCII entry name at offset {start + 1}") from None
        if name in entries:
            raise FormatError(f"duplicate entry {name!r} at offset {start}")
        kind_at = pos
        (kind,) = struct.unpack("<B", take(1, "kind"))
        if kind == KIND_TEXT:
            (blen,) = struct.unpack("<I", take(4, "text length"))
            try:
                entries[name] = bytes(take(blen, "text")).decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"invalid UTF-8 in entry {name!r} at offset {pos - blen}") from None
        elif kind == KIND_TENSOR:
            (ndim,) = struct.unpack("<B", take(1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
            n = 1
            for d in dims:
                n *= d
            payload = take(4 * n, f"payload of {name!r}")
            try:
                entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            except ValueError:
                raise FormatError(f"unrepresentable dims {dims} for entry {name!r} at offset {kind_at + 2}") from None
        else:
            raise FormatError(f"unknown entry kind {kind} at offset {kind_at}")
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes at offset {pos}")
    return entries


def save_archive(entries: Mapping[str, Entry], path: str | Path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_archive(entries)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_archive(path: str | Path) -> dict[str, Entry]:
    path = Path(path)
    try:
        return decode_archive(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
