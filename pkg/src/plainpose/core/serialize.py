"""VTPT tensor records and the checkpoint container.

VTPT record: magic ``VTPT``, u32 version (1), u8 dtype code (0 = f32,
1 = f64), u8 ndim, ndim x u64 dims, then the little-endian row-major payload.

Checkpoint: u32 entry count, then per entry a u16 name length, the UTF-8
name bytes and an embedded VTPT record.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"VTPT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    f.write(MAGIC)
    f.write(struct.pack("<IBB", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated record")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != MAGIC:
        raise FormatError("bad magic, not a VTPT record")
    version, code, ndim = struct.unpack("<IBB", _read_exact(f, 6))
    if version != VERSION:
        raise FormatError(f"unsupported VTPT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    payload = _read_exact(f, count * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(path, entries: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"entry name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, arr)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate entry {name!r}")
            out[name] = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after last entry")
    return out
