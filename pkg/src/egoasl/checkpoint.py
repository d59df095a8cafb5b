"""Binary checkpoint container.

Layout (little-endian): magic ``ASLCKPT1``, u32 array count, then per array
u32 name length, UTF-8 name, u8 dtype code, u8 rank, u32 per dim, raw values.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"ASLCKPT1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
CODES = {v: k for k, v in DTYPES.items()}
CONFIG_KEY = "meta/config"


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)  # name -> ndarray, insertion ordered

    @property
    def config(self):
        raw = self.arrays.get(CONFIG_KEY)
        return {} if raw is None else json.loads(bytes(raw).decode("utf-8"))

    def set_config(self, cfg: dict):
        self.arrays[CONFIG_KEY] = np.frombuffer(json.dumps(cfg, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    def group(self, prefix):
        """Arrays under ``prefix/`` with the prefix stripped."""
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in CODES:
            raise FormatError(f"array '{name}': unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BB", CODES[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, "
                              f"{len(view) - pos} left")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise FormatError("not a checkpoint (bad magic or version)")
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"bad array name at offset {pos - nlen}") from e
        code, rank = struct.unpack("<BB", take(2, f"header of '{name}'"))
        if code not in DTYPES:
            raise FormatError(f"array '{name}': unknown dtype code {code} at offset {pos - 2}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of '{name}'"))
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(bytes(take(nbytes, f"values of '{name}'")), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last array")
    return Checkpoint(arrays)


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write_bytes(path, encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())
