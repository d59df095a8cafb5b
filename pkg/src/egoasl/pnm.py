"""Binary PGM (P5) and PPM (P6) images, 8 or 16 bit."""
from __future__ import annotations

import numpy as np

from .checkpoint import atomic_write_bytes
from .errors import FormatError


def encode_pnm(img):
    a = np.asarray(img)
    if a.dtype not in (np.uint8, np.uint16):
        raise ValueError(f"PNM images must be uint8 or uint16, got {a.dtype}")
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {a.shape}")
    maxval = 255 if a.dtype == np.uint8 else 65535
    head = magic + b"\n%d %d\n%d\n" % (a.shape[1], a.shape[0], maxval)
    return head + np.ascontiguousarray(a, dtype=">u2" if maxval > 255 else np.uint8).tobytes()


def write_pnm(path, img):
    atomic_write_bytes(path, encode_pnm(img))


def decode_pnm(buf: bytes):
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM (expected P5 or P6 at byte 0)")
    planes = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"bad PNM header field at byte {start}")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace before the raster
    w, h, maxval = fields
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise FormatError(f"bad PNM dimensions or maxval ({w}x{h}, {maxval})")
    dt = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * planes * dt.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated raster at byte {pos}: need {need} bytes, {len(buf) - pos} present")
    a = np.frombuffer(buf[pos:pos + need], dtype=dt).reshape((h, w, planes) if planes == 3 else (h, w))
    return a.astype(np.uint8 if maxval < 256 else np.uint16)


def read_pnm(path):
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def to_gray8(grid, lo=None, hi=None):
    """Linearly scale a float grid to uint8."""
    g = np.asarray(grid, dtype=np.float64)
    lo = g.min() if lo is None else lo
    hi = g.max() if hi is None else hi
    if hi <= lo:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.clip(np.round((g - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)
