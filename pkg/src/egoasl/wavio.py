"""RIFF/WAVE reader and writer for interleaved PCM16, PCM24 and float32."""
from __future__ import annotations

import struct

import numpy as np

from .checkpoint import atomic_write_bytes
from .errors import FormatError
from .features import MultiChannelAudioSegment, normalize_audio

PCM, FLOAT, EXTENSIBLE = 1, 3, 0xFFFE


def _parse_fmt(body, offset):
    if len(body) < 16:
        raise FormatError(f"fmt chunk too short ({len(body)} bytes) at byte {offset}")
    tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", body[:16])
    if tag == EXTENSIBLE:
        if len(body) < 40:
            raise FormatError(f"extensible fmt chunk too short at byte {offset}")
        tag = struct.unpack("<H", body[24:26])[0]
    if tag not in (PCM, FLOAT):
        raise FormatError(f"unsupported codec {tag:#06x} in fmt chunk at byte {offset}")
    if (tag, bits) not in ((PCM, 16), (PCM, 24), (FLOAT, 32)):
        raise FormatError(f"unsupported sample format: codec {tag} with {bits} bits at byte {offset + 14}")
    if channels < 1 or align != channels * bits // 8:
        raise FormatError(f"inconsistent block align {align} for {channels} channels at byte {offset + 12}")
    return tag, channels, rate, bits


def decode_wav(buf: bytes):
    """(samples (channels, frames) float64 in [-1, 1], sample_rate)."""
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError("missing RIFF/WAVE header at byte 0")
    pos = 12
    fmt = None
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack("<I", buf[pos + 4:pos + 8])
        body_at = pos + 8
        if cid == b"fmt ":
            if body_at + size > len(buf):
                raise FormatError(f"fmt chunk at byte {pos} runs past end of file")
            fmt = _parse_fmt(buf[body_at:body_at + size], body_at)
        elif cid == b"data":
            if fmt is None:
                raise FormatError(f"data chunk at byte {pos} precedes fmt chunk")
            tag, channels, rate, bits = fmt
            avail = len(buf) - body_at
            if size > avail:
                raise FormatError(f"truncated data chunk at byte {pos}: header declares {size} bytes, "
                                  f"{avail} present")
            width = bits // 8
            if size % (width * channels):
                raise FormatError(f"data chunk at byte {pos} is not a whole number of sample frames")
            raw = buf[body_at:body_at + size]
            if tag == FLOAT:
                x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
                depth = None
            elif bits == 16:
                x = np.frombuffer(raw, dtype="<i2")
                depth = 16
            else:
                b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
                x = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
                x = np.where(x >= 1 << 23, x - (1 << 24), x)
                depth = 24
            x = x.reshape(-1, channels).T
            if depth is None and np.abs(x).max(initial=0) > 1:
                raise FormatError(f"float samples outside [-1, 1] in data chunk at byte {pos}")
            return normalize_audio(x, depth, rate).samples, rate
        pos = body_at + size + (size & 1)
    raise FormatError(f"no data chunk found (scanned to byte {pos})")


def read_wav(path) -> MultiChannelAudioSegment:
    with open(path, "rb") as f:
        samples, rate = decode_wav(f.read())
    return MultiChannelAudioSegment(samples, rate)


def encode_wav(samples, sample_rate, sample_format="float32"):
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be (channels, frames)")
    channels = x.shape[0]
    inter = x.T
    if sample_format == "float32":
        tag, bits = FLOAT, 32
        data = np.ascontiguousarray(inter, dtype="<f4").tobytes()
    elif sample_format == "pcm16":
        tag, bits = PCM, 16
        data = np.clip(np.round(inter * 32768), -32768, 32767).astype("<i2").tobytes()
    elif sample_format == "pcm24":
        tag, bits = PCM, 24
        v = np.clip(np.round(inter * 8388608), -8388608, 8388607).astype(np.int32).ravel()
        data = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    if len(data) & 1:
        body += b"\0"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, samples, sample_rate, sample_format="float32"):
    atomic_write_bytes(path, encode_wav(samples, sample_rate, sample_format))
