"""On-disk dataset layout.

    <dir>/audio.wav                 multichannel, 48 kHz
    <dir>/frames/frame_%06d.ppm     one P6 image per video frame
    <dir>/labels.jsonl              one record per frame, strictly increasing
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import sphere as sp
from .checkpoint import atomic_write_bytes
from .errors import FormatError
from .pnm import read_pnm, write_pnm
from .sim import FrameGroundTruth, SimulatedData, downsample
from .wavio import read_wav, write_wav

AUDIO = "audio.wav"
FRAMES = "frames"
LABELS = "labels.jsonl"


def frame_name(k):
    return f"frame_{k:06d}.ppm"


def record_to_truth(rec) -> FrameGroundTruth:
    boxes = [sp.HeadBox(float(b["x"]), float(b["y"]), float(b["w"]), float(b["h"]), int(b.get("person_id", 0)),
                        bool(b["active"])) for b in rec.get("boxes", [])]
    sources = [(sp.Direction(float(s["az"]), float(s["el"])), bool(s["active"])) for s in rec.get("sources", [])]
    return FrameGroundTruth(int(rec["frame"]), sources, boxes, bool(rec.get("wearer_active", False)))


def encode_labels(labels):
    return "".join(json.dumps(lab.to_record(), sort_keys=True) + "\n" for lab in labels).encode()


def parse_labels(text):
    out = []
    last = -1
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            lab = record_to_truth(rec)
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"labels line {lineno}: {e}") from None
        if lab.frame <= last:
            raise FormatError(f"labels line {lineno}: frame {lab.frame} is not after frame {last}")
        last = lab.frame
        out.append(lab)
    return out


def read_labels(path):
    with open(path, encoding="utf-8") as f:
        return parse_labels(f.read())


def write_labels(path, labels):
    atomic_write_bytes(path, encode_labels(labels))


def write_dataset(out_dir, data: SimulatedData, sample_format="float32"):
    """Write audio, frames and labels. Frames are written as given."""
    os.makedirs(os.path.join(out_dir, FRAMES), exist_ok=True)
    write_wav(os.path.join(out_dir, AUDIO), data.audio, data.spec.sample_rate, sample_format)
    for k, img in enumerate(data.frames):
        write_pnm(os.path.join(out_dir, FRAMES, frame_name(k)), img)
    write_labels(os.path.join(out_dir, LABELS), data.labels)


@dataclass
class Dataset:
    root: str
    audio: np.ndarray
    sample_rate: int
    labels: list

    @classmethod
    def open(cls, root, video_rate=20):
        seg = read_wav(os.path.join(root, AUDIO))
        labels = read_labels(os.path.join(root, LABELS))
        if labels:
            need = (labels[-1].frame + 1) * (seg.sample_rate // video_rate)
            if need > seg.samples.shape[1]:
                raise FormatError(f"labels reach frame {labels[-1].frame} but audio holds only "
                                  f"{seg.samples.shape[1]} samples ({need} needed)")
        return cls(root, seg.samples, seg.sample_rate, labels)

    def frame_path(self, k):
        return os.path.join(self.root, FRAMES, frame_name(k))

    def frame_size(self):
        """(width, height) of the stored frames."""
        img = read_pnm(self.frame_path(self.labels[0].frame))
        return img.shape[1], img.shape[0]

    def load_frames(self, indices, work_w, work_h):
        out = np.empty((len(indices), work_h, work_w, 3), dtype=np.uint8)
        for i, k in enumerate(indices):
            img = read_pnm(self.frame_path(self.labels[k].frame))
            if img.ndim != 3:
                raise FormatError(f"{self.frame_path(k)} is not an RGB image")
            out[i] = downsample(img, work_w, work_h)
        return out
