"""Evaluation: in-FOV average precision over head boxes, angular errors of
sphere peaks, and wearer voice AP."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import sphere as sp
from .nn.functional import bilinear_matrix


@dataclass
class BoxSample:
    frame: int
    box: sp.HeadBox
    score: float
    label: bool


@dataclass
class AngularErrorReport:
    mean_e1: float
    std1: float
    mean_e2: float
    std2: float
    n_e1: int  # frames contributing to E1 (detections and GT both present)
    n_e2: int
    frames_with_gt: int = 0
    frames_without_detection: int = 0  # GT present but nothing detected

    def as_dict(self):
        return dict(vars(self))


def upsample(grid, out_w, out_h):
    """Corner-aligned bilinear resize of an (H, W) grid."""
    g = np.asarray(grid, dtype=np.float64)
    rows = bilinear_matrix(g.shape[0], out_h)
    cols = bilinear_matrix(g.shape[1], out_w)
    return rows @ g @ cols.T


def fov_scores(sphere_prob, fov_prob, camera: sp.CameraModel, out_w=640, out_h=360):
    """Final score image over the camera view: the cropped sphere probability
    plus the refined FOV probability (the image-space form of ``fuse``),
    resampled to ``out_w`` x ``out_h``."""
    fov_prob = np.asarray(fov_prob, dtype=np.float64)
    h, w = fov_prob.shape
    rows, cols = sp.crop_matrices(camera, w, h)
    total = rows @ np.asarray(sphere_prob, dtype=np.float64).T @ cols.T + fov_prob
    return upsample(total, out_w, out_h) if (w, h) != (out_w, out_h) else total


def box_scores(scores, boxes, frame=0):
    """Max score over the pixels of each box (boxes clipped to the image)."""
    scores = np.asarray(scores)
    h, w = scores.shape
    out = []
    for b in boxes:
        m = sp.box_mask([b], w, h)
        if not m.any():
            warnings.warn(f"frame {frame}: box {b} is empty after clipping, skipped")
            continue
        out.append(BoxSample(frame, b, float(scores[m].max()), bool(b.active)))
    return out


def _ap_exact(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive samples")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # one PR point per distinct score: tied samples enter together
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    prec = [Fraction(int(a), int(a + b)) for a, b in zip(tp, fp)]
    for k in range(len(prec) - 2, -1, -1):
        prec[k] = max(prec[k], prec[k + 1])
    ap = Fraction(0)
    prev = 0
    for k, t in enumerate(tp):
        if t > prev:
            ap += Fraction(int(t - prev), n_pos) * prec[k]
            prev = t
    return ap


def average_precision(samples, labels=None):
    """All-points AP with a monotone precision envelope.

    Takes BoxSamples, or parallel score and label sequences. Samples with equal
    scores form a single operating point, so the result depends only on the
    scores and labels (not their order). Computed in exact rational arithmetic.
    """
    if labels is None:
        scores = [s.score for s in samples]
        labels = [s.label for s in samples]
    else:
        scores = samples
    return float(_ap_exact(scores, labels))


def wearer_ap(probabilities, labels):
    return average_precision(list(probabilities), list(labels))


def _directions(items):
    return [d[0] if isinstance(d, tuple) else d for d in items]


def _min_dist(a, b, metric):
    return [min(sp.angular_distance(x, y, metric) for y in b) for x in a]


def spherical_errors(detections, ground_truth, metric="great_circle"):
    """E1 (detections to nearest GT) and E2 (GT to nearest detection), each
    averaged per frame, then mean and population std over frames where both
    sets are nonempty."""
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same frames")
    e1, e2 = [], []
    with_gt = missed = 0
    for det, gt in zip(detections, ground_truth):
        det, gt = _directions(det), _directions(gt)
        if gt:
            with_gt += 1
            if not det:
                missed += 1
        if not det or not gt:
            continue
        e1.append(math.fsum(_min_dist(det, gt, metric)) / len(det))
        e2.append(math.fsum(_min_dist(gt, det, metric)) / len(gt))

    def stats(v):
        if not v:
            return float("nan"), float("nan")
        return float(np.mean(v)), float(np.std(v))

    m1, s1 = stats(e1)
    m2, s2 = stats(e2)
    return AngularErrorReport(m1, s1, m2, s2, len(e1), len(e2), with_gt, missed)


def snap_to_cells(directions):
    """Ground-truth points as heat-map cells (cell centers)."""
    return [sp.cell_center(*sp.cell_of(d)) for d in directions]


def format_report(in_fov_ap, errors: AngularErrorReport, wearer=None):
    lines = [f"in_fov_ap {in_fov_ap:.4f}",
             f"mean_e1 {errors.mean_e1:.3f} std1 {errors.std1:.3f} frames {errors.n_e1}",
             f"mean_e2 {errors.mean_e2:.3f} std2 {errors.std2:.3f} frames {errors.n_e2}",
             f"frames_with_gt {errors.frames_with_gt} frames_without_detection {errors.frames_without_detection}"]
    if wearer is not None:
        lines.append(f"wearer_ap {wearer:.4f}")
    return "\n".join(lines) + "\n"
