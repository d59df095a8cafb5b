"""Glue between simulator/dataset, features, model and metrics."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import metrics as M
from . import sphere as sp
from .features import FeatureConfig, extract, extract_frames, segment_for_frame
from .model import ASLModel, mask_background
from .nn.tensor import no_grad
from .train import TrainingSet


def training_set(audio, frames, labels, camera, kind="cor", fcfg: FeatureConfig = FeatureConfig(), indices=None):
    idx = np.arange(len(labels)) if indices is None else np.asarray(indices)
    feats = extract_frames(audio, idx, kind, fcfg)
    return TrainingSet(feats, frames[idx], [labels[k] for k in idx], camera)


@dataclass
class Predictions:
    sphere_prob: np.ndarray  # (F, 180, 90)
    fov_prob: np.ndarray  # (F, H, W)
    wearer_prob: np.ndarray  # (F,)
    fused: np.ndarray  # (F, 180, 90)


def predict(model: ASLModel, data: TrainingSet, batch_size=16, masked=False):
    sphere_p, fov_p, wearer_p, fused = [], [], [], []
    for k in range(0, len(data), batch_size):
        idx = np.arange(k, min(k + batch_size, len(data)))
        frames = data.frames[idx]
        if masked:
            frames = np.stack([mask_background(frames[i], data.work_boxes(j)) for i, j in enumerate(idx)])
        with no_grad():
            s, f, w = model((data.features[idx], frames))
        sphere_p.append(sp.probability(np.moveaxis(s.data, 1, 0)))
        fov_p.append(sp.probability(np.moveaxis(f.data, 1, 0)))
        wearer_p.append(sp.probability(np.moveaxis(w.data, 1, 0)))
        for i in range(len(idx)):
            fused.append(sp.fuse(s.data[i].astype(np.float64), fov_p[-1][i], model.camera))
    return Predictions(np.concatenate(sphere_p), np.concatenate(fov_p), np.concatenate(wearer_p), np.stack(fused))


def peaks(fused, threshold=0.0, radius=sp.GT_DISK_RADIUS):
    """NMS on the log-odds of each fused grid."""
    return [[d for d, _ in sp.nms_peaks(sp.to_log_odds(g), threshold, radius)] for g in fused]


def evaluate(pred: Predictions, labels, camera: sp.CameraModel, nms_threshold=0.0, nms_radius=sp.GT_DISK_RADIUS,
             metric="great_circle"):
    """Dict with in-FOV AP, the angular error report and wearer AP (None when
    a split has no positives)."""
    samples = []
    h, w = pred.fov_prob.shape[1:]
    cam = camera.scaled(w, h)
    for k, lab in enumerate(labels):
        if not lab.boxes:
            continue
        img = M.fov_scores(pred.sphere_prob[k], pred.fov_prob[k], cam, camera.image_w, camera.image_h)
        samples.extend(M.box_scores(img, lab.boxes, lab.frame))
    ap = M.average_precision(samples) if any(s.label for s in samples) else None
    det = peaks(pred.fused, nms_threshold, nms_radius)
    gt = [M.snap_to_cells([d for d, a in lab.sources if a]) for lab in labels]
    errors = M.spherical_errors(det, gt, metric)
    wl = [lab.wearer_active for lab in labels]
    wap = M.wearer_ap(pred.wearer_prob, wl) if any(wl) else None
    return {"in_fov_ap": ap, "errors": errors, "wearer_ap": wap, "box_samples": len(samples)}


def timed_frame(model: ASLModel, audio, frame_index, frame, kind, fcfg: FeatureConfig):
    """One frame through every stage; returns (fused, per-stage seconds)."""
    t0 = time.perf_counter()
    feat = extract(segment_for_frame(audio, frame_index, fcfg), kind, fcfg).planes[None].astype(model.dtype)
    t1 = time.perf_counter()
    with no_grad():
        h = model.audio.features(feat)
        s = model.audio.sphere_head(h)
        w = model.audio.wearer_head(h)
    t2 = time.perf_counter()
    with no_grad():
        f = model.av_forward(s, frame[None])
    t3 = time.perf_counter()
    fused = sp.fuse(s.data[0].astype(np.float64), sp.probability(f.data[0]), model.camera)
    t4 = time.perf_counter()
    return fused, {"features": t1 - t0, "audio_forward": t2 - t1, "av_forward": t3 - t2, "fuse": t4 - t3}
