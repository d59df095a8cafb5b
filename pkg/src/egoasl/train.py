"""Two-stage training and checkpointing.

Stage 1 fits the extractor, sphere head and AV refiner on
``CE(sphere) + CE(fov)``. Stage 2 trains only the wearer head with everything
else frozen; the extractor then runs without a graph.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sphere as sp
from .checkpoint import Checkpoint, atomic_write_bytes, load_checkpoint, save_checkpoint
from .features import FEATURE_KINDS
from .model import ASLModel, NetConfig, mask_background
from .nn import functional as F
from .nn.optim import Adam
from .nn.tensor import no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def split_kind(kind):
    """'cor+box' -> ('cor', True)."""
    if kind.endswith("+box"):
        return kind[:-4], True
    return kind, False


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    feature_kind: str = "cor"
    use_box_mask: bool = False
    stage: int = 0  # 0 runs both stages, 1 or 2 just that one
    stage2_epochs: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.stage not in (0, 1, 2):
            raise ValueError("stage must be 0, 1 or 2")
        if split_kind(self.feature_kind)[0] not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")

    @property
    def base_kind(self):
        return split_kind(self.feature_kind)[0]

    @property
    def masked(self):
        return self.use_box_mask or split_kind(self.feature_kind)[1]


@dataclass
class TrainingSet:
    """Aligned per-frame arrays: features (F, P, S, S), frames (F, H, W, 3)
    uint8 at working resolution, labels with boxes in camera pixels."""
    features: np.ndarray
    frames: np.ndarray
    labels: list
    camera: sp.CameraModel

    def __post_init__(self):
        if not len(self.features) == len(self.frames) == len(self.labels):
            raise ValueError("features, frames and labels must have equal length")

    def __len__(self):
        return len(self.labels)

    def work_boxes(self, k):
        h, w = self.frames.shape[1:3]
        sx, sy = w / self.camera.image_w, h / self.camera.image_h
        return [b.scaled(sx, sy) for b in self.labels[k].boxes]

    def batch(self, idx, masked=False):
        h, w = self.frames.shape[1:3]
        frames = self.frames[idx]
        if masked:
            frames = np.stack([mask_background(frames[i], self.work_boxes(k)) for i, k in enumerate(idx)])
        sphere_t = np.stack([sp.render_gt_sphere([d for d, a in self.labels[k].sources if a]) for k in idx])
        fov_t = np.stack([sp.render_gt_fov(self.work_boxes(k), w, h) for k in idx])
        wearer = np.array([self.labels[k].wearer_active for k in idx])
        return self.features[idx], frames, sphere_t, fov_t, sp.one_hot(wearer).T.copy()


def stage1_loss(model: ASLModel, feats, frames, sphere_t, fov_t):
    h = model.audio.features(feats)
    s = model.audio.sphere_head(h)
    f = model.av_forward(s, frames)
    return F.add(F.softmax_cross_entropy(s, sphere_t), F.softmax_cross_entropy(f, fov_t))


def stage2_loss(model: ASLModel, flat, wearer_t):
    return F.softmax_cross_entropy(model.audio.wearer_head(flat), wearer_t)


def stage_parameters(model: ASLModel, stage):
    named = model.named_parameters()
    if stage == 1:
        return [(n, p) for n, p in named if not n.startswith("audio.fc_wearer")]
    return [(n, p) for n, p in named if n.startswith("audio.fc_wearer")]


def _check_finite(loss, stage, epoch, step, model):
    val = float(loss.data)
    if not math.isfinite(val):
        norms = {n: float(np.linalg.norm(p.data)) for n, p in model.named_parameters()}
        worst = sorted(norms.items(), key=lambda kv: -kv[1])[:3]
        raise TrainingError(f"non-finite loss {val} in stage {stage} epoch {epoch} step {step}; "
                            f"largest parameter norms {worst}")
    return val


def stage1_step(model, opt, batch):
    feats, frames, sphere_t, fov_t, _ = batch
    loss = stage1_loss(model, feats, frames, sphere_t, fov_t)
    val = _check_finite(loss, 1, -1, opt.step_count, model)
    model.zero_grad()
    loss.backward()
    opt.step()
    return val


def stage2_step(model, opt, flat, wearer_t):
    loss = stage2_loss(model, flat, wearer_t)
    val = _check_finite(loss, 2, -1, opt.step_count, model)
    model.zero_grad()
    loss.backward()
    opt.step()
    return val


def extract_flat(model: ASLModel, features, batch_size=64):
    """Frozen extractor output for every frame, (F, flat) without a graph."""
    out = []
    with no_grad():
        for k in range(0, len(features), batch_size):
            out.append(model.audio.features(features[k:k + batch_size]).data)
    return np.concatenate(out)


def make_checkpoint(model: ASLModel, opt: Adam | None, names, tcfg: TrainConfig, stage, epoch, extra=None):
    ck = Checkpoint()
    for n, p in model.named_parameters():
        ck.arrays["param/" + n] = p.data
    if opt is not None:
        for n, m, v in zip(names, opt.m, opt.v):
            ck.arrays["adam/m/" + n] = m
            ck.arrays["adam/v/" + n] = v
        ck.arrays["adam/step"] = np.array([opt.step_count], dtype=np.int64)
    ck.arrays["meta/stage"] = np.array([stage], dtype=np.int64)
    ck.arrays["meta/epoch"] = np.array([epoch], dtype=np.int64)
    cfg = {"net": model.cfg.to_dict(), "train": asdict(tcfg),
           "camera": {"h_fov": model.camera.h_fov, "v_fov": model.camera.v_fov,
                      "forward": list(model.camera.forward)}}
    cfg.update(extra or {})
    ck.set_config(cfg)
    return ck


def model_from_checkpoint(ck: Checkpoint, dtype=np.float32) -> ASLModel:
    cfg = ck.config
    cam = cfg.get("camera", {})
    camera = sp.CameraModel(h_fov=cam.get("h_fov", 80.0), v_fov=cam.get("v_fov", 45.0),
                            forward=tuple(cam.get("forward", (0.0, 0.0))))
    model = ASLModel(NetConfig.from_dict(cfg["net"]), camera, dtype)
    model.load_state_dict(ck.group("param"))
    return model


def restore_optimizer(opt: Adam, names, ck: Checkpoint):
    m, v = ck.group("adam/m"), ck.group("adam/v")
    for k, n in enumerate(names):
        if n not in m or n not in v:
            raise KeyError(f"optimizer state for '{n}' missing from checkpoint")
        if m[n].shape != opt.m[k].shape:
            raise ValueError(f"shape mismatch for 'adam/m/{n}': checkpoint {m[n].shape}, model {opt.m[k].shape}")
        opt.m[k] = m[n].copy()
        opt.v[k] = v[n].copy()
    opt.step_count = int(ck.arrays["adam/step"][0])


@dataclass
class TrainResult:
    model: ASLModel
    losses: list = field(default_factory=list)  # (epoch, stage, mean loss)
    freeze_verified: bool | None = None
    checkpoint: Checkpoint | None = None


def _frozen_snapshot(model):
    return {n: p.data.tobytes() for n, p in model.named_parameters() if not n.startswith("audio.fc_wearer")}


def write_loss_log(path, losses):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "stage", "loss"])
    for e, s, l in losses:
        w.writerow([e, s, f"{l:.8f}"])
    atomic_write_bytes(path, buf.getvalue().encode())


def train(data: TrainingSet, tcfg: TrainConfig, net_cfg: NetConfig | None = None, model: ASLModel | None = None,
          checkpoint_path=None, log_path=None, resume: Checkpoint | None = None, progress=None):
    """Run stage 1 and/or stage 2. Writes a checkpoint after every epoch when
    ``checkpoint_path`` is given; ``resume`` continues from such a checkpoint."""
    if model is None:
        if resume is not None:
            model = model_from_checkpoint(resume)
        else:
            net_cfg = net_cfg or NetConfig(seed=tcfg.seed)
            model = ASLModel(net_cfg, data.camera.scaled(data.frames.shape[2], data.frames.shape[1]))
    n = len(data)
    result = TrainResult(model)
    stages = (1, 2) if tcfg.stage == 0 else (tcfg.stage,)
    done_stage, done_epoch = 0, -1
    if resume is not None:
        done_stage = int(resume.arrays["meta/stage"][0])
        done_epoch = int(resume.arrays["meta/epoch"][0])
        result.losses = [tuple(r) for r in resume.config.get("losses", [])]

    def save(opt, names, stage, epoch):
        extra = {"losses": [list(r) for r in result.losses]}
        ck = make_checkpoint(model, opt, names, tcfg, stage, epoch, extra)
        result.checkpoint = ck
        if checkpoint_path:
            save_checkpoint(checkpoint_path, ck)
        if log_path:
            write_loss_log(log_path, result.losses)

    if 1 in stages and done_stage <= 1:
        named = stage_parameters(model, 1)
        names = [nm for nm, _ in named]
        opt = Adam([p for _, p in named], lr=tcfg.lr)
        start = 0
        if resume is not None and done_stage == 1:
            restore_optimizer(opt, names, resume)
            start = done_epoch + 1
        for epoch in range(start, tcfg.epochs):
            perm = np.random.default_rng([tcfg.seed, 1, epoch]).permutation(n)
            total = 0.0
            for k in range(0, n, tcfg.batch_size):
                batch = data.batch(perm[k:k + tcfg.batch_size], tcfg.masked)
                try:
                    val = stage1_step(model, opt, batch)
                except TrainingError as e:
                    raise TrainingError(f"{e} (epoch {epoch}, batch {k // tcfg.batch_size})") from None
                total += val * len(batch[0])
                if progress:
                    progress(1, epoch, k, val)
            result.losses.append((epoch, 1, total / n))
            log.info("stage 1 epoch %d loss %.5f", epoch, total / n)
            save(opt, names, 1, epoch)

    if 2 in stages:
        before = _frozen_snapshot(model)
        named = stage_parameters(model, 2)
        names = [nm for nm, _ in named]
        opt = Adam([p for _, p in named], lr=tcfg.lr)
        start = 0
        if resume is not None and done_stage == 2:
            restore_optimizer(opt, names, resume)
            start = done_epoch + 1
        flat = extract_flat(model, data.features)
        wearer = np.array([lab.wearer_active for lab in data.labels])
        targets = sp.one_hot(wearer).T.copy()
        for epoch in range(start, tcfg.stage2_epochs or tcfg.epochs):
            perm = np.random.default_rng([tcfg.seed, 2, epoch]).permutation(n)
            total = 0.0
            for k in range(0, n, tcfg.batch_size):
                idx = perm[k:k + tcfg.batch_size]
                total += stage2_step(model, opt, flat[idx], targets[idx]) * len(idx)
                if progress:
                    progress(2, epoch, k, None)
            result.losses.append((epoch, 2, total / n))
            log.info("stage 2 epoch %d loss %.5f", epoch, total / n)
            save(opt, names, 2, epoch)
        result.freeze_verified = before == _frozen_snapshot(model)
    return result
