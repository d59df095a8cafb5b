"""Audio activity network (sphere + wearer heads) and the audio-visual FOV refiner."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import sphere as sp
from .nn import functional as F
from .nn.functional import ShapeError
from .nn.layers import Conv2d, Linear, Module, ResBlockB, ResBlockC
from .nn.tensor import Tensor, as_tensor, no_grad


@dataclass(frozen=True)
class NetConfig:
    feature_planes: int = 1
    input_size: int = 128
    extractor_planes: tuple = (16, 32, 64, 128)
    sphere_hidden: int = 512
    wearer_hidden: int = 64
    av_planes: tuple = (16, 32)
    work_w: int = 320
    work_h: int = 180
    seed: int = 0

    def __post_init__(self):
        down = 2 ** len(self.extractor_planes)
        if self.input_size % down:
            raise ValueError(f"input_size {self.input_size} not divisible by {down}")
        if self.feature_planes < 1 or self.work_w < 4 or self.work_h < 4:
            raise ValueError("invalid network dimensions")

    @property
    def flat_features(self):
        side = self.input_size // 2 ** len(self.extractor_planes)
        return self.extractor_planes[-1] * side * side

    def to_dict(self):
        d = asdict(self)
        d["extractor_planes"] = list(self.extractor_planes)
        d["av_planes"] = list(self.av_planes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("extractor_planes", "av_planes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class AudioNet(Module):
    """Strided conv extractor shared by a sphere head (two FC layers to two
    90x45 maps, upsampled to 180x90) and a wearer head (two FC layers to a
    logit pair)."""

    def __init__(self, cfg: NetConfig, dtype=np.float32):
        s = cfg.seed
        planes = (cfg.feature_planes,) + tuple(cfg.extractor_planes)
        self.extractor = [Conv2d(planes[k], planes[k + 1], 3, 2, 1, seed=s, name=f"extractor.{k}", dtype=dtype)
                          for k in range(len(planes) - 1)]
        self.fc_sphere = [Linear(cfg.flat_features, cfg.sphere_hidden, seed=s, name="fc_sphere.0", dtype=dtype),
                          Linear(cfg.sphere_hidden, 2 * 90 * 45, seed=s, name="fc_sphere.1", dtype=dtype)]
        self.fc_wearer = [Linear(cfg.flat_features, cfg.wearer_hidden, seed=s, name="fc_wearer.0", dtype=dtype),
                          Linear(cfg.wearer_hidden, 2, seed=s, name="fc_wearer.1", dtype=dtype)]
        self.cfg = cfg
        self.extractor_calls = 0

    def features(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.feature_planes:
            raise ShapeError(f"audio net expects (N, {self.cfg.feature_planes}, H, W), got {x.shape}")
        if x.shape[2:] != (self.cfg.input_size, self.cfg.input_size):
            raise ShapeError(f"feature maps must be {self.cfg.input_size}x{self.cfg.input_size}, got {x.shape[2:]}")
        self.extractor_calls += 1
        for conv in self.extractor:
            x = F.relu(conv(x))
        return F.flatten(x)

    def sphere_head(self, h):
        z = self.fc_sphere[1](F.relu(self.fc_sphere[0](h)))
        z = F.reshape(z, (h.shape[0], 2, 90, 45))
        return F.bilinear_resize(z, sp.AZ_CELLS, sp.EL_CELLS)

    def wearer_head(self, h):
        return self.fc_wearer[1](F.relu(self.fc_wearer[0](h)))

    def forward(self, x):
        h = self.features(x)
        return self.sphere_head(h), self.wearer_head(h)


class AVNet(Module):
    """Fully convolutional refiner: RGB + cropped audio map (4 planes) to
    2-plane FOV logits at working resolution."""

    def __init__(self, cfg: NetConfig, dtype=np.float32):
        s = cfg.seed
        p1, p2 = cfg.av_planes
        self.c1 = ResBlockC(4, p1, 2, seed=s, name="av.c1", dtype=dtype)
        self.b1 = ResBlockB(p1, seed=s, name="av.b1", dtype=dtype)
        self.c2 = ResBlockC(p1, p2, 2, seed=s, name="av.c2", dtype=dtype)
        self.b2 = ResBlockB(p2, seed=s, name="av.b2", dtype=dtype)
        self.conv_a = Conv2d(p2, p2, 3, 1, 1, seed=s, name="av.conv_a", dtype=dtype)
        self.conv_b = Conv2d(p2, p2, 3, 1, 1, seed=s, name="av.conv_b", dtype=dtype)
        self.head = Conv2d(p2, 2, 1, seed=s, name="av.head", dtype=dtype)
        self.cfg = cfg

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 4:
            raise ShapeError(f"AV net expects (N, 4, H, W), got {x.shape}")
        h = self.b2(self.c2(self.b1(self.c1(x))))
        h = F.relu(self.conv_b(F.relu(self.conv_a(F.relu(h)))))
        # the 1x1 head and bilinear upsampling are both linear per pixel, so
        # applying the head first gives the same logits on 16x fewer pixels
        return F.bilinear_resize(self.head(h), x.shape[2], x.shape[3])


@dataclass
class WearerActivity:
    probability: float


def frame_planes(frames, dtype=np.float32):
    """uint8 (N, H, W, 3) frames to centered float (N, 3, H, W)."""
    f = np.asarray(frames)
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4 or f.shape[-1] != 3:
        raise ShapeError(f"frames must be (N, H, W, 3), got {f.shape}")
    return (np.transpose(f, (0, 3, 1, 2)).astype(dtype) / 255.0 - 0.5).astype(dtype)


def mask_background(frame, boxes):
    """Zero every pixel of an (H, W, ...) frame outside all boxes."""
    frame = np.asarray(frame)
    keep = sp.box_mask(boxes, frame.shape[1], frame.shape[0])
    return np.where(keep.reshape(keep.shape + (1,) * (frame.ndim - 2)), frame, 0).astype(frame.dtype)


class ASLModel(Module):
    def __init__(self, cfg: NetConfig, camera: sp.CameraModel | None = None, dtype=np.float32):
        self.audio = AudioNet(cfg, dtype)
        self.av = AVNet(cfg, dtype)
        self.cfg = cfg
        self.camera = (camera or sp.CameraModel()).scaled(cfg.work_w, cfg.work_h)
        self.dtype = dtype

    def crop(self, sphere_logits):
        """Differentiable active-probability crop, (N, 1, work_h, work_w)."""
        rows, cols = sp.crop_matrices(self.camera, self.cfg.work_w, self.cfg.work_h)
        p = F.getitem(F.softmax(sphere_logits, axis=1), (slice(None), slice(0, 1)))
        return F.resample(F.swap_last(p), rows, cols)

    def av_forward(self, sphere_logits, frames):
        rgb = frame_planes(frames, self.dtype)
        if rgb.shape[2:] != (self.cfg.work_h, self.cfg.work_w):
            raise ShapeError(f"frames must be {self.cfg.work_w}x{self.cfg.work_h}, got "
                             f"{rgb.shape[3]}x{rgb.shape[2]}")
        return self.av(F.concat([Tensor(rgb), self.crop(sphere_logits)], axis=1))

    def forward(self, batch):
        feats, frames = batch
        sphere_logits, wearer_logits = self.audio(feats)
        return sphere_logits, self.av_forward(sphere_logits, frames), wearer_logits

    def infer(self, feats, frames):
        """No-grad batch inference. Returns (fused (N,180,90), fov prob (N,H,W), wearer prob (N,))."""
        with no_grad():
            sphere_logits, fov_logits, wearer_logits = self.forward((feats, frames))
        fused = np.stack([sp.fuse(sphere_logits.data[k], sp.probability(fov_logits.data[k]), self.camera)
                          for k in range(sphere_logits.shape[0])])
        return fused, sp.probability(np.moveaxis(fov_logits.data, 1, 0)), \
            sp.probability(np.moveaxis(wearer_logits.data, 1, 0))

    # single-item conveniences
    def audio_forward(self, feat):
        planes = feat.planes if hasattr(feat, "planes") else np.asarray(feat)
        with no_grad():
            logits, _ = self.audio(planes[None].astype(self.dtype))
        return sp.SphericalVoiceMap(logits.data[0].astype(np.float64))

    def wearer_forward(self, feat):
        planes = feat.planes if hasattr(feat, "planes") else np.asarray(feat)
        with no_grad():
            logits = self.audio.wearer_head(self.audio.features(planes[None].astype(self.dtype)))
        return WearerActivity(float(sp.probability(logits.data[0].reshape(2, 1))[0]))

    def full_forward(self, feat, frame):
        """One frame end to end: (fused 180x90 scores, FovHeatMap, WearerActivity)."""
        planes = feat.planes if hasattr(feat, "planes") else np.asarray(feat)
        with no_grad():
            sphere_logits, fov_logits, wearer_logits = self.forward((planes[None].astype(self.dtype),
                                                                      np.asarray(frame)[None]))
        fov = sp.FovHeatMap(fov_logits.data[0].astype(np.float64), self.camera)
        fused = sp.fuse(sphere_logits.data[0].astype(np.float64), fov)
        wearer = float(sp.probability(wearer_logits.data[0].reshape(2, 1))[0])
        return fused, fov, WearerActivity(wearer)
