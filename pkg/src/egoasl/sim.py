"""Synthetic egocentric conversation scenes.

A scene is a sequence of short segments. Each segment seats 1-4 people at
fixed world positions around the wearer; a conversation schedule decides who
talks in which frames. The wearer's head yaws (random walk) and pitches
(mean-reverting), so device-frame directions drift continuously.

Audio is free-field: each talker emits amplitude-modulated, band-limited
noise which reaches each mic with its propagation delay (linear-interpolation
fractional delay, updated per sample) and 1/r attenuation. Frames show head
rectangles with a mouth band that is bright while the person talks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sphere as sp
from .errors import SpecError

SPEED_OF_SOUND = 343.0
REFERENCE_RMS = 0.01  # rms of a talker at 1 m
HEAD_SIZE = (0.18, 0.24)  # physical width, height in meters
BACKGROUND = 96


@dataclass(frozen=True)
class MicArrayGeometry:
    positions: tuple = ((0.07, 0.0, 0.02), (-0.07, 0.0, 0.02), (0.08, -0.01, -0.06), (-0.08, -0.01, -0.06))
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        p = self.array
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        off = d[~np.eye(len(p), dtype=bool)]
        if len(p) < 2 or (off <= 0).any() or off.max() >= 0.5:
            raise SpecError("mic positions must be distinct with aperture < 0.5 m")

    @property
    def array(self):
        return np.asarray(self.positions, dtype=np.float64)

    @property
    def channels(self):
        return len(self.positions)


@dataclass
class SourceSpec:
    """A talker at a fixed world direction/distance, present for frames
    [present[0], present[1]) and talking during ``intervals`` (frame ranges)."""
    az: float
    el: float
    distance: float
    present: tuple
    intervals: list = field(default_factory=list)
    person_id: int = 0
    tone: tuple = (200, 160, 140)


@dataclass
class WearerSpec:
    mouth: tuple = (0.0, -0.08, -0.05)
    intervals: list = field(default_factory=list)


@dataclass
class HeadMotion:
    yaw_step_deg: float = 1.5  # random-walk std per frame
    pitch_std_deg: float = 3.0
    pitch_limit_deg: float = 8.0
    pitch_tau_frames: float = 20.0
    seed: int = 0


@dataclass
class SceneSpec:
    sources: list
    wearer: WearerSpec
    n_frames: int
    snr_db: float = 10.0
    head_motion: HeadMotion | None = field(default_factory=HeadMotion)
    seed: int = 0
    sample_rate: int = 48000
    video_rate: int = 20

    def __post_init__(self):
        if self.n_frames < 1:
            raise SpecError("scene needs at least one frame")
        if self.sample_rate % self.video_rate:
            raise SpecError("sample rate must be a multiple of the video rate")

    @property
    def samples_per_frame(self):
        return self.sample_rate // self.video_rate

    @property
    def duration(self):
        return self.n_frames / self.video_rate


@dataclass
class FrameGroundTruth:
    frame: int
    sources: list  # [(Direction, active)] device frame, present talkers only
    boxes: list  # [HeadBox] in camera pixel coordinates
    wearer_active: bool

    def to_record(self):
        return {
            "frame": self.frame,
            "boxes": [{"x": round(b.x, 3), "y": round(b.y, 3), "w": round(b.w, 3), "h": round(b.h, 3),
                       "person_id": b.person_id, "active": bool(b.active)} for b in self.boxes],
            "sources": [{"az": round(d.az, 4), "el": round(d.el, 4), "active": bool(a)} for d, a in self.sources],
            "wearer_active": bool(self.wearer_active),
        }


@dataclass(frozen=True)
class SimConfig:
    """Random scene template."""
    n_frames: int = 2000
    seed: int = 0
    snr_db: float = 10.0
    segment_frames: int = 20
    participants: tuple = (1, 4)
    max_active: int = 3
    distance: tuple = (1.0, 2.5)
    elevation_deg: float = 8.0
    min_separation_deg: float = 25.0
    front_share: float = 0.5
    front_span_deg: float = 45.0
    wearer_share: float = 0.2
    silence_share: float = 0.15
    turn_frames: tuple = (8, 30)
    moving_head: bool = True
    yaw_step_deg: float = 1.5
    sample_rate: int = 48000
    video_rate: int = 20


def active_at(intervals, frame):
    return any(a <= frame < b for a, b in intervals)


def _activity_mask(intervals, n_frames):
    m = np.zeros(n_frames, dtype=bool)
    for a, b in intervals:
        m[max(a, 0):min(b, n_frames)] = True
    return m


def _merge(frames):
    """Sorted frame indices to [start, end) intervals."""
    out = []
    for f in frames:
        if out and out[-1][1] == f:
            out[-1][1] = f + 1
        else:
            out.append([f, f + 1])
    return [tuple(x) for x in out]


def _seat_people(rng, k, cfg: SimConfig, facing=0.0):
    azs = []
    while len(azs) < k:
        if rng.uniform() < cfg.front_share:
            a = sp.wrap_azimuth(facing + rng.uniform(-cfg.front_span_deg, cfg.front_span_deg))
        else:
            a = rng.uniform(-180, 180)
        if all(abs(sp.wrap_azimuth(a - b)) >= cfg.min_separation_deg for b in azs):
            azs.append(a)
    return azs


def make_scene(cfg: SimConfig) -> SceneSpec:
    """Draw a concrete scene from the template (pure function of ``cfg``)."""
    rng = np.random.default_rng([cfg.seed, 1])
    motion = HeadMotion(cfg.yaw_step_deg, seed=int(rng.integers(2**31))) if cfg.moving_head else None
    yaw, _ = _pose(motion, cfg.n_frames)
    sources, wearer_frames = [], []
    pid = 0
    for start in range(0, cfg.n_frames, cfg.segment_frames):
        end = min(start + cfg.segment_frames, cfg.n_frames)
        k = int(rng.integers(cfg.participants[0], cfg.participants[1] + 1))
        seg = []
        for az in _seat_people(rng, k, cfg, float(yaw[start])):
            tone = tuple(int(v) for v in rng.integers(120, 230, size=3))
            seg.append(SourceSpec(az=float(az), el=float(rng.uniform(-cfg.elevation_deg, cfg.elevation_deg)),
                                  distance=float(rng.uniform(*cfg.distance)), present=(start, end),
                                  person_id=pid, tone=tone))
            pid += 1
        talk = [[] for _ in seg]
        t = start
        while t < end:
            dur = int(rng.integers(cfg.turn_frames[0], cfg.turn_frames[1] + 1))
            span = range(t, min(t + dur, end))
            u = rng.uniform()
            if u < cfg.silence_share:
                pass
            elif u < cfg.silence_share + cfg.wearer_share:
                wearer_frames.extend(span)
            else:
                n_talk = min(len(seg), cfg.max_active, 1 + int(rng.choice(3, p=[0.7, 0.2, 0.1])))
                for who in rng.choice(len(seg), size=n_talk, replace=False):
                    talk[who].extend(span)
            t += dur
        for s, frames in zip(seg, talk):
            s.intervals = _merge(sorted(frames))
        sources.extend(seg)
    return SceneSpec(sources=sources, wearer=WearerSpec(intervals=_merge(wearer_frames)), n_frames=cfg.n_frames,
                     snr_db=cfg.snr_db, head_motion=motion, seed=cfg.seed, sample_rate=cfg.sample_rate,
                     video_rate=cfg.video_rate)


def head_pose(spec: SceneSpec):
    """Per-frame (yaw, pitch) in degrees."""
    return _pose(spec.head_motion, spec.n_frames)


def _pose(hm, n):
    if hm is None:
        return np.zeros(n), np.zeros(n)
    rng = np.random.default_rng([hm.seed, 2])
    yaw = np.cumsum(rng.normal(0.0, hm.yaw_step_deg, n))
    pitch = np.empty(n)
    a = math.exp(-1.0 / hm.pitch_tau_frames)
    p = rng.normal(0.0, hm.pitch_std_deg)
    kick = hm.pitch_std_deg * math.sqrt(1 - a * a)
    for t in range(n):
        pitch[t] = p
        p = a * p + rng.normal(0.0, kick)
    return yaw, np.clip(pitch, -hm.pitch_limit_deg, hm.pitch_limit_deg)


def _rotation(yaw, pitch):
    """Device-to-world rotation(s): yaw about +y (positive turns right), then pitch (positive looks up)."""
    y, p = np.radians(yaw), np.radians(pitch)
    cy, sy, cp, spi = np.cos(y), np.sin(y), np.cos(p), np.sin(p)
    ry = np.stack([np.stack([cy, 0 * cy, sy], -1), np.stack([0 * cy, 1 + 0 * cy, 0 * cy], -1),
                   np.stack([-sy, 0 * cy, cy], -1)], -2)
    rp = np.stack([np.stack([1 + 0 * cp, 0 * cp, 0 * cp], -1), np.stack([0 * cp, cp, spi], -1),
                   np.stack([0 * cp, -spi, cp], -1)], -2)
    return ry @ rp


def source_device_positions(spec: SceneSpec, src: SourceSpec, frames=None):
    """(F, 3) device-frame positions of a talker at the given frames."""
    yaw, pitch = head_pose(spec)
    frames = np.arange(spec.n_frames) if frames is None else np.asarray(frames)
    world = src.distance * sp.direction_vector(src.az, src.el)
    rot = _rotation(yaw[frames], pitch[frames])
    return np.einsum("fji,j->fi", rot, world)


def _talker_signal(rng, n, fs):
    """Pink-ish 200-4000 Hz noise with a 4 Hz envelope that never reaches zero."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    band = (f >= 200) & (f <= 4000)
    spec[~band] = 0
    spec[band] /= np.sqrt(f[band] / 200.0)
    x = np.fft.irfft(spec, n)
    t = np.arange(n) / fs
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
    return x * (REFERENCE_RMS / np.sqrt(np.mean(x * x)))


def _propagate(out, emitted, n0, pre, mic_pos, pos_per_frame, spf, c, fs):
    """Add a moving point source to every mic for output samples [n0, n0 + len(emitted) - pre - 1):
    delayed by r/c and scaled by 1/r. ``emitted[pre + k]`` is the source at sample n0 + k."""
    n1 = n0 + len(emitted) - pre - 1
    frame_t = (np.arange(len(pos_per_frame)) + 0.5) * spf
    t = np.arange(n0, n1)
    for m, mp in enumerate(mic_pos):
        r_f = np.linalg.norm(pos_per_frame - mp, axis=1)
        r = np.interp(t, frame_t, r_f)
        if r.min() < 0.01:
            raise SpecError("source within 1 cm of a microphone")
        src_idx = (t - n0) - r / c * fs + pre
        i0 = np.floor(src_idx).astype(np.int64)
        frac = src_idx - i0
        out[m, n0:n1] += ((1 - frac) * emitted[i0] + frac * emitted[i0 + 1]) / r


def synthesize_audio(spec: SceneSpec, geometry: MicArrayGeometry = MicArrayGeometry()):
    """(channels, n_frames * samples_per_frame) float64 mic signals."""
    fs, spf = spec.sample_rate, spec.samples_per_frame
    n = spec.n_frames * spf
    pre = 1024  # > max propagation delay in samples
    out = np.zeros((geometry.channels, n))
    mics = geometry.array
    c = geometry.speed_of_sound
    talkers = [(s, source_device_positions(spec, s)) for s in spec.sources]
    talkers.append((spec.wearer, np.tile(np.asarray(spec.wearer.mouth, dtype=np.float64), (spec.n_frames, 1))))
    for k, (s, pos) in enumerate(talkers):
        mask = _activity_mask(s.intervals, spec.n_frames)
        if not mask.any():
            continue
        on = np.flatnonzero(mask)
        # emission window covering every talk interval plus the propagation tail
        n0 = int(on[0]) * spf
        n1 = min(n, (int(on[-1]) + 1) * spf + pre)
        gate = np.repeat(mask, spf)[n0:n1].astype(np.float64)
        emitted = np.zeros(n1 - n0 + pre + 1)
        emitted[pre:pre + n1 - n0] = _talker_signal(np.random.default_rng([spec.seed, 4, k]), n1 - n0, fs) * gate
        _propagate(out, emitted, n0, pre, mics, pos, spf, c, fs)
    if math.isfinite(spec.snr_db):
        rng = np.random.default_rng([spec.seed, 3])
        out += rng.normal(0.0, REFERENCE_RMS * 10 ** (-spec.snr_db / 20), size=out.shape)
    return out


def frame_ground_truth(spec: SceneSpec, camera: sp.CameraModel, frame: int, yaw_pitch=None) -> FrameGroundTruth:
    yaw, pitch = yaw_pitch if yaw_pitch is not None else head_pose(spec)
    rot = _rotation(yaw[frame], pitch[frame])
    sources, boxes = [], []
    present = [s for s in spec.sources if s.present[0] <= frame < s.present[1]]
    for s in present:
        p = rot.T @ (s.distance * sp.direction_vector(s.az, s.el))
        az, el = sp.vector_direction(p)
        d = sp.Direction(float(az), float(el))
        act = active_at(s.intervals, frame)
        sources.append((d, act))
        if p[2] <= 0 or not camera.in_fov(d.az, d.el):
            continue
        cx, cy = camera.direction_to_pixel(d.az, d.el)
        ppd_x, ppd_y = camera.image_w / camera.h_fov, camera.image_h / camera.v_fov
        dist = float(np.linalg.norm(p))
        w = 2 * math.degrees(math.atan(HEAD_SIZE[0] / 2 / dist)) * ppd_x
        h = 2 * math.degrees(math.atan(HEAD_SIZE[1] / 2 / dist)) * ppd_y
        box = sp.HeadBox(float(cx) - w / 2, float(cy) - h / 2, w, h, s.person_id, act)
        boxes.append((dist, box))
    boxes.sort(key=lambda db: -db[0])  # far to near, the drawing order
    return FrameGroundTruth(frame, sources, [b for _, b in boxes], active_at(spec.wearer.intervals, frame))


def _background(camera, seed):
    rng = np.random.default_rng([seed, 5])
    h, w = camera.image_h, camera.image_w
    yy = np.linspace(0, 1, h)[:, None, None]
    img = BACKGROUND + 30 * yy + rng.normal(0, 6, size=(h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def _mouth_band(box):
    return sp.HeadBox(box.x + 0.25 * box.w, box.y + 0.66 * box.h, 0.5 * box.w, 0.16 * box.h)


def render_frame(spec: SceneSpec, camera: sp.CameraModel, frame: int, yaw_pitch=None, background=None):
    """(H, W, 3) uint8 image and the frame's ground truth."""
    gt = frame_ground_truth(spec, camera, frame, yaw_pitch)
    img = (background if background is not None else _background(camera, spec.seed)).copy()
    tones = {s.person_id: s.tone for s in spec.sources}
    for b in gt.boxes:
        img[sp.box_mask([b], camera.image_w, camera.image_h)] = tones.get(b.person_id, (200, 160, 140))
        band = sp.box_mask([_mouth_band(b)], camera.image_w, camera.image_h)
        img[band] = (250, 250, 250) if b.active else (40, 20, 20)
    return img, gt


def downsample(img, out_w, out_h):
    """Area-average an (H, W, C) uint8 image by integer factors."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img
    if h % out_h or w % out_w:
        raise ValueError(f"cannot downsample {w}x{h} to {out_w}x{out_h} by an integer factor")
    fy, fx = h // out_h, w // out_w
    acc = np.zeros((out_h, out_w) + img.shape[2:], dtype=np.uint16 if fy * fx <= 256 else np.uint32)
    for i in range(fy):
        for j in range(fx):
            acc += img[i::fy, j::fx]
    n = fy * fx
    return ((acc + n // 2) // n).astype(np.uint8)


@dataclass
class SimulatedData:
    audio: np.ndarray  # (channels, samples) float64
    frames: np.ndarray  # (F, H, W, 3) uint8 at the requested resolution
    labels: list  # FrameGroundTruth per frame
    spec: SceneSpec
    camera: sp.CameraModel


def simulate(cfg: SimConfig, camera: sp.CameraModel | None = None, geometry=MicArrayGeometry(),
             frame_size=None):
    """In-memory scene: audio, frames (optionally downsampled to ``frame_size``) and labels."""
    camera = camera or sp.CameraModel()
    spec = make_scene(cfg)
    audio = synthesize_audio(spec, geometry)
    pose = head_pose(spec)
    bg = _background(camera, spec.seed)
    fw, fh = frame_size or (camera.image_w, camera.image_h)
    frames = np.empty((spec.n_frames, fh, fw, 3), dtype=np.uint8)
    labels = []
    for t in range(spec.n_frames):
        img, gt = render_frame(spec, camera, t, pose, bg)
        frames[t] = downsample(img, fw, fh)
        labels.append(gt)
    return SimulatedData(audio, frames, labels, spec, camera)


def geometric_delay(src_pos, mic_p, mic_q, c=SPEED_OF_SOUND, fs=48000):
    """Arrival-time difference (q minus p) in samples for a static point source."""
    src_pos = np.asarray(src_pos, dtype=np.float64)
    return (np.linalg.norm(src_pos - mic_q) - np.linalg.norm(src_pos - mic_p)) / c * fs
