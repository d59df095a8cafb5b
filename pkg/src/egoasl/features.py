"""Audio feature maps: pairwise normalized cross-correlation, short-time
energy, and complex spectrogram planes, each resized to a square image.

All computation is float64; the network casts to its own dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, InputError, ShapeError
from .nn.functional import bilinear_matrix

FEATURE_KINDS = ("cor", "eng", "cor+eng", "spec")


@dataclass(frozen=True)
class FeatureConfig:
    K: int = 1200
    L: int = 50
    out_size: int = 128
    dft_count: int = 100
    dft_len: int = 200
    pair_mode: str = "unordered"
    eps: float = 1e-9
    sample_rate: int = 48000
    video_rate: int = 20

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise ConfigError("K and L must be >= 1")
        if self.out_size < 8:
            raise ConfigError("out_size must be >= 8")
        if self.pair_mode not in ("unordered", "ordered"):
            raise ConfigError(f"pair_mode must be 'unordered' or 'ordered', got {self.pair_mode!r}")
        if self.sample_rate % self.video_rate:
            raise ConfigError("sample_rate must be a multiple of video_rate")
        if self.hop < 1:
            raise ConfigError("dft_count exceeds samples per frame")

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate // self.video_rate

    @property
    def hop(self) -> int:
        return self.samples_per_frame // self.dft_count

    @property
    def spectrogram_span(self) -> int:
        return (self.dft_count - 1) * self.hop + self.dft_len

    @property
    def window_length(self) -> int:
        """Samples per frame segment: enough for the correlation window and
        for the spectrogram, both ending at the frame's last sample."""
        return max(self.K + 2 * self.L + 1, self.spectrogram_span)


@dataclass
class MultiChannelAudioSegment:
    samples: np.ndarray  # (channels, samples), values in [-1, 1]
    sample_rate: int = 48000
    frame_timestamp: float = 0.0

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]


@dataclass
class AudioFeatureMap:
    planes: np.ndarray  # (planes, height, width)
    kind: str
    resized: bool = True
    row_labels: list = field(default_factory=list)

    @property
    def plane_count(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


_FULL_SCALE = {16: 32768.0, 24: 8388608.0}


def normalize_audio(raw, bit_depth=None, sample_rate=48000):
    """Scale integer PCM by the maximum magnitude of its bit depth.

    ``raw`` is (channels, samples). Floating input with ``bit_depth=None`` is
    taken as already normalized and must lie in [-1, 1].
    """
    raw = np.atleast_2d(np.asarray(raw))
    if bit_depth is None:
        if not np.issubdtype(raw.dtype, np.floating):
            raise FormatError("integer samples need a bit_depth of 16 or 24")
        if raw.size and np.abs(raw).max() > 1.0:
            raise FormatError("floating samples must lie in [-1, 1]")
        return MultiChannelAudioSegment(raw.astype(np.float64), sample_rate)
    if bit_depth not in _FULL_SCALE:
        raise FormatError(f"unsupported bit depth {bit_depth}; expected 16 or 24")
    return MultiChannelAudioSegment(raw.astype(np.float64) / _FULL_SCALE[bit_depth], sample_rate)


def channel_pairs(n_channels, mode="unordered"):
    if mode == "unordered":
        return list(combinations(range(n_channels), 2))
    return list(permutations(range(n_channels), 2))


def segment_for_frame(audio, frame, cfg: FeatureConfig = FeatureConfig()):
    """Cut the window ending at the last sample of video frame ``frame``.

    ``audio`` is (channels, total_samples). History before sample 0 is zero.
    """
    audio = np.atleast_2d(audio)
    end = (frame + 1) * cfg.samples_per_frame
    start = end - cfg.window_length
    if end > audio.shape[1]:
        raise InputError(f"frame {frame} needs {end} samples, audio has {audio.shape[1]}")
    if start >= 0:
        chunk = audio[:, start:end]
    else:
        chunk = np.zeros((audio.shape[0], cfg.window_length), dtype=np.float64)
        chunk[:, -start:] = audio[:, :end]
    return MultiChannelAudioSegment(chunk, cfg.sample_rate, frame / cfg.video_rate)


def default_anchor(seg, cfg):
    """Anchor sample so that the lag window ends at the segment's last sample."""
    return len(seg) - 1 - cfg.L


def _lag_window(seg, cfg, n):
    """Samples n-K-L .. n+L inclusive, zero outside the segment."""
    K, L = cfg.K, cfg.L
    lo, hi = n - K - L, n + L + 1
    total = len(seg)
    if lo >= 0 and hi <= total:
        return seg.samples[:, lo:hi]
    out = np.zeros((seg.channel_count, hi - lo), dtype=np.float64)
    a, b = max(lo, 0), min(hi, total)
    if b > a:
        out[:, a - lo:b - lo] = seg.samples[:, a:b]
    return out


def _correlation_table(seg, cfg, n):
    """Full (N, N, 2L+1) correlation table plus per-channel energies at n."""
    K, L = cfg.K, cfg.L
    win = _lag_window(seg, cfg, n)
    x = win[:, L:L + K + 1]                               # A_p(n-K .. n)
    shifted = sliding_window_view(win, K + 1, axis=1)     # (N, 2L+1, K+1): A_q(n-K+m .. n+m)
    num = np.matmul(shifted, x.T).transpose(2, 0, 1)      # [p, q, m]
    ex = np.sqrt(np.einsum("pk,pk->p", x, x))
    ey = np.sqrt(np.einsum("qmk,qmk->qm", shifted, shifted))
    den = ex[:, None, None] * ey[None, :, :]
    safe = den >= cfg.eps
    table = np.where(safe, num / np.where(safe, den, 1.0), 0.0)
    return table, ex


def pair_correlation(seg, p, q, cfg: FeatureConfig = FeatureConfig(), n=None):
    """C_{p,q}(n, m) for m = -L..L. ``p == q`` gives the normalized autocorrelation."""
    n = default_anchor(seg, cfg) if n is None else n
    table, _ = _correlation_table(seg, cfg, n)
    return table[p, q]


def resize_rows(rows, out_size):
    h, w = rows.shape[-2:]
    return bilinear_matrix(h, out_size) @ rows @ bilinear_matrix(w, out_size).T


def _finish(rows, kind, cfg, resize, labels):
    planes = rows[None]
    if resize:
        planes = resize_rows(planes, cfg.out_size)
    return AudioFeatureMap(planes, kind, resized=resize, row_labels=labels)


def cross_correlation_map(seg, cfg: FeatureConfig = FeatureConfig(), n=None, resize=True):
    if seg.channel_count < 2:
        raise InputError("cross-correlation needs at least two channels")
    n = default_anchor(seg, cfg) if n is None else n
    table, _ = _correlation_table(seg, cfg, n)
    pairs = channel_pairs(seg.channel_count, cfg.pair_mode)
    rows = np.stack([table[p, q] for p, q in pairs])
    return _finish(rows, "correlation", cfg, resize, [f"cor{p}{q}" for p, q in pairs])


def energy_map(seg, cfg: FeatureConfig = FeatureConfig(), n=None, resize=True):
    n = default_anchor(seg, cfg) if n is None else n
    win = _lag_window(seg, cfg, n)
    x = win[:, cfg.L:cfg.L + cfg.K + 1]
    energy = np.sqrt(np.einsum("pk,pk->p", x, x))
    rows = np.repeat(energy[:, None], 2 * cfg.L + 1, axis=1)
    return _finish(rows, "energy", cfg, resize, [f"eng{p}" for p in range(seg.channel_count)])


def correlation_energy_maps(seg, cfg: FeatureConfig = FeatureConfig(), n=None):
    """Both row-space maps from one pass over the window (fast path)."""
    if seg.channel_count < 2:
        raise InputError("cross-correlation needs at least two channels")
    n = default_anchor(seg, cfg) if n is None else n
    table, energy = _correlation_table(seg, cfg, n)
    pairs = channel_pairs(seg.channel_count, cfg.pair_mode)
    cor = np.stack([table[p, q] for p, q in pairs])
    eng = np.repeat(energy[:, None], 2 * cfg.L + 1, axis=1)
    return (AudioFeatureMap(cor[None], "correlation", False, [f"cor{p}{q}" for p, q in pairs]),
            AudioFeatureMap(eng[None], "energy", False, [f"eng{p}" for p in range(seg.channel_count)]))


def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def spectrogram_map(seg, cfg: FeatureConfig = FeatureConfig(), n=None, resize=True):
    """Real and imaginary DFT planes per channel (2N planes).

    ``dft_count`` Hann-windowed DFTs of ``dft_len`` samples, ``hop`` apart,
    the last one ending at the frame's final sample (n + L).
    """
    n = default_anchor(seg, cfg) if n is None else n
    end = n + cfg.L + 1
    start = end - cfg.spectrogram_span
    if start < 0 or end > len(seg):
        raise InputError(f"spectrogram needs {cfg.spectrogram_span} samples ending at {end}, "
                         f"segment has {len(seg)}")
    chunk = seg.samples[:, start:end]
    frames = sliding_window_view(chunk, cfg.dft_len, axis=1)[:, ::cfg.hop][:, :cfg.dft_count]
    spec = np.fft.fft(frames * hann(cfg.dft_len), axis=-1)  # (N, dft_count, dft_len)
    planes = np.empty((2 * seg.channel_count, cfg.dft_count, cfg.dft_len), dtype=np.float64)
    planes[0::2] = spec.real
    planes[1::2] = spec.imag
    if resize:
        planes = resize_rows(planes, cfg.out_size)
    labels = [f"{part}{c}" for c in range(seg.channel_count) for part in ("re", "im")]
    return AudioFeatureMap(planes, "spectrogram", resized=resize, row_labels=labels)


def combine_features(maps, cfg: FeatureConfig = FeatureConfig()):
    """Stack row-space maps vertically (argument order), then resize."""
    if not maps:
        raise InputError("combine_features needs at least one map")
    if any(m.resized for m in maps):
        raise InputError("combine_features takes maps before resizing")
    widths = {m.width for m in maps}
    if len(widths) != 1:
        raise ShapeError(f"combine_features: column counts differ {sorted(widths)}")
    if len({m.plane_count for m in maps}) != 1:
        raise ShapeError("combine_features: plane counts differ")
    rows = np.concatenate([m.planes for m in maps], axis=1)
    labels = [lab for m in maps for lab in m.row_labels]
    return AudioFeatureMap(resize_rows(rows, cfg.out_size), "+".join(m.kind for m in maps),
                           resized=True, row_labels=labels)


def feature_planes(kind: str, cfg: FeatureConfig = FeatureConfig(), n_channels: int = 4) -> int:
    if kind == "spec":
        return 2 * n_channels
    if kind in ("cor", "eng", "cor+eng"):
        return 1
    raise ConfigError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def extract(seg, kind: str, cfg: FeatureConfig = FeatureConfig()) -> AudioFeatureMap:
    """Feature map of the given kind for one frame segment."""
    if kind == "cor":
        return cross_correlation_map(seg, cfg)
    if kind == "eng":
        return energy_map(seg, cfg)
    if kind == "cor+eng":
        cor, eng = correlation_energy_maps(seg, cfg)
        return combine_features([cor, eng], cfg)
    if kind == "spec":
        return spectrogram_map(seg, cfg)
    raise ConfigError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def extract_frames(audio, frames, kind, cfg: FeatureConfig = FeatureConfig(), dtype=np.float32):
    """(len(frames), planes, out, out) array of features for the given frame indices."""
    out = np.empty((len(frames), feature_planes(kind, cfg, audio.shape[0]), cfg.out_size, cfg.out_size),
                   dtype=dtype)
    for i, t in enumerate(frames):
        out[i] = extract(segment_for_frame(audio, t, cfg), kind, cfg).planes
    return out
