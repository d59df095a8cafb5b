"""Spherical voice map geometry.

The sphere is a 180 x 90 grid of 2-degree cells indexed ``[i, j]`` with
``i`` over azimuth (-180..180, positive to the wearer's right) and ``j`` over
elevation (-90..90, positive up). Two-plane grids put the *active* class in
plane 0 and *inactive* in plane 1.

The camera is equi-angular: pixel columns are linear in azimuth and rows are
linear in elevation (row 0 at the top).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError

AZ_CELLS = 180
EL_CELLS = 90
RESOLUTION = 2.0
ACTIVE, INACTIVE = 0, 1
GT_DISK_RADIUS = 5


@dataclass(frozen=True)
class Direction:
    az: float
    el: float

    def __post_init__(self):
        object.__setattr__(self, "az", wrap_azimuth(self.az))
        if not -90.0 <= self.el <= 90.0:
            raise ValueError(f"elevation {self.el} outside [-90, 90]")

    def unit(self):
        return direction_vector(self.az, self.el)


def wrap_azimuth(az):
    return (az + 180.0) % 360.0 - 180.0


def direction_vector(az, el):
    """Device-frame unit vector(s): x right, y up, z forward."""
    a, e = np.radians(az), np.radians(el)
    return np.stack([np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)], axis=-1)


def vector_direction(v):
    """Inverse of :func:`direction_vector` for (..., 3) vectors (any norm)."""
    v = np.asarray(v, dtype=np.float64)
    az = np.degrees(np.arctan2(v[..., 0], v[..., 2]))
    el = np.degrees(np.arctan2(v[..., 1], np.hypot(v[..., 0], v[..., 2])))
    return az, el


def cell_of(d: Direction):
    i = int(math.floor((d.az + 180.0) / RESOLUTION)) % AZ_CELLS
    j = min(int(math.floor((d.el + 90.0) / RESOLUTION)), EL_CELLS - 1)
    return i, j


def cell_center(i, j):
    return Direction(-180.0 + (i + 0.5) * RESOLUTION, -90.0 + (j + 0.5) * RESOLUTION)


@dataclass
class SphericalVoiceMap:
    logits: np.ndarray  # (2, 180, 90)
    resolution: float = RESOLUTION

    def __post_init__(self):
        if self.logits.shape != (2, AZ_CELLS, EL_CELLS):
            raise ValueError(f"sphere logits must be (2, 180, 90), got {self.logits.shape}")

    def probability(self):
        return probability(self.logits)


@dataclass(frozen=True)
class CameraModel:
    h_fov: float = 80.0
    v_fov: float = 45.0
    image_w: int = 640
    image_h: int = 360
    forward: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not 0 < self.h_fov <= 360 or not 0 < self.v_fov <= 180:
            raise ConfigError(f"invalid camera FOV {self.h_fov}x{self.v_fov}")
        if self.image_w < 1 or self.image_h < 1:
            raise ConfigError("image dimensions must be positive")

    def scaled(self, image_w, image_h):
        return replace(self, image_w=int(image_w), image_h=int(image_h))

    @property
    def az_range(self):
        return self.forward[0] - self.h_fov / 2, self.forward[0] + self.h_fov / 2

    @property
    def el_range(self):
        return self.forward[1] - self.v_fov / 2, self.forward[1] + self.v_fov / 2

    def direction_to_pixel(self, az, el):
        """Continuous pixel coordinates (x, y); pixel k spans [k, k+1)."""
        daz = wrap_azimuth(np.asarray(az, dtype=np.float64) - self.forward[0])
        x = (daz + self.h_fov / 2) / self.h_fov * self.image_w
        y = (self.forward[1] + self.v_fov / 2 - np.asarray(el, dtype=np.float64)) / self.v_fov * self.image_h
        return x, y

    def pixel_to_direction(self, x, y):
        az = self.forward[0] - self.h_fov / 2 + np.asarray(x, dtype=np.float64) / self.image_w * self.h_fov
        el = self.forward[1] + self.v_fov / 2 - np.asarray(y, dtype=np.float64) / self.image_h * self.v_fov
        return az, el

    def in_fov(self, az, el):
        daz = wrap_azimuth(np.asarray(az, dtype=np.float64) - self.forward[0])
        del_ = np.asarray(el, dtype=np.float64) - self.forward[1]
        return (np.abs(daz) < self.h_fov / 2) & (np.abs(del_) < self.v_fov / 2)

    def check_inside_sphere(self):
        a0, a1 = self.az_range
        e0, e1 = self.el_range
        if a0 < -180 or a1 > 180 or e0 < -90 or e1 > 90:
            raise ConfigError(f"camera FOV az [{a0}, {a1}] el [{e0}, {e1}] exceeds the sphere")


@dataclass
class FovHeatMap:
    logits: np.ndarray  # (2, H, W)
    camera: CameraModel = field(default_factory=CameraModel)

    def probability(self):
        return probability(self.logits)


@dataclass(frozen=True)
class HeadBox:
    x: float
    y: float
    w: float
    h: float
    person_id: int = 0
    active: bool = False

    def scaled(self, sx, sy):
        return replace(self, x=self.x * sx, y=self.y * sy, w=self.w * sx, h=self.h * sy)


def probability(logits):
    """Active-class probability per cell (softmax over the two planes)."""
    logits = np.asarray(logits)
    d = logits[INACTIVE] - logits[ACTIVE]
    # 1 / (1 + exp(inactive - active)), overflow-safe
    return np.where(d >= 0, np.exp(-np.maximum(d, 0)) / (1 + np.exp(-np.maximum(d, 0))),
                    1 / (1 + np.exp(np.minimum(d, 0))))


def one_hot(active_mask, dtype=np.float32):
    mask = np.asarray(active_mask, dtype=bool)
    return np.stack([mask, ~mask]).astype(dtype)


def render_gt_sphere(sources, radius=GT_DISK_RADIUS, dtype=np.float32):
    """One-hot (2, 180, 90) target with a solid disk per source direction."""
    mask = np.zeros((AZ_CELLS, EL_CELLS), dtype=bool)
    ii, jj = np.arange(AZ_CELLS)[:, None], np.arange(EL_CELLS)[None, :]
    for src in sources:
        i0, j0 = cell_of(src if isinstance(src, Direction) else Direction(*src))
        di = np.abs(ii - i0)
        di = np.minimum(di, AZ_CELLS - di)
        mask |= di ** 2 + (jj - j0) ** 2 <= radius ** 2
    return one_hot(mask, dtype)


def box_mask(boxes, width, height):
    """Pixels whose centers fall inside any box."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        x0 = max(int(math.ceil(b.x - 0.5)), 0)
        x1 = min(int(math.ceil(b.x + b.w - 0.5)), width)
        y0 = max(int(math.ceil(b.y - 0.5)), 0)
        y1 = min(int(math.ceil(b.y + b.h - 0.5)), height)
        if x1 > x0 and y1 > y0:
            mask[y0:y1, x0:x1] = True
    return mask


def render_gt_fov(boxes, width, height, dtype=np.float32):
    """One-hot (2, H, W) target: active-speaker head boxes are active."""
    return one_hot(box_mask([b for b in boxes if b.active], width, height), dtype)


@lru_cache(maxsize=32)
def _crop_matrices(camera: CameraModel, out_w, out_h):
    camera.check_inside_sphere()
    cam = camera.scaled(out_w, out_h)
    az, _ = cam.pixel_to_direction(np.arange(out_w) + 0.5, 0.0)
    _, el = cam.pixel_to_direction(0.0, np.arange(out_h) + 0.5)
    # fractional cell coordinates, cell centers at integers
    u = (az + 180.0) / RESOLUTION - 0.5
    v = np.clip((el + 90.0) / RESOLUTION - 0.5, 0.0, EL_CELLS - 1)
    cols = np.zeros((out_w, AZ_CELLS))
    u0 = np.floor(u).astype(int)
    fu = u - u0
    cols[np.arange(out_w), u0 % AZ_CELLS] += 1 - fu
    cols[np.arange(out_w), (u0 + 1) % AZ_CELLS] += fu
    rows = np.zeros((out_h, EL_CELLS))
    v0 = np.minimum(np.floor(v).astype(int), EL_CELLS - 2)
    fv = v - v0
    rows[np.arange(out_h), v0] += 1 - fv
    rows[np.arange(out_h), v0 + 1] += fv
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def crop_matrices(camera: CameraModel, out_w, out_h):
    """(rows (H, 90), cols (W, 180)) so that ``rows @ P.T @ cols.T`` is the crop
    of an az-by-el grid ``P`` sampled at image pixel centers."""
    return _crop_matrices(camera, int(out_w), int(out_h))


def crop_to_fov(sphere, camera: CameraModel, out_w=None, out_h=None):
    """Active probability of the sphere sampled over the camera's view, (H, W)."""
    out_w = camera.image_w if out_w is None else out_w
    out_h = camera.image_h if out_h is None else out_h
    p = probability(sphere.logits if isinstance(sphere, SphericalVoiceMap) else sphere)
    rows, cols = crop_matrices(camera, out_w, out_h)
    return rows @ p.T @ cols.T


def _overlap(lo_a, hi_a, lo_b, hi_b):
    return np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)


@lru_cache(maxsize=32)
def _area_matrices(camera: CameraModel):
    camera.check_inside_sphere()
    w, h = camera.image_w, camera.image_h
    px_lo = camera.az_range[0] + np.arange(w) * camera.h_fov / w
    px_hi = px_lo + camera.h_fov / w
    cell_lo = -180.0 + np.arange(AZ_CELLS) * RESOLUTION
    ax = _overlap(cell_lo[:, None], cell_lo[:, None] + RESOLUTION, px_lo[None], px_hi[None]) / RESOLUTION
    top = camera.el_range[1]
    py_hi = top - np.arange(h) * camera.v_fov / h
    py_lo = py_hi - camera.v_fov / h
    cell_lo = -90.0 + np.arange(EL_CELLS) * RESOLUTION
    ay = _overlap(cell_lo[:, None], cell_lo[:, None] + RESOLUTION, py_lo[None], py_hi[None]) / RESOLUTION
    ax.setflags(write=False)
    ay.setflags(write=False)
    return ax, ay


def fov_to_sphere(fov_prob, camera: CameraModel):
    """Area-average an (H, W) image-space grid into the 180x90 sphere, zero outside."""
    ax, ay = _area_matrices(camera)
    return ax @ np.asarray(fov_prob, dtype=np.float64).T @ ay.T


def fuse(sphere, fov=None, camera: CameraModel | None = None):
    """Sphere probability plus the refined FOV probability padded with zeros.

    ``fov`` is a :class:`FovHeatMap`, an (H, W) probability array (then
    ``camera`` must describe it), or None for the audio-only map.
    """
    p = probability(sphere.logits if isinstance(sphere, SphericalVoiceMap) else sphere).astype(np.float64)
    if fov is None:
        return p
    if isinstance(fov, FovHeatMap):
        camera, fov_prob = fov.camera, fov.probability()
    else:
        fov_prob = np.asarray(fov)
        if camera is None:
            raise ConfigError("fuse needs the camera for a raw FOV grid")
        camera = camera.scaled(fov_prob.shape[1], fov_prob.shape[0])
    ax, ay = _area_matrices(camera)
    # accumulate only where the FOV overlaps, so outside cells stay bit-identical
    ci = np.flatnonzero(ax.sum(axis=1) > 0)
    cj = np.flatnonzero(ay.sum(axis=1) > 0)
    out = p.copy()
    if ci.size and cj.size:
        block = ax[ci] @ np.asarray(fov_prob, dtype=np.float64).T @ ay[cj].T
        out[np.ix_(ci, cj)] += block
    return out


_LOGIT_KNEE = 1.0 - 1e-6


def to_log_odds(scores):
    """Log-odds of a probability-scale grid.

    Fused in-FOV cells can exceed 1, so above ``1 - 1e-6`` the curve continues
    linearly with matching slope: strictly increasing, zero at 0.5.
    """
    s = np.asarray(scores, dtype=np.float64)
    lo = 1e-12
    knee_val = math.log(_LOGIT_KNEE) - math.log1p(-_LOGIT_KNEE)
    slope = 1.0 / (_LOGIT_KNEE * (1.0 - _LOGIT_KNEE))
    clipped = np.clip(s, lo, _LOGIT_KNEE)
    out = np.log(clipped) - np.log1p(-clipped)
    return np.where(s > _LOGIT_KNEE, knee_val + (s - _LOGIT_KNEE) * slope, out)


@lru_cache(maxsize=8)
def _disk_offsets(radius):
    r = int(radius)
    return tuple((di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1) if di * di + dj * dj <= radius * radius)


def neighborhood_max(scores, radius):
    """Max over the disk of given cell radius, wrapping in azimuth."""
    s = np.asarray(scores, dtype=np.float64)
    r = int(radius)
    padded = np.pad(s, ((0, 0), (r, r)), constant_values=-np.inf)
    best = np.full_like(s, -np.inf)
    for di, dj in _disk_offsets(radius):
        shifted = np.roll(padded, -di, axis=0)[:, r + dj:r + dj + s.shape[1]]
        np.maximum(best, shifted, out=best)
    return best


def nms_peaks(scores, threshold=0.0, radius_cells=GT_DISK_RADIUS):
    """Peaks of a (180, 90) score grid: cells above ``threshold`` that equal the
    maximum of their disk neighborhood, greedily thinned (highest first) so no
    two returned peaks are within ``radius_cells``.

    Returns a list of (Direction at cell center, score), sorted descending.
    """
    if radius_cells < 1:
        raise ValueError("radius_cells must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    cand = (s > threshold) & (s >= neighborhood_max(s, radius_cells))
    ii, jj = np.nonzero(cand)
    order = np.lexsort((jj, ii, -s[ii, jj]))
    offsets = np.array(_disk_offsets(radius_cells))
    suppressed = np.zeros(s.shape, dtype=bool)
    kept = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if suppressed[i, j]:
            continue
        kept.append((i, j))
        ni, nj = (i + offsets[:, 0]) % AZ_CELLS, j + offsets[:, 1]
        ok = (nj >= 0) & (nj < s.shape[1])
        suppressed[ni[ok], nj[ok]] = True
    return [(cell_center(i, j), float(s[i, j])) for i, j in kept]


def angular_distance(a: Direction, b: Direction, metric="great_circle"):
    """Angle between two directions in degrees.

    ``metric="grid"`` gives the Euclidean distance on the (az, el) plane with
    azimuth wraparound instead of the great-circle angle.
    """
    if metric == "grid":
        daz = abs(wrap_azimuth(a.az - b.az))
        return math.hypot(daz, a.el - b.el)
    # haversine form is well-conditioned for small angles
    p1, p2 = math.radians(a.el), math.radians(b.el)
    dl = math.radians(a.az - b.az)
    h = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return math.degrees(2 * math.asin(min(1.0, math.sqrt(h))))
