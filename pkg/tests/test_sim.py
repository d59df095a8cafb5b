import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoasl import sphere as sp
from egoasl.errors import SpecError
from egoasl.sim import (MicArrayGeometry, SceneSpec, SimConfig, SourceSpec, WearerSpec, frame_ground_truth,
                        geometric_delay, head_pose, make_scene, render_frame, simulate, synthesize_audio)

PAIR_X = MicArrayGeometry(positions=((0.07, 0.0, 0.0), (-0.07, 0.0, 0.0)))


def _one_source(az, el, dist, n=6, snr=math.inf, intervals=None, wearer=None):
    src = SourceSpec(az, el, dist, present=(0, n), intervals=[(0, n)] if intervals is None else intervals)
    return SceneSpec([src], WearerSpec(intervals=wearer or []), n_frames=n, snr_db=snr, head_motion=None)


def _lag(a, b, max_lag=40):
    """Lag (in samples) by which b trails a, from a brute-force correlation."""
    lags = np.arange(-max_lag, max_lag + 1)
    n = len(a)
    vals = [np.dot(a[max_lag:n - max_lag], b[max_lag + k:n - max_lag + k]) for k in lags]
    return int(lags[int(np.argmax(vals))])


def test_silent_scene_is_zero():
    spec = _one_source(30, 0, 2.0, intervals=[])
    audio = synthesize_audio(spec)
    assert audio.shape == (4, 6 * 2400)
    assert not audio.any()


def test_duration_arithmetic():
    spec = SceneSpec([], WearerSpec(), n_frames=2000)
    assert spec.samples_per_frame * spec.n_frames == 4_800_000
    assert spec.duration == 100.0


def test_broadside_source_has_zero_lag():
    audio = synthesize_audio(_one_source(0, 0, 3.0), PAIR_X)
    assert _lag(audio[0], audio[1]) == 0


def test_endfire_delay_matches_aperture():
    # far source on the +x axis reaches the +x mic first
    audio = synthesize_audio(_one_source(90, 0, 50.0), PAIR_X)
    expected = 0.14 / 343 * 48000
    assert expected == pytest.approx(19.59, abs=0.01)
    assert abs(_lag(audio[0], audio[1]) - expected) <= 1


@settings(max_examples=15, deadline=None)
@given(st.floats(-179, 179), st.floats(-60, 60), st.floats(1.5, 6.0), st.integers(0, 3), st.integers(0, 3))
def test_delay_law(az, el, dist, p, q):
    if p == q:
        q = (p + 1) % 4
    geo = MicArrayGeometry()
    audio = synthesize_audio(_one_source(az, el, dist, n=4), geo)
    src = dist * sp.direction_vector(az, el)
    want = geometric_delay(src, geo.array[p], geo.array[q])
    # independent oracle: path difference over c
    ref = (np.linalg.norm(src - geo.array[q]) - np.linalg.norm(src - geo.array[p])) / 343 * 48000
    assert want == pytest.approx(ref)
    assert abs(_lag(audio[p], audio[q]) - want) <= 1


def test_energy_halves_with_double_distance():
    near = synthesize_audio(_one_source(20, 5, 1.5, n=10))
    far = synthesize_audio(_one_source(20, 5, 3.0, n=10))
    # skip the first frame, where the far copy has not fully arrived
    s = slice(2400, None)
    ratio = np.sqrt(np.mean(near[:, s] ** 2, axis=1) / np.mean(far[:, s] ** 2, axis=1))
    # per-mic path lengths; about 2 since the array is small next to the range
    mics = MicArrayGeometry().array
    u = sp.direction_vector(20, 5)
    expected = np.linalg.norm(3.0 * u - mics, axis=1) / np.linalg.norm(1.5 * u - mics, axis=1)
    np.testing.assert_allclose(ratio, expected, rtol=0.01)
    np.testing.assert_allclose(ratio, 2.0, rtol=0.05)


def test_wearer_dominates_one_meter_talker():
    geo = MicArrayGeometry()
    n = 10
    wearer = SceneSpec([], WearerSpec(intervals=[(0, n)]), n_frames=n, snr_db=math.inf, head_motion=None)
    talker = _one_source(0, 0, 1.0, n=n)
    w = np.sqrt(np.mean(synthesize_audio(wearer, geo)[:, 2400:] ** 2, axis=1))
    t = np.sqrt(np.mean(synthesize_audio(talker, geo)[:, 2400:] ** 2, axis=1))
    r = np.linalg.norm(geo.array - np.array(WearerSpec().mouth), axis=1)
    r_talker = np.linalg.norm(geo.array - sp.direction_vector(0, 0), axis=1)
    assert r.max() < 0.13
    np.testing.assert_allclose(w / t, r_talker / r, rtol=0.01)
    assert np.all(w / t > 7.5)


def test_noise_level_follows_snr():
    spec = _one_source(0, 0, 1.0, n=20, snr=10.0, intervals=[])
    audio = synthesize_audio(spec)
    assert np.sqrt(np.mean(audio ** 2)) == pytest.approx(0.01 * 10 ** (-0.5), rel=0.02)


def test_source_inside_mic_is_rejected():
    with pytest.raises(SpecError, match="1 cm"):
        synthesize_audio(_one_source(90, 0, 0.072, n=2), PAIR_X)
    with pytest.raises(SpecError):
        MicArrayGeometry(positions=((0, 0, 0), (0, 0, 0)))
    with pytest.raises(SpecError):
        MicArrayGeometry(positions=((0.3, 0, 0), (-0.3, 0, 0)))


def test_source_behind_has_no_box_but_keeps_direction():
    cam = sp.CameraModel()
    gt = frame_ground_truth(_one_source(180, 0, 2.0), cam, 0)
    assert gt.boxes == []
    assert gt.sources[0][0].az == pytest.approx(180.0) or gt.sources[0][0].az == pytest.approx(-180.0)
    assert gt.sources[0][1]


@pytest.mark.parametrize("az,el", [(0, 0), (-25.0, 10.0), (31.5, -7.0)])
def test_box_center_is_projection(az, el):
    cam = sp.CameraModel()
    gt = frame_ground_truth(_one_source(az, el, 2.0), cam, 0)
    (b,) = gt.boxes
    # equi-angular camera: 8 pixels per degree both ways, origin at the image center
    assert b.x + b.w / 2 == pytest.approx(320 + 8 * az)
    assert b.y + b.h / 2 == pytest.approx(180 - 8 * el)
    assert b.active


def test_moving_head_changes_device_direction():
    spec = _one_source(0, 0, 2.0, n=40)
    spec.head_motion = make_scene(SimConfig(n_frames=40, seed=2)).head_motion
    yaw, pitch = head_pose(spec)
    gt = frame_ground_truth(spec, sp.CameraModel(), 39)
    d = gt.sources[0][0]
    # turning the head right moves a fixed source left in the device frame
    assert d.az == pytest.approx(-yaw[39], abs=0.5)
    assert abs(pitch).max() <= 8.0


def test_active_and_inactive_differ_only_in_mouth_band():
    cam = sp.CameraModel()
    spec = _one_source(5, 2, 1.5, n=2, intervals=[(0, 1)])
    on, gt_on = render_frame(spec, cam, 0)
    off, gt_off = render_frame(spec, cam, 1)
    (b,) = gt_on.boxes
    assert b.active and not gt_off.boxes[0].active
    band = sp.box_mask([sp.HeadBox(b.x + 0.25 * b.w, b.y + 0.66 * b.h, 0.5 * b.w, 0.16 * b.h)], 640, 360)
    diff = np.any(on != off, axis=-1)
    assert diff.any()
    assert np.array_equal(diff, band)
    assert np.all(on[band] == 250)


def test_labels_follow_schedule():
    cfg = SimConfig(n_frames=2000, seed=7)
    spec = make_scene(cfg)
    cam = sp.CameraModel()
    pose = head_pose(spec)
    for t in range(0, 2000, 37):
        gt = frame_ground_truth(spec, cam, t, pose)
        present = [s for s in spec.sources if s.present[0] <= t < s.present[1]]
        assert len(gt.sources) == len(present)
        assert [a for _, a in gt.sources] == [any(a <= t < b for a, b in s.intervals) for s in present]
        assert gt.wearer_active == any(a <= t < b for a, b in spec.wearer.intervals)
        in_view = [d for d, _ in gt.sources if cam.in_fov(d.az, d.el)]
        assert len(gt.boxes) == len(in_view)


def test_label_balance_matches_schedule_density():
    cfg = SimConfig(n_frames=2000)
    talk, wear = [], []
    for seed in range(4):
        spec = make_scene(SimConfig(n_frames=2000, seed=seed))
        any_talk = np.zeros(2000, bool)
        for s in spec.sources:
            for a, b in s.intervals:
                any_talk[a:b] = True
        w = np.zeros(2000, bool)
        for a, b in spec.wearer.intervals:
            w[a:b] = True
        assert not np.any(any_talk & w)  # the wearer holds the floor alone
        talk.append(any_talk.mean())
        wear.append(w.mean())
    assert np.mean(talk) == pytest.approx(1 - cfg.silence_share - cfg.wearer_share, abs=0.10)
    assert np.mean(wear) == pytest.approx(cfg.wearer_share, abs=0.10)


def test_simulate_is_deterministic_and_shaped():
    a = simulate(SimConfig(n_frames=12, seed=3), frame_size=(320, 180))
    b = simulate(SimConfig(n_frames=12, seed=3), frame_size=(320, 180))
    assert a.audio.shape == (4, 12 * 2400)
    assert a.frames.shape == (12, 180, 320, 3)
    assert np.array_equal(a.audio, b.audio) and np.array_equal(a.frames, b.frames)
    c = simulate(SimConfig(n_frames=12, seed=4), frame_size=(320, 180))
    assert not np.array_equal(a.audio, c.audio)
