import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoasl import features as fx
from egoasl.errors import FormatError, InputError, ShapeError
from egoasl.features import FeatureConfig, MultiChannelAudioSegment

SMALL = FeatureConfig(K=120, L=12, out_size=16, dft_count=10, dft_len=20, sample_rate=4000, video_rate=20)


def band_noise(rng, n, fs=48000, lo=200.0, hi=4000.0):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return 0.3 * x / np.abs(x).max()


def corr_oracle(a_p, a_q, n, K, L, eps=1e-9):
    """Literal evaluation of the normalized cross-correlation sum."""
    out = []
    for m in range(-L, L + 1):
        num = sum(a_p[n - k] * a_q[n - k + m] for k in range(K + 1))
        ep = math.sqrt(sum(a_p[n - k] ** 2 for k in range(K + 1)))
        eq = math.sqrt(sum(a_q[n - k + m] ** 2 for k in range(K + 1)))
        out.append(0.0 if ep * eq < eps else num / (ep * eq))
    return np.array(out)


def test_normalize_audio_16_bit():
    seg = fx.normalize_audio(np.array([[-32768, 16384, 0]], dtype=np.int16), 16)
    assert seg.samples.tolist() == [[-1.0, 0.5, 0.0]]


def test_normalize_audio_zero_and_24_bit():
    assert not fx.normalize_audio(np.zeros((3, 5), dtype=np.int32), 24).samples.any()
    assert fx.normalize_audio(np.array([[-8388608]]), 24).samples[0, 0] == -1.0
    assert fx.normalize_audio(np.zeros((4, 2), dtype=np.int16), 16).channel_count == 4


def test_normalize_audio_rejects_bad_bit_depth():
    with pytest.raises(FormatError):
        fx.normalize_audio(np.zeros((1, 3), dtype=np.int16), 12)
    with pytest.raises(FormatError):
        fx.normalize_audio(np.array([[1.5]]))


def test_autocorrelation_at_zero_lag_is_one():
    rng = np.random.default_rng(0)
    seg = MultiChannelAudioSegment(band_noise(rng, 2576)[None])
    assert fx.pair_correlation(seg, 0, 0)[50] == pytest.approx(1.0, abs=1e-6)


def test_correlation_matches_literal_formula():
    rng = np.random.default_rng(1)
    seg = MultiChannelAudioSegment(rng.uniform(-1, 1, size=(3, 200)))
    n = 150
    cmap = fx.cross_correlation_map(seg, SMALL, n=n, resize=False)
    for row, (p, q) in zip(cmap.planes[0], fx.channel_pairs(3)):
        np.testing.assert_allclose(row, corr_oracle(seg.samples[p], seg.samples[q], n, SMALL.K, SMALL.L),
                                   rtol=1e-9, atol=1e-12)


def test_delay_of_ten_samples_is_recovered():
    rng = np.random.default_rng(2)
    x = band_noise(rng, 4000)
    d = 10
    y = np.concatenate([np.zeros(d), x[:-d]])
    seg = MultiChannelAudioSegment(np.stack([x, y])[:, -2576:])
    c = fx.pair_correlation(seg, 0, 1)
    assert int(np.argmax(c)) - 50 == d
    brute = corr_oracle(seg.samples[0], seg.samples[1], fx.default_anchor(seg, FeatureConfig()), 1200, 50)
    assert int(np.argmax(brute)) - 50 == d


def test_gain_invariance_of_correlation_and_energy_scaling():
    rng = np.random.default_rng(3)
    s = rng.uniform(-0.3, 0.3, size=(4, 2576))
    g = s.copy()
    g[2] *= 3.0
    a, b = MultiChannelAudioSegment(s), MultiChannelAudioSegment(g)
    np.testing.assert_allclose(fx.cross_correlation_map(a).planes, fx.cross_correlation_map(b).planes, atol=1e-6)
    ea = fx.energy_map(a, resize=False).planes[0][:, 0]
    eb = fx.energy_map(b, resize=False).planes[0][:, 0]
    assert eb[2] == pytest.approx(3.0 * ea[2], rel=1e-12)
    np.testing.assert_array_equal(np.delete(ea, 2), np.delete(eb, 2))


def test_silent_window_gives_zero_correlation():
    seg = MultiChannelAudioSegment(np.zeros((4, 2576)))
    m = fx.cross_correlation_map(seg)
    assert m.planes.shape == (1, 128, 128) and not m.planes.any()


def test_map_shapes_and_pair_order():
    seg = MultiChannelAudioSegment(np.random.default_rng(4).uniform(-1, 1, (4, 2576)))
    raw = fx.cross_correlation_map(seg, resize=False)
    assert raw.planes.shape == (1, 6, 101)
    assert raw.row_labels == ["cor01", "cor02", "cor03", "cor12", "cor13", "cor23"]
    ordered = fx.cross_correlation_map(seg, FeatureConfig(pair_mode="ordered"), resize=False)
    assert ordered.planes.shape == (1, 12, 101)
    full = fx.cross_correlation_map(seg)
    assert full.height == full.width == 128


def test_energy_constant_signal_closed_form():
    seg = MultiChannelAudioSegment(np.full((2, 2576), 0.5))
    e = fx.energy_map(seg, resize=False).planes[0]
    assert e.shape == (2, 101)
    np.testing.assert_allclose(e, 0.5 * math.sqrt(1201), rtol=1e-12)
    assert 0.5 * math.sqrt(1201) == pytest.approx(17.3277, abs=1e-4)
    assert not fx.energy_map(MultiChannelAudioSegment(np.zeros((2, 2576)))).planes.any()


def test_energy_matches_direct_sum():
    rng = np.random.default_rng(5)
    seg = MultiChannelAudioSegment(rng.standard_normal((3, 2576)) * 0.1)
    n = fx.default_anchor(seg, FeatureConfig())
    e = fx.energy_map(seg, resize=False).planes[0][:, 0]
    for p in range(3):
        ref = math.sqrt(sum(seg.samples[p, n - k] ** 2 for k in range(1201)))
        assert e[p] == pytest.approx(ref, rel=1e-6)


def naive_dft(x):
    n = len(x)
    return np.array([sum(x[t] * np.exp(-2j * np.pi * f * t / n) for t in range(n)) for f in range(n)])


def test_spectrogram_tone_concentrates_in_bin():
    cfg = FeatureConfig()
    t = np.arange(2576)
    tone = 0.5 * np.cos(2 * np.pi * 10 * t / cfg.dft_len)  # bin 10 exactly
    seg = MultiChannelAudioSegment(np.stack([tone, tone * 0.2]))
    sm = fx.spectrogram_map(seg, cfg, resize=False)
    assert sm.plane_count == 4
    mag = np.hypot(sm.planes[0], sm.planes[1])
    assert set(np.argmax(mag[:, :100], axis=1)) == {10}
    start = 2576 - cfg.spectrogram_span
    w = tone[start + 7 * cfg.hop: start + 7 * cfg.hop + cfg.dft_len] * fx.hann(cfg.dft_len)
    ref = naive_dft(w)
    np.testing.assert_allclose(sm.planes[0][7], ref.real, atol=1e-9)
    np.testing.assert_allclose(sm.planes[1][7], ref.imag, atol=1e-9)


def test_spectrogram_zero_and_plane_count():
    seg = MultiChannelAudioSegment(np.zeros((4, 2576)))
    sm = fx.spectrogram_map(seg)
    assert sm.plane_count == 8 and sm.planes.shape[1:] == (128, 128) and not sm.planes.any()
    assert FeatureConfig().hop == 24


def test_spectrogram_rejects_short_frame():
    with pytest.raises(InputError):
        fx.spectrogram_map(MultiChannelAudioSegment(np.zeros((2, 1500))), n=1400)


def test_combine_stacks_rows_then_resizes():
    rng = np.random.default_rng(6)
    seg = MultiChannelAudioSegment(rng.uniform(-0.5, 0.5, (4, 2576)))
    cor, eng = fx.correlation_energy_maps(seg)
    assert cor.height + eng.height == 10
    combined = fx.combine_features([cor, eng])
    stacked = np.concatenate([cor.planes[0], eng.planes[0]], axis=0)
    manual = np.empty((128, 128))
    # independent bilinear: per output pixel, corner-aligned source coordinates
    ys, xs = np.arange(128) * (9 / 127), np.arange(128) * (100 / 127)
    for i, y in enumerate(ys):
        y0 = min(int(np.floor(y)), 8)
        fy = y - y0
        row = (1 - fy) * stacked[y0] + fy * stacked[y0 + 1]
        manual[i] = np.interp(xs, np.arange(101), row)
    np.testing.assert_allclose(combined.planes[0], manual, atol=1e-9)
    single = fx.combine_features([cor])
    np.testing.assert_array_equal(single.planes, fx.cross_correlation_map(seg).planes)


def test_combine_rejects_mismatched_columns():
    a = fx.AudioFeatureMap(np.zeros((1, 3, 5)), "correlation", resized=False)
    b = fx.AudioFeatureMap(np.zeros((1, 2, 7)), "energy", resized=False)
    with pytest.raises(ShapeError):
        fx.combine_features([a, b])


def test_cor_eng_fast_path_matches_separate_maps():
    seg = MultiChannelAudioSegment(np.random.default_rng(7).uniform(-1, 1, (4, 2576)))
    cor, eng = fx.correlation_energy_maps(seg)
    np.testing.assert_array_equal(cor.planes, fx.cross_correlation_map(seg, resize=False).planes)
    np.testing.assert_allclose(eng.planes, fx.energy_map(seg, resize=False).planes, rtol=1e-15)


def test_symmetry_with_zero_padded_support():
    rng = np.random.default_rng(8)
    seg_len = 2576
    n = fx.default_anchor(MultiChannelAudioSegment(np.zeros((1, seg_len))), FeatureConfig())
    s = np.zeros((2, seg_len))
    lo, hi = n - 1200 + 50, n - 50
    s[:, lo:hi + 1] = rng.uniform(-1, 1, (2, hi + 1 - lo))
    seg = MultiChannelAudioSegment(s)
    c01 = fx.pair_correlation(seg, 0, 1)
    c10 = fx.pair_correlation(seg, 1, 0)
    np.testing.assert_allclose(c01, c10[::-1], atol=1e-12)


def test_segment_for_frame_zero_pads_history():
    cfg = FeatureConfig()
    audio = np.ones((2, 4800))
    seg = fx.segment_for_frame(audio, 0, cfg)
    assert len(seg) == cfg.window_length == 2576
    assert not seg.samples[:, :176].any() and seg.samples[:, 176:].all()
    with pytest.raises(InputError):
        fx.segment_for_frame(audio, 2, cfg)


def test_features_are_deterministic():
    seg = MultiChannelAudioSegment(np.random.default_rng(9).uniform(-1, 1, (4, 2576)))
    for kind in fx.FEATURE_KINDS:
        assert np.array_equal(fx.extract(seg, kind).planes, fx.extract(seg, kind).planes)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(-50, 50), seed=st.integers(0, 2**31 - 1))
def test_delay_recovery_property(d, seed):
    rng = np.random.default_rng(seed)
    x = band_noise(rng, 4000)
    y = np.roll(x, d)
    seg = MultiChannelAudioSegment(np.stack([x, y])[:, 1000:1000 + 2576])
    assert int(np.argmax(fx.pair_correlation(seg, 0, 1))) - 50 == d


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-4, 1.0))
def test_correlation_bounded_by_one(seed, scale):
    rng = np.random.default_rng(seed)
    seg = MultiChannelAudioSegment(rng.uniform(-scale, scale, (4, 2576)))
    assert np.abs(fx.cross_correlation_map(seg, resize=False).planes).max() <= 1 + 1e-6
