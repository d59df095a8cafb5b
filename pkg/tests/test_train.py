import csv
import math

import numpy as np
import pytest

from egoasl import sphere as sp
from egoasl.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from egoasl.errors import FormatError
from egoasl.features import FeatureConfig, extract_frames
from egoasl.model import ASLModel, NetConfig
from egoasl.nn.optim import Adam
from egoasl.sim import SimConfig, simulate
from egoasl.train import (TrainConfig, TrainingError, TrainingSet, extract_flat, make_checkpoint,
                          model_from_checkpoint, stage1_loss, stage1_step, stage2_loss, stage2_step,
                          stage_parameters, train)

TINY = NetConfig(input_size=32, extractor_planes=(4, 8), sphere_hidden=16, wearer_hidden=8, av_planes=(4, 8),
                 work_w=64, work_h=36)


@pytest.fixture(scope="module")
def data():
    sim = simulate(SimConfig(n_frames=24, seed=5), frame_size=(64, 36))
    feats = extract_frames(sim.audio, range(24), "cor", FeatureConfig(out_size=32))
    return TrainingSet(feats, sim.frames, sim.labels, sim.camera)


def _zero(model, prefixes):
    for n, p in model.named_parameters():
        if n.startswith(prefixes):
            p.data[...] = 0


def test_uniform_logits_give_two_ln2(data):
    m = ASLModel(TINY, data.camera)
    _zero(m, ("audio.fc_sphere.1", "av.head"))
    feats, frames, st, ft, wt = data.batch(np.arange(8))
    loss = stage1_loss(m, feats, frames, st, ft)
    assert float(loss.data) == pytest.approx(2 * math.log(2), abs=1e-6)


def test_uniform_wearer_logits_give_ln2(data):
    m = ASLModel(TINY, data.camera)
    _zero(m, ("audio.fc_wearer.1",))
    flat = extract_flat(m, data.features[:8])
    loss = stage2_loss(m, flat, data.batch(np.arange(8))[4])
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-6)


def test_batch_targets_are_one_hot(data):
    _, _, st, ft, wt = data.batch(np.arange(len(data)))
    for t in (st, ft):
        assert set(np.unique(t)) <= {0.0, 1.0}
        assert np.all(t.sum(axis=1) == 1)
    assert np.all(wt.sum(axis=1) == 1)
    assert ft.shape[2:] == (36, 64)


def test_stage1_gradient_matches_finite_differences(data):
    m = ASLModel(TINY, data.camera, dtype=np.float64)
    rng = np.random.default_rng(0)
    # zero-initialised biases put ReLU inputs exactly on the kink wherever a
    # receptive field sees only zeros; move them off it
    for n, p in m.named_parameters():
        if n.endswith("bias"):
            p.data[...] = rng.uniform(0.01, 0.05, p.data.shape)
    feats, frames, st, ft, _ = data.batch(np.arange(2))
    feats = feats.astype(np.float64)
    loss = stage1_loss(m, feats, frames, st, ft)
    m.zero_grad()
    loss.backward()
    eps = 1e-6
    for name, p in stage_parameters(m, 1):
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        analytic = p.grad[idx]
        keep = p.data[idx]
        p.data[idx] = keep + eps
        up = float(stage1_loss(m, feats, frames, st, ft).data)
        p.data[idx] = keep - eps
        down = float(stage1_loss(m, feats, frames, st, ft).data)
        p.data[idx] = keep
        numeric = (up - down) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-3 * max(1.0, abs(numeric)), name


def test_fov_loss_reaches_audio_extractor(data):
    """The crop path carries gradient from the AV branch into the audio net."""
    from egoasl.nn import functional as F
    m = ASLModel(TINY, data.camera)
    feats, frames, _, ft, _ = data.batch(np.arange(4))
    s = m.audio.sphere_head(m.audio.features(feats))
    loss = F.softmax_cross_entropy(m.av_forward(s, frames), ft)
    m.zero_grad()
    loss.backward()
    g = dict(m.named_parameters())["audio.extractor.0.weight"].grad
    assert g is not None and np.abs(g).sum() > 0


def test_overfit_one_batch_stage1(data):
    m = ASLModel(TINY, data.camera)
    opt = Adam([p for _, p in stage_parameters(m, 1)], lr=1e-3)
    batch = data.batch(np.arange(8))
    losses = [stage1_step(m, opt, batch) for _ in range(20)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_stage2_freeze_and_decrease(data):
    m = ASLModel(TINY, data.camera)
    before = {n: p.data.tobytes() for n, p in m.named_parameters()}
    opt = Adam([p for _, p in stage_parameters(m, 2)], lr=1e-3)
    idx = np.arange(8)
    flat = extract_flat(m, data.features[idx])
    wt = data.batch(idx)[4]
    losses = [stage2_step(m, opt, flat, wt) for _ in range(100)]
    assert losses[-1] < losses[0]
    for n, p in m.named_parameters():
        if n.startswith("audio.fc_wearer"):
            assert p.data.tobytes() != before[n]
        else:
            assert p.data.tobytes() == before[n], n


def test_non_finite_loss_aborts(data):
    m = ASLModel(TINY, data.camera)
    dict(m.named_parameters())["audio.fc_sphere.1.bias"].data[0] = np.nan
    opt = Adam([p for _, p in stage_parameters(m, 1)])
    with pytest.raises(TrainingError, match="non-finite loss"):
        stage1_step(m, opt, data.batch(np.arange(2)))


def _run(data, tmp_path=None, **kw):
    tcfg = TrainConfig(epochs=2, batch_size=8, seed=3, **kw)
    ck = None if tmp_path is None else str(tmp_path / "m.ckpt")
    log = None if tmp_path is None else str(tmp_path / "loss.csv")
    return train(data, tcfg, model=ASLModel(TINY, data.camera), checkpoint_path=ck, log_path=log)


def test_train_is_deterministic(data):
    a = _run(data)
    b = _run(data)
    assert encode(a.checkpoint) == encode(b.checkpoint)
    assert a.freeze_verified and b.freeze_verified


def test_checkpoint_and_loss_log_written(data, tmp_path):
    res = _run(data, tmp_path)
    ck = load_checkpoint(str(tmp_path / "m.ckpt"))
    assert encode(ck) == encode(res.checkpoint)
    with open(tmp_path / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "stage", "loss"]
    assert [(int(r[0]), int(r[1])) for r in rows[1:]] == [(0, 1), (1, 1), (0, 2), (1, 2)]
    m = model_from_checkpoint(ck)
    for n, p in res.model.named_parameters():
        assert np.array_equal(dict(m.named_parameters())[n].data, p.data)


def test_resume_matches_uninterrupted_run(data):
    full = _run(data)
    first = train(data, TrainConfig(epochs=1, batch_size=8, seed=3, stage=1), model=ASLModel(TINY, data.camera))
    rest = train(data, TrainConfig(epochs=2, batch_size=8, seed=3), resume=first.checkpoint)
    assert encode(rest.checkpoint) == encode(full.checkpoint)


def test_checkpoint_round_trip_and_errors(data, tmp_path):
    m = ASLModel(TINY, data.camera)
    ck = make_checkpoint(m, None, [], TrainConfig(), 1, 0)
    ck.arrays["meta/ints"] = np.arange(5, dtype=np.int32)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert set(back.arrays) == set(ck.arrays)
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype == v.dtype and back.arrays[k].tobytes() == v.tobytes()
    raw = encode(ck)
    with pytest.raises(FormatError, match="truncated"):
        decode(raw[:len(raw) // 2])
    with pytest.raises(FormatError, match="magic"):
        decode(b"XSLCKPT1" + raw[8:])
    with pytest.raises(FormatError, match="trailing"):
        decode(raw + b"\0")


def test_cross_config_load_names_array(data):
    ck = make_checkpoint(ASLModel(TINY, data.camera), None, [], TrainConfig(), 1, 0)
    wider = ASLModel(NetConfig(**{**TINY.to_dict(), "sphere_hidden": 12}), data.camera)
    with pytest.raises(ValueError, match="shape mismatch for 'audio.fc_sphere.0.weight'"):
        wider.load_state_dict(ck.group("param"))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(feature_kind="mfcc")
    assert TrainConfig(feature_kind="cor+box").masked
    assert TrainConfig(feature_kind="spec").base_kind == "spec"


def test_masked_batches_blank_the_background(data):
    k = next(i for i in range(len(data)) if data.labels[i].boxes)
    frames = data.batch(np.array([k]), masked=True)[1][0]
    keep = sp.box_mask(data.work_boxes(k), 64, 36)
    assert np.all(frames[~keep] == 0)
    assert np.array_equal(frames[keep], data.frames[k][keep])
