"""Command-line entry point: simulate, features, train, infer, eval, bench, render."""
from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import time

import numpy as np

from . import metrics as M
from . import pipeline
from . import sphere as sp
from .checkpoint import atomic_write_bytes, load_checkpoint
from .config import RunConfig, load_config
from .dataset import Dataset, write_dataset
from .features import FeatureConfig, extract_frames, feature_planes
from .model import ASLModel, NetConfig
from .pnm import read_pnm, to_gray8, write_pnm
from .sim import SimConfig, simulate
from .train import TrainConfig, TrainingSet, model_from_checkpoint, split_kind, train

log = logging.getLogger("egoasl")

SPHERE_CSV = "sphere_{:06d}.csv"
FOV_PGM = "fov_{:06d}.pgm"
WEARER_CSV = "wearer.csv"
FOV_SCALE = 2.0  # FOV score images hold [0, 2] in 16 bits


def _add_config_flags(p):
    p.add_argument("--config", help="key=value run configuration file")
    for key in RunConfig.keys():
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.with_values(over)


def _camera(cfg: RunConfig, image_w=640, image_h=360):
    return sp.CameraModel(cfg.fov_h_deg, cfg.fov_v_deg, image_w, image_h)


def _frame_range(spec, n):
    if not spec:
        return np.arange(n)
    a, _, b = spec.partition(":")
    lo = int(a) if a else 0
    hi = int(b) if b else n
    if not 0 <= lo < hi <= n:
        raise ValueError(f"frame range {spec!r} outside 0..{n}")
    return np.arange(lo, hi)


def _load_split(args, cfg):
    ds = Dataset.open(args.data)
    idx = _frame_range(args.frames, len(ds.labels))
    fw, fh = ds.frame_size()
    camera = _camera(cfg, fw, fh)
    audio = ds.audio[:cfg.channels]
    frames = ds.load_frames(idx, cfg.work_w, cfg.work_h)
    return ds, idx, camera, audio, frames


def cmd_simulate(args):
    cfg = _run_config(args)
    scfg = SimConfig(n_frames=args.frames, seed=cfg.seed, snr_db=args.snr_db, moving_head=not args.static_head)
    data = simulate(scfg, _camera(cfg))
    write_dataset(args.out, data, args.sample_format)
    print(f"wrote {args.frames} frames to {args.out}")


def cmd_features(args):
    cfg = _run_config(args)
    ds = Dataset.open(args.data)
    idx = _frame_range(args.frames, len(ds.labels))
    feats = extract_frames(ds.audio[:cfg.channels], [ds.labels[k].frame for k in idx], cfg.feature)
    buf = io.BytesIO()
    np.save(buf, feats)
    atomic_write_bytes(args.out, buf.getvalue())
    if args.pgm_dir:
        for i, k in enumerate(idx):
            for p, plane in enumerate(feats[i]):
                write_pnm(os.path.join(args.pgm_dir, f"feat_{ds.labels[k].frame:06d}_{p}.pgm"), to_gray8(plane))
    print(f"features {cfg.feature}: {feats.shape} -> {args.out}")


def cmd_train(args):
    cfg = _run_config(args)
    ds, idx, camera, audio, frames = _load_split(args, cfg)
    feats = extract_frames(audio, [ds.labels[k].frame for k in idx], cfg.feature)
    data = TrainingSet(feats, frames, [ds.labels[k] for k in idx], camera)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch, lr=cfg.lr, seed=cfg.seed, feature_kind=cfg.feature,
                       use_box_mask=cfg.use_box_mask, stage=args.stage)
    resume = load_checkpoint(args.resume) if args.resume else None
    net = NetConfig(feature_planes=feats.shape[1], work_w=cfg.work_w, work_h=cfg.work_h, seed=cfg.seed)
    res = train(data, tcfg, net, checkpoint_path=args.out, log_path=args.log, resume=resume)
    for e, s, l in res.losses:
        print(f"stage {s} epoch {e} loss {l:.5f}")
    if res.freeze_verified is not None:
        print(f"feature freeze verified: {res.freeze_verified}")


def _write_predictions(out, frame_ids, fused, fov_img, wearer):
    os.makedirs(out, exist_ok=True)
    for k, f in enumerate(frame_ids):
        buf = io.StringIO()
        np.savetxt(buf, fused[k], fmt="%.9g", delimiter=",")
        atomic_write_bytes(os.path.join(out, SPHERE_CSV.format(f)), buf.getvalue().encode())
        q = np.clip(np.round(fov_img[k] / FOV_SCALE * 65535), 0, 65535).astype(np.uint16)
        write_pnm(os.path.join(out, FOV_PGM.format(f)), q)
    rows = "frame,probability\n" + "".join(f"{f},{p:.9g}\n" for f, p in zip(frame_ids, wearer))
    atomic_write_bytes(os.path.join(out, WEARER_CSV), rows.encode())


def oracle_outputs(labels, camera):
    """Perfect predictions from ground truth: one hot cell per active source,
    active head boxes filled in the FOV image, wearer flag as probability."""
    fused, fov, wearer = [], [], []
    for lab in labels:
        g = np.zeros((sp.AZ_CELLS, sp.EL_CELLS))
        for d, a in lab.sources:
            if a:
                g[sp.cell_of(d)] = 1.0
        fused.append(g)
        fov.append(sp.render_gt_fov(lab.boxes, camera.image_w, camera.image_h)[0].astype(np.float64))
        wearer.append(float(lab.wearer_active))
    return fused, fov, wearer


def cmd_infer(args):
    cfg = _run_config(args)
    ds = Dataset.open(args.data)
    idx = _frame_range(args.frames, len(ds.labels))
    labels = [ds.labels[k] for k in idx]
    fw, fh = ds.frame_size()
    camera = _camera(cfg, fw, fh)
    ids = [lab.frame for lab in labels]
    if args.oracle:
        fused, fov, wearer = oracle_outputs(labels, camera)
    else:
        if not args.ckpt:
            raise ValueError("infer needs --ckpt (or --oracle)")
        ck = load_checkpoint(args.ckpt)
        model = model_from_checkpoint(ck)
        kind, boxed = split_kind(ck.config["train"]["feature_kind"])
        masked = boxed or ck.config["train"].get("use_box_mask", False)
        frames = ds.load_frames(idx, model.cfg.work_w, model.cfg.work_h)
        feats = extract_frames(ds.audio[:cfg.channels], ids, kind)
        data = TrainingSet(feats, frames, labels, camera)
        pred = pipeline.predict(model, data, masked=masked)
        fused = pred.fused
        fov = [M.fov_scores(pred.sphere_prob[k], pred.fov_prob[k], model.camera, fw, fh) for k in range(len(ids))]
        wearer = pred.wearer_prob
    _write_predictions(args.out, ids, fused, fov, wearer)
    print(f"wrote predictions for {len(ids)} frames to {args.out}")


def read_predictions(pred_dir, frame_ids):
    fused = [np.loadtxt(os.path.join(pred_dir, SPHERE_CSV.format(f)), delimiter=",", ndmin=2) for f in frame_ids]
    fov = [read_pnm(os.path.join(pred_dir, FOV_PGM.format(f))).astype(np.float64) / 65535 * FOV_SCALE
           for f in frame_ids]
    table = np.loadtxt(os.path.join(pred_dir, WEARER_CSV), delimiter=",", skiprows=1, ndmin=2)
    wearer = dict(zip(table[:, 0].astype(int), table[:, 1]))
    return fused, fov, [wearer[f] for f in frame_ids]


def cmd_eval(args):
    cfg = _run_config(args)
    ds = Dataset.open(args.data)
    idx = _frame_range(args.frames, len(ds.labels))
    labels = [ds.labels[k] for k in idx]
    fused, fov, wearer = read_predictions(args.pred, [lab.frame for lab in labels])
    samples = []
    for lab, img in zip(labels, fov):
        samples.extend(M.box_scores(img, lab.boxes, lab.frame))
    ap = M.average_precision(samples) if any(s.label for s in samples) else float("nan")
    det = pipeline.peaks(fused, cfg.nms_threshold, cfg.nms_radius)
    gt = [M.snap_to_cells([d for d, a in lab.sources if a]) for lab in labels]
    errors = M.spherical_errors(det, gt, args.metric)
    wl = [lab.wearer_active for lab in labels]
    wap = M.wearer_ap(wearer, wl) if any(wl) else float("nan")
    report = M.format_report(ap, errors, wap)
    if args.out:
        atomic_write_bytes(args.out, report.encode())
    sys.stdout.write(report)


def cmd_bench(args):
    cfg = _run_config(args)
    if args.frames < 1:
        raise ValueError("bench needs at least one frame")
    if args.ckpt:
        ck = load_checkpoint(args.ckpt)
        model = model_from_checkpoint(ck)
        kind = split_kind(ck.config["train"]["feature_kind"])[0]
    else:
        kind = cfg.feature
        model = ASLModel(NetConfig(feature_planes=feature_planes(kind, n_channels=cfg.channels),
                                   work_w=cfg.work_w, work_h=cfg.work_h, seed=cfg.seed), _camera(cfg))
    if args.data:
        ds = Dataset.open(args.data)
        n = min(args.frames + 1, len(ds.labels))
        audio = ds.audio[:cfg.channels]
        frames = ds.load_frames(np.arange(n), model.cfg.work_w, model.cfg.work_h)
        ids = [ds.labels[k].frame for k in range(n)]
    else:
        n = args.frames + 1
        data = simulate(SimConfig(n_frames=n, seed=cfg.seed), _camera(cfg), frame_size=(model.cfg.work_w,
                                                                                        model.cfg.work_h))
        audio, frames, ids = data.audio[:cfg.channels], data.frames, list(range(n))
    if n < 2:
        raise ValueError("bench needs at least one frame after warm-up")
    report = bench(model, audio, frames, ids, kind)
    sys.stdout.write(report)


def bench(model, audio, frames, ids, kind, fcfg=FeatureConfig()):
    """Per-frame timing; the first frame is a warm-up and is not counted."""
    pipeline.timed_frame(model, audio, ids[0], frames[0], kind, fcfg)
    stages = {}
    t0 = time.perf_counter()
    for k in range(1, len(ids)):
        _, t = pipeline.timed_frame(model, audio, ids[k], frames[k], kind, fcfg)
        for name, v in t.items():
            stages.setdefault(name, []).append(v)
    wall = time.perf_counter() - t0
    n = len(ids) - 1
    lines = [f"frames {n}", f"fps {n / wall:.2f}"]
    for name, v in stages.items():
        lines.append(f"{name}_ms mean {1e3 * np.mean(v):.3f} median {1e3 * np.median(v):.3f}")
    feat = np.sum(stages["features"])
    lines.append(f"feature_fps {n / feat:.2f}")
    return "\n".join(lines) + "\n"


def _heat_rgb(v):
    """[0, 1] to a black-red-yellow-white ramp."""
    v = np.clip(v, 0, 1)[..., None]
    return np.concatenate([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)


def cmd_render(args):
    fused, fov, _ = read_predictions(args.pred, [args.frame]) if os.path.exists(
        os.path.join(args.pred, WEARER_CSV)) else (None, None, None)
    if fused is None:
        raise FileNotFoundError(f"no predictions in {args.pred}")
    os.makedirs(args.out, exist_ok=True)
    # sphere map as an image: azimuth left to right, elevation up
    write_pnm(os.path.join(args.out, f"sphere_{args.frame:06d}.pgm"), to_gray8(fused[0].T[::-1], 0.0, 2.0))
    heat = _heat_rgb(fov[0] / FOV_SCALE)
    if args.data:
        ds = Dataset.open(args.data)
        img = read_pnm(ds.frame_path(args.frame)).astype(np.float64) / 255
        if img.shape[:2] != heat.shape[:2]:
            raise ValueError("frame and FOV map sizes differ")
        heat = 0.5 * img + 0.5 * heat
    write_pnm(os.path.join(args.out, f"overlay_{args.frame:06d}.ppm"), np.round(heat * 255).astype(np.uint8))
    print(f"rendered frame {args.frame} to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="egoasl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--snr-db", type=float, default=10.0)
    s.add_argument("--static-head", action="store_true")
    s.add_argument("--sample-format", choices=("float32", "pcm16", "pcm24"), default="float32")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("features", help="dump feature maps as .npy")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", help="range a:b of label rows")
    s.add_argument("--pgm-dir", help="also write each plane as an 8-bit PGM")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train both stages and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="CSV loss log path")
    s.add_argument("--frames", help="range a:b of label rows")
    s.add_argument("--stage", type=int, default=0, choices=(0, 1, 2))
    s.add_argument("--resume", help="continue from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="write per-frame sphere CSVs, FOV PGMs and wearer CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", help="range a:b of label rows")
    s.add_argument("--oracle", action="store_true", help="emit ground-truth predictions")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against labels")
    s.add_argument("--data", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--frames", help="range a:b of label rows")
    s.add_argument("--metric", choices=("great_circle", "grid"), default="great_circle")
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="end-to-end throughput")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--frames", type=int, default=50)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("render", help="heat-map images for one frame")
    s.add_argument("--pred", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    for name in ("simulate", "features", "train", "infer", "eval", "bench", "render"):
        _add_config_flags(sub.choices[name])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"egoasl {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
