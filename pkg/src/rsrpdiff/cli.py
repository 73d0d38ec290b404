"""Command-line entry point: ``rsrpdiff <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import mapio

log = logging.getLogger("rsrpdiff")


def _load_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _set_threads(n: int) -> None:
    import torch

    torch.set_num_threads(max(1, n))


def cmd_polygonize(args) -> int:
    from .geometry import polygonize

    m = mapio.load_scene(args.alt, args.bld)
    scene = polygonize(m, args.max_edges, args.height_quantum)
    scene.to_jsonl(args.output)
    print(f"{len(scene)} buildings ({scene.dropped} degenerate regions dropped) -> {args.output}")
    return 0


def _feature_config(args, cfg: dict):
    from .dataset import FeatureConfig
    from .occlusion import OcclusionConfig
    from .propagation import PropagationConfig

    prop = _load_config(getattr(args, "prop_config", None))
    return FeatureConfig(
        n_ref=args.n_ref, n_nlos=args.n_nlos, fov_l=args.fov,
        prop=PropagationConfig.from_dict(prop), occlusion=OcclusionConfig.from_dict(prop),
    )


def cmd_features(args) -> int:
    from .dataset import compute_features, write_features
    from .geometry import PolygonScene

    m = mapio.load_scene(args.alt, args.bld)
    scene = PolygonScene.from_jsonl(args.scene, m.sample_altitude) if args.scene else None
    if scene is None:
        from .geometry import polygonize
        scene = polygonize(m)
    traj = mapio.load_trajectory(args.traj, m, args.ue_height)
    bs = mapio.load_bs_record(args.bs)
    with warnings.catch_warnings():
        warnings.simplefilter("once")
        bundle = compute_features(m, scene, bs, traj, _feature_config(args, {}))
    write_features(bundle, args.output)
    print(f"features for T={bundle.T} -> {args.output}")
    return 0


def cmd_synth(args) -> int:
    from .dataset import SynthConfig, generate_dataset

    cfg = SynthConfig(n_samples=args.n_samples, T=args.T, full=not args.teacher_only,
                      noise_sigma_db=args.noise_sigma)
    cfg.features = _feature_config(args, {})
    map_ = None
    alt, bld = args.alt, args.bld
    if args.scene and not (alt and bld):
        d = Path(args.scene).parent
        if (d / "alt.grid").exists() and (d / "bld.grid").exists():
            alt, bld = d / "alt.grid", d / "bld.grid"
    if alt and bld:
        map_ = mapio.load_scene(alt, bld)
    ds = generate_dataset(args.output, cfg, args.seed, map_)
    print(f"{len(ds)} samples, T={ds.T} -> {args.output}")
    return 0


def _load_any_dataset(path):
    from .dataset import SequenceDataset, load_dataset, read_features

    p = Path(path)
    if (p / "dataset.npz").exists() or (p / "manifest.json").exists():
        return load_dataset(p)
    return SequenceDataset.from_samples([read_features(p)])


def cmd_train(args) -> int:
    from .dataset import split_indices
    from .diffusion import make_schedule, schedule_from_dict
    from .neural import TOY_CONFIG, DenoiserConfig, build_model, load_checkpoint, save_checkpoint
    from .training import Normalizers, TrainConfig, train_stage

    conf = _load_config(args.config)
    ds = _load_any_dataset(args.data)
    tr, va, _ = split_indices(len(ds), tuple(conf.get("splits", (0.8, 0.1, 0.1))), args.seed)
    tcfg = TrainConfig.from_dict({**conf.get("train", {}), "seed": args.seed})
    if args.stage == "student" and args.teacher_ckpt:
        model, extra = load_checkpoint(args.teacher_ckpt)
        norms = Normalizers.from_dict(extra["norms"])
        schedule = schedule_from_dict(extra["schedule"])
    else:
        mcfg = DenoiserConfig.from_dict({**TOY_CONFIG.to_dict(), **conf.get("model", {})})
        model = build_model(mcfg, args.seed)
        norms = Normalizers.fit(ds.subset(tr))
        schedule = schedule_from_dict(conf["schedule"]) if "schedule" in conf else make_schedule()
    progress = (lambda s, e, a, b: print(f"{s} epoch {e}: train {a:.5f} val {b:.5f}", flush=True)) if args.verbose else None
    res = train_stage(args.stage, ds.subset(tr), ds.subset(va), model, schedule, tcfg, norms, progress=progress)
    save_checkpoint(args.ckpt, model, {"stage": args.stage, "norms": norms.to_dict(), "schedule": schedule.to_dict()})
    res.write_trace(str(args.ckpt) + ".loss.csv")
    print(f"{args.stage}: best val {res.best_val:.5f} at epoch {res.best_epoch} -> {args.ckpt}")
    return 0


def cmd_predict(args) -> int:
    from .diffusion import SamplerMode, schedule_from_dict
    from .neural import load_checkpoint
    from .training import Normalizers, predict

    model, extra = load_checkpoint(args.ckpt)
    ds = _load_any_dataset(args.features)
    pred = predict(model, ds, schedule_from_dict(extra["schedule"]), Normalizers.from_dict(extra["norms"]),
                   extra.get("stage", "student"), args.seed, SamplerMode(args.mode), steps=args.steps)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write("sample,t,rsrp_dbm\n")
        for i, row in enumerate(pred):
            for t, v in enumerate(row):
                fh.write(f"{i},{t},{float(v)!r}\n")
    print(f"{pred.shape[0]} x {pred.shape[1]} predictions -> {args.output}")
    return 0


def _read_values(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, -1]


def cmd_eval(args) -> int:
    from .metrics import MetricReport, cdf_report

    y = _read_values(args.target)
    yhat = _read_values(args.pred)
    rep = MetricReport.evaluate(y, yhat, args.bins)
    text = json.dumps(rep.to_dict(), indent=1, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    if args.cdf_csv:
        cdf_report(yhat - y).to_csv(args.cdf_csv)
    print(text)
    return 0


def cmd_experiment(args) -> int:
    from .experiment import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_dict(_load_config(args.config))
    if args.seed is not None:
        cfg.root_seed = args.seed
    if args.no_teacher:
        cfg.no_teacher = True
    report = run_experiment(cfg, args.output, threads=args.threads)
    m = report["metrics"]["two_stage"]
    print(f"two-stage: JSD {m['jsd']:.4f} NRMSE {m['nrmse']:.4f} MAE {m['mae']:.3f} dB -> {args.output}/report.json")
    return 0


def _feature_flags(p) -> None:
    p.add_argument("--n-ref", type=int, default=1)
    p.add_argument("--n-nlos", type=int, default=4)
    p.add_argument("--fov", type=float, default=85.0, help="micro-map field of view l in meters")
    p.add_argument("--prop-config", help="JSON with G_t, G_r, u, model_override, L_shadow_m, B_max_dB, K_dB")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--config", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="rsrpdiff", parents=[common])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("polygonize", parents=[common])
    p.add_argument("--alt", required=True)
    p.add_argument("--bld", required=True)
    p.add_argument("--max-edges", type=int, default=6)
    p.add_argument("--height-quantum", type=float, default=3.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_polygonize)

    p = sub.add_parser("features", parents=[common])
    p.add_argument("--alt", required=True)
    p.add_argument("--bld", required=True)
    p.add_argument("--scene")
    p.add_argument("--traj", required=True)
    p.add_argument("--bs", required=True)
    p.add_argument("--ue-height", type=float, default=1.5)
    _feature_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("synth", parents=[common])
    p.add_argument("--scene")
    p.add_argument("--alt")
    p.add_argument("--bld")
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--T", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=2.0)
    p.add_argument("--teacher-only", action="store_true", help="skip multipath, occlusion and micro-maps")
    _feature_flags(p)
    p.set_defaults(fov=20.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", parents=[common])
    p.add_argument("--stage", choices=("teacher", "student"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--teacher-ckpt")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", parents=[common])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True, help="a features directory or a dataset directory")
    p.add_argument("--mode", choices=("deterministic", "stochastic"), default="deterministic")
    p.add_argument("--steps", type=int, default=None, help="visit this many evenly spaced reverse steps (default: all K)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--cdf-csv")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", parents=[common])
    p.add_argument("--no-teacher", action="store_true", help="also train a from-scratch student for comparison")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.verb not in ("experiment",) and args.seed is None:
        args.seed = 0
    _set_threads(args.threads)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
