"""End-to-end synthetic pipeline: data, teacher, student, prediction and report.

Every randomized stage draws its seed from the root seed through
``stage_seed(root, STAGE_INDEX[name])`` (a SeedSequence keyed by the pair), so
adding a stage never shifts the seeds of existing ones.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .dataset import CityConfig, SequenceDataset, SynthConfig, generate_dataset, split_indices
from .diffusion import NoiseSchedule, SamplerMode, make_schedule, schedule_from_dict
from .metrics import MetricReport, cdf_report, performance_density, rank_models
from .neural import DenoiserConfig, RSRPDenoiser, TOY_CONFIG, build_model, save_checkpoint
from .training import Normalizers, TrainConfig, predict, train_stage

log = logging.getLogger(__name__)

REPORT_VERSION = "report_v1"
STAGE_INDEX = {"data": 0, "split": 1, "init": 2, "teacher": 3, "student": 4, "predict": 5,
               "scratch_init": 6, "scratch": 7}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def stage_seed(root: int, index: int) -> int:
    return int(np.random.SeedSequence([int(root), int(index)]).generate_state(1)[0] % (2 ** 31))


@dataclass
class ExperimentConfig:
    root_seed: int = 7
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(n_samples=120, T=32))
    model: DenoiserConfig = TOY_CONFIG
    schedule: dict = field(default_factory=lambda: {"K": 100, "mode": "PAPER"})
    train: TrainConfig = field(default_factory=lambda: TrainConfig(teacher_epochs=5, student_epochs=5, lr=1e-3))
    splits: tuple = (0.8, 0.1, 0.1)
    no_teacher: bool = False
    sampler: str = "deterministic"
    sampler_steps: Optional[int] = None
    n_bins: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        cfg = cls()
        if "synth" in d:
            s = dict(d["synth"])
            city = CityConfig(**s.pop("city", {}))
            feats = s.pop("features", {})
            fc = replace(SynthConfig().features, **{k: v for k, v in feats.items() if k in ("n_ref", "n_nlos", "fov_l")})
            cfg.synth = SynthConfig(**s, city=city, features=fc)
        if "model" in d:
            base = TOY_CONFIG.to_dict()
            base.update(d["model"])
            if "mfen" in d["model"]:
                base["mfen"] = {**TOY_CONFIG.mfen.__dict__, **d["model"]["mfen"]}
            cfg.model = DenoiserConfig.from_dict(base)
        if "schedule" in d:
            cfg.schedule = dict(d["schedule"])
        if "train" in d:
            cfg.train = TrainConfig.from_dict({**cfg.train.__dict__, **d["train"]})
        for key in ("root_seed", "no_teacher", "sampler", "sampler_steps", "n_bins"):
            if key in d:
                setattr(cfg, key, d[key])
        if "splits" in d:
            cfg.splits = tuple(d["splits"])
        return cfg


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # re-raised with the stage name attached
        raise StageFailure(name, exc) from exc


def _clean(obj):
    """JSON-ready copy with plain floats (repr round-trips exactly)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _fit_model(cfg: ExperimentConfig, seeds: dict, train: SequenceDataset, val: SequenceDataset,
               schedule: NoiseSchedule, norms: Normalizers, with_teacher: bool, ckpt_dir: Path, tag: str) -> tuple:
    init_key = "init" if with_teacher else "scratch_init"
    model: RSRPDenoiser = build_model(cfg.model, seeds[init_key])
    losses = {}
    if with_teacher:
        tcfg = _with_seed(cfg.train, seeds["teacher"])
        res = _stage("teacher", train_stage, "teacher", train, val, model, schedule, tcfg, norms)
        res.write_trace(ckpt_dir / f"{tag}_teacher_loss.csv")
        save_checkpoint(ckpt_dir / f"{tag}_teacher.ckpt", model, {"stage": "teacher", "norms": norms.to_dict(),
                                                                 "schedule": schedule.to_dict()})
        losses["teacher_best_val"] = res.best_val
        losses["teacher_best_epoch"] = res.best_epoch
    scfg = _with_seed(cfg.train, seeds["student" if with_teacher else "scratch"])
    res = _stage("student", train_stage, "student", train, val, model, schedule, scfg, norms)
    res.write_trace(ckpt_dir / f"{tag}_student_loss.csv")
    save_checkpoint(ckpt_dir / f"{tag}_student.ckpt", model, {"stage": "student", "norms": norms.to_dict(),
                                                             "schedule": schedule.to_dict()})
    losses["student_initial_val"] = res.initial_val
    losses["student_best_val"] = res.best_val
    losses["student_best_epoch"] = res.best_epoch
    return model, losses


def _with_seed(tc: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**tc.__dict__, "seed": seed})


def _write_predictions(pred: np.ndarray, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample,t,rsrp_dbm\n")
        for i, row in enumerate(pred):
            for t, v in enumerate(row):
                fh.write(f"{i},{t},{float(v)!r}\n")


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Run the whole pipeline into ``out_dir``; returns the report dict (also report.json)."""
    torch.set_num_threads(max(1, int(threads)))
    out = Path(out_dir)
    for sub in ("features", "checkpoints", "predictions"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    seeds = {k: stage_seed(cfg.root_seed, i) for k, i in STAGE_INDEX.items()}

    ds = _stage("data", generate_dataset, out / "features", copy.deepcopy(cfg.synth), seeds["data"])
    tr, va, te = split_indices(len(ds), cfg.splits, seeds["split"])
    train, val, test = ds.subset(tr), ds.subset(va), ds.subset(te)
    schedule = _stage("schedule", schedule_from_dict, cfg.schedule)
    norms = Normalizers.fit(train)

    y = test.rsrp_real
    rows, metrics, losses, preds = [], {}, {}, {}
    variants = [("two_stage", True)] + ([("no_teacher", False)] if cfg.no_teacher else [])
    for tag, with_teacher in variants:
        model, losses[tag] = _fit_model(cfg, seeds, train, val, schedule, norms, with_teacher, out / "checkpoints", tag)
        pred = _stage("predict", predict, model, test, schedule, norms, "student", seeds["predict"],
                      SamplerMode(cfg.sampler), steps=cfg.sampler_steps)
        preds[tag] = pred
        _write_predictions(pred, out / "predictions" / f"{tag}.csv")
        metrics[tag] = MetricReport.evaluate(y, pred, cfg.n_bins)
    metrics["rsrp_calc"] = MetricReport.evaluate(y, test.rsrp_calc, cfg.n_bins)
    cdf_report(preds["two_stage"] - y).to_csv(out / "predictions" / "two_stage_cdf.csv")

    for name, m in metrics.items():
        rows.append({"name": name, "jsd": m.jsd, "nrmse": m.nrmse, "mae": m.mae})
    flops = float(np.mean(ds.flops)) if ds.flops is not None else None
    table = rank_models(rows, {"e_re": flops} if flops else None)

    report = {
        "schema": REPORT_VERSION,
        "root_seed": cfg.root_seed,
        "seeds": seeds,
        "n_train": len(train), "n_val": len(val), "n_test": len(test), "T": ds.T,
        "metrics": {k: v.to_dict() for k, v in metrics.items()},
        "rank_table": table.to_dict(),
        "losses": losses,
        "schedule": schedule.to_dict(),
    }
    if flops:
        report["m_ef"] = performance_density(metrics["two_stage"].nrmse, flops)
    if cfg.no_teacher:
        err_a = np.abs(preds["two_stage"] - y).mean(axis=1)
        err_b = np.abs(preds["no_teacher"] - y).mean(axis=1)
        report["paired"] = [
            {"metric": key, "two_stage": getattr(metrics["two_stage"], key),
             "no_teacher": getattr(metrics["no_teacher"], key),
             "delta": getattr(metrics["two_stage"], key) - getattr(metrics["no_teacher"], key)}
            for key in ("jsd", "nrmse", "mae")
        ] + [{"metric": "per_sample_mae_wins", "two_stage": int(np.sum(err_a < err_b)),
              "no_teacher": int(np.sum(err_b < err_a)), "delta": int(np.sum(err_a < err_b) - np.sum(err_b < err_a))}]
    report = _clean(report)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return report


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))
