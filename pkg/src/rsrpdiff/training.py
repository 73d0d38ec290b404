"""Teacher/student training, early stopping, prediction and normalizers."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .dataset import SequenceDataset
from .diffusion import (NoiseSchedule, Normalizer, SamplerMode, TorchSchedule, diffusion_loss, sample,
                        transform_params)
from .neural import ConditionBundle, NonFiniteActivationError, RSRPDenoiser, make_optimizer

log = logging.getLogger(__name__)

STAGES = ("teacher", "student")


class StageConfigError(ValueError):
    """The dataset lacks a stream the requested stage needs."""


@dataclass
class TrainConfig:
    batch_size: int = 48
    lr: float = 1e-4
    teacher_epochs: int = 50
    student_epochs: int = 320
    patience: int = 12
    grad_clip: float = 1.0
    seed: int = 0
    # length robustness (off by default): random sub-window lengths >= min_window
    # and random positional offsets in [0, max_pos_shift]
    min_window: int = 0
    max_pos_shift: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def max_epochs(self, stage: str) -> int:
        return self.teacher_epochs if stage == "teacher" else self.student_epochs


@dataclass
class Normalizers:
    target: Normalizer
    params: Normalizer
    crops: Optional[Normalizer] = None

    @classmethod
    def fit(cls, ds: SequenceDataset) -> "Normalizers":
        tgt = ds.rsrp_real if ds.rsrp_real is not None else ds.rsrp_calc
        target = Normalizer.fit(tgt, axis=None)
        params = Normalizer.fit(transform_params(ds.network_params).reshape(-1, 10), axis=0)
        crops = None
        if ds.crops is not None:
            c = np.moveaxis(ds.crops, 2, 0).reshape(2, -1)
            crops = Normalizer(c.mean(axis=1)[:, None, None], np.maximum(c.std(axis=1), 1e-6)[:, None, None])
        return cls(target, params, crops)

    def to_dict(self) -> dict:
        return {k: (None if v is None else v.to_dict()) for k, v in
                (("target", self.target), ("params", self.params), ("crops", self.crops))}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizers":
        return cls(*(None if d.get(k) is None else Normalizer.from_dict(d[k]) for k in ("target", "params", "crops")))


def required_streams(stage: str, model: RSRPDenoiser) -> tuple:
    if stage == "teacher":
        return ("rsrp_calc",)
    cfg = model.cfg
    req = ["rsrp_calc", "rsrp_real"]
    if cfg.use_e_of:
        req.append("e_of")
    if cfg.use_e_re:
        req.append("e_re")
    if cfg.use_mfen:
        req.append("crops")
    return tuple(req)


def check_stage(stage: str, ds: SequenceDataset, model: RSRPDenoiser) -> None:
    if stage not in STAGES:
        raise StageConfigError(f"unknown stage {stage!r}")
    missing = [s for s in required_streams(stage, model) if getattr(ds, s) is None]
    if missing:
        raise StageConfigError(f"{stage} stage needs dataset streams {missing}")


def stage_tensors(ds: SequenceDataset, norms: Normalizers, stage: str, model: RSRPDenoiser,
                  for_sampling: bool = False) -> dict:
    """Normalized float32 tensors for one stage."""
    f = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)
    calc = norms.target.normalize(ds.rsrp_calc)
    out = {
        "params": f(norms.params.normalize(transform_params(ds.network_params))),
        "x0_calc": f(calc),
    }
    if stage == "teacher":
        out["x0"] = f(calc)
        out["e"] = torch.ones_like(out["x0_calc"])
        return out
    if not for_sampling:
        out["x0"] = f(norms.target.normalize(ds.rsrp_real))
    cfg = model.cfg
    out["e"] = f(ds.e_of) if cfg.use_e_of else torch.ones_like(out["x0_calc"])
    if cfg.use_e_of:
        out["e_of"] = out["e"]
    if cfg.use_e_re:
        out["e_re"] = f(ds.e_re)
    if cfg.use_mfen:
        out["crops"] = f(norms.crops.normalize(ds.crops)) if norms.crops is not None else f(ds.crops)
        if ds.coords is not None:
            out["coords"] = f(ds.coords)
    return out


def make_bundle(tensors: dict, idx, k: torch.Tensor, pos_offset: Optional[torch.Tensor] = None) -> ConditionBundle:
    g = lambda name: tensors[name][idx] if name in tensors else None
    return ConditionBundle(network_params=g("params"), k=k, e_re=g("e_re"), e_of=g("e_of"),
                           crops=g("crops"), coords=g("coords"), e_me=g("e_me"), pos_offset=pos_offset)


def model_fn_for(model: RSRPDenoiser, tensors: dict, idx, pos_offset: Optional[torch.Tensor] = None) -> Callable:
    def fn(x, k):
        return model(x, make_bundle(tensors, idx, k, pos_offset))
    return fn


def _window(tensors: dict, idx, start: int, length: int) -> dict:
    """Batch rows ``idx`` cut to time steps [start, start + length)."""
    return {name: t[idx][:, start:start + length] for name, t in tensors.items()}


def _augment(tensors: dict, idx, cfg: TrainConfig, gen: torch.Generator) -> tuple:
    """(batch tensors, pos_offset or None) after optional window and shift augmentation."""
    T = tensors["x0"].shape[1]
    length, start = T, 0
    if 0 < cfg.min_window < T:
        length = int(torch.randint(cfg.min_window, T + 1, (1,), generator=gen))
        start = int(torch.randint(0, T - length + 1, (1,), generator=gen))
    off = None
    if cfg.max_pos_shift > 0:
        off = torch.randint(0, cfg.max_pos_shift + 1, (len(idx),), generator=gen)
    return _window(tensors, idx, start, length), off


@dataclass
class TrainResult:
    model: RSRPDenoiser
    trace: list = field(default_factory=list)  # (epoch, split, loss)
    best_epoch: int = 0
    best_val: float = float("inf")
    initial_val: float = float("nan")

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,split,loss\n")
            for e, s, l in self.trace:
                fh.write(f"{e},{s},{l!r}\n")


def _eval_loss(model, tensors, ts: TorchSchedule, stage: str, k_all, eps_all, batch: int) -> float:
    n = tensors["params"].shape[0]
    total = 0.0
    model.eval()
    with torch.no_grad():
        for s in range(0, n, batch):
            idx = torch.arange(s, min(s + batch, n))
            loss = diffusion_loss(model_fn_for(model, tensors, idx), tensors["x0"][idx], tensors["x0_calc"][idx],
                                  tensors["e"][idx], k_all[idx], eps_all[idx], ts, stage)
            total += float(loss) * len(idx)
    return total / n


def train_stage(stage: str, train_ds: SequenceDataset, val_ds: SequenceDataset, model: RSRPDenoiser,
                schedule: NoiseSchedule, cfg: TrainConfig, norms: Normalizers,
                max_epochs: Optional[int] = None, progress: Optional[Callable] = None) -> TrainResult:
    """Train one stage with early stopping on a fixed-noise validation loss.

    The returned model holds the best-validation weights. Epoch 0 in the trace
    is the validation loss before any update.
    """
    check_stage(stage, train_ds, model)
    check_stage(stage, val_ds, model)
    max_epochs = cfg.max_epochs(stage) if max_epochs is None else max_epochs
    ts = TorchSchedule(schedule)
    tr = stage_tensors(train_ds, norms, stage, model)
    va = stage_tensors(val_ds, norms, stage, model)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    vgen = torch.Generator().manual_seed(int(cfg.seed) + 1)
    n_val = va["params"].shape[0]
    k_val = torch.randint(1, schedule.K + 1, (n_val,), generator=vgen)
    eps_val = torch.randn(va["x0"].shape, generator=vgen)
    opt = make_optimizer(model, cfg.lr)

    result = TrainResult(model)
    v0 = _eval_loss(model, va, ts, stage, k_val, eps_val, cfg.batch_size)
    result.trace.append((0, "val", v0))
    result.initial_val = result.best_val = v0
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    n = tr["params"].shape[0]
    for epoch in range(1, max_epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        run, seen = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            bt, off = _augment(tr, idx, cfg, gen)
            every = torch.arange(len(idx))
            k = torch.randint(1, schedule.K + 1, (len(idx),), generator=gen)
            eps = torch.randn(bt["x0"].shape, generator=gen)
            fn = model_fn_for(model, bt, every, off)
            loss = diffusion_loss(fn, bt["x0"], bt["x0_calc"], bt["e"], k, eps, ts, stage)
            if not torch.isfinite(loss):
                with torch.no_grad():
                    model(bt["x0"], make_bundle(bt, every, k, off), check_finite=True)
                raise NonFiniteActivationError(f"{stage} loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            run += float(loss.detach()) * len(idx)
            seen += len(idx)
        result.trace.append((epoch, "train", run / seen))
        v = _eval_loss(model, va, ts, stage, k_val, eps_val, cfg.batch_size)
        result.trace.append((epoch, "val", v))
        if progress is not None:
            progress(stage, epoch, run / seen, v)
        if v < result.best_val:
            result.best_val, result.best_epoch = v, epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("%s: early stop at epoch %d (best %d)", stage, epoch, result.best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return result


def predict(model: RSRPDenoiser, ds: SequenceDataset, schedule: NoiseSchedule, norms: Normalizers,
            stage: str, seed: int, mode=SamplerMode.DETERMINISTIC, batch_size: int = 64,
            steps: Optional[int] = None) -> np.ndarray:
    """Sampled RSRP in dBm, shape (N, T). Batch b uses seed ``seed + b``.

    ``steps`` thins the reverse chain (see ``sample``); None runs all K steps.
    """
    ts = TorchSchedule(schedule)
    tensors = stage_tensors(ds, norms, stage, model, for_sampling=True)
    n = tensors["params"].shape[0]
    out = []
    model.eval()
    for b, s in enumerate(range(0, n, batch_size)):
        idx = torch.arange(s, min(s + batch_size, n))
        bt = {name: t[idx] for name, t in tensors.items()}
        if model.mfen is not None and "crops" in bt:
            # micro-map embeddings do not depend on the step, so encode them once per batch
            with torch.no_grad():
                bt["e_me"] = model.mfen(bt.pop("crops"), bt.pop("coords", None))
        every = torch.arange(len(idx))
        x0 = sample(model_fn_for(model, bt, every), bt["x0_calc"], bt["e"], ts, seed + b, mode, steps=steps)
        out.append(x0.double().numpy())
    return norms.target.denormalize(np.concatenate(out))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
