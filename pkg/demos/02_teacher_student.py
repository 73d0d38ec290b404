"""Teacher then student training on a small synthetic dataset.

The teacher learns to denoise toward the propagation-model RSRP; the student
starts from those weights and fits the synthetic multipath RSRP with the full
condition set. Runs in a few minutes on one CPU core.

    python3 demos/02_teacher_student.py
"""

import dataclasses
import warnings

import numpy as np
import torch

from rsrpdiff.dataset import CityConfig, SynthConfig, generate_dataset, split_indices
from rsrpdiff.diffusion import SamplerMode, make_schedule
from rsrpdiff.metrics import MetricReport
from rsrpdiff.neural import TOY_CONFIG, build_model
from rsrpdiff.training import Normalizers, TrainConfig, predict, train_stage

warnings.simplefilter("ignore")
torch.set_num_threads(1)

ds = generate_dataset(None, SynthConfig(n_samples=200, T=32, city=CityConfig(n_blocks=4)), seed=0)
tr, va, te = split_indices(len(ds), (0.7, 0.1, 0.2), seed=0)
train, val, test = ds.subset(tr), ds.subset(va), ds.subset(te)
norms = Normalizers.fit(train)
schedule = make_schedule(100)
cfg = TrainConfig(batch_size=16, lr=1e-3, seed=0, min_window=16, max_pos_shift=16)

model = build_model(TOY_CONFIG, seed=0)
show = lambda stage, e, a, b: print(f"  {stage} epoch {e:2d}  train {a:.4f}  val {b:.4f}")
print("teacher stage (target: RSRP_calc)")
train_stage("teacher", train, val, model, schedule, cfg, norms, max_epochs=30, progress=show)
print("student stage (target: synthetic RSRP)")
res = train_stage("student", train, val, model, schedule, cfg, norms, max_epochs=30, progress=show)
print(f"student initial val loss {res.initial_val:.4f}, best {res.best_val:.4f} at epoch {res.best_epoch}")

full = predict(model, test, schedule, norms, "student", seed=0)
# a thinned stochastic chain is less prone to drift over the low-noise steps
thin = predict(model, test, schedule, norms, "student", seed=0, mode=SamplerMode.STOCHASTIC, steps=20)
for name, yhat in (("full chain", full), ("20 steps", thin), ("RSRP_calc", test.rsrp_calc)):
    r = MetricReport.evaluate(test.rsrp_real, yhat)
    print(f"{name:>10}: JSD {r.jsd:.3f}  NRMSE {r.nrmse:.3f}  MAE {r.mae:.2f} dB")
