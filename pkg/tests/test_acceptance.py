"""Acceptance criteria 1-11, one test each; every test records a PASS/FAIL line."""

import dataclasses
import json
import math
import time
import warnings

import numpy as np
import pytest
import torch

from conftest import box, record, scene_of
from test_diffusion import LD, oracle_fn, ulps
from test_multipath import brute_force_length, random_case
from test_occlusion import scalar_e_of

from rsrpdiff.cli import main as cli_main
from rsrpdiff.dataset import SynthConfig, generate_dataset, split_indices
from rsrpdiff.diffusion import (SamplerMode, TorchSchedule, delta_target, diffusion_loss, make_schedule, recover_eps,
                                sample)
from rsrpdiff.experiment import stage_seed
from rsrpdiff.geometry import fresnel_radius, points_in_polygon
from rsrpdiff.metrics import cdf_report, jsd, mae, nrmse, performance_density, rank_models
from rsrpdiff.multipath import build_embedding, find_paths
from rsrpdiff.neural import (MFEN, TOY_CONFIG, Attention, ConditionBundle, DenoiserBlock, DenoiserConfig, FinalLayer,
                             RSRPDenoiser, build_model, grad_check)
from rsrpdiff.occlusion import knife_edge_loss, occlusion_factor
from rsrpdiff.propagation import path_loss
from rsrpdiff.training import Normalizers, TrainConfig, predict, train_stage

TEACHER_CONFIG = dataclasses.replace(TOY_CONFIG, use_e_re=False, use_e_of=False, use_mfen=False)
TOY_TRAIN = dict(lr=1e-3, batch_size=48, min_window=16, max_pos_shift=64)
N8, STUDENT_EPOCHS_8 = 400, 20


def check(n, conditions: dict, detail: str):
    ok = all(conditions.values())
    failed = [k for k, v in conditions.items() if not v]
    record(n, ok, detail + (f"  failed: {failed}" if failed else ""))
    assert ok, failed


def test_criterion_01_formula_exactness():
    t0 = time.perf_counter()
    ld0 = knife_edge_loss(0.0)
    r = fresnel_radius(0.1, 100.0, 100.0)
    fs = path_loss("FSPM", 1000.0, 1e9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        hata = path_loss("HATA_URBAN", 1000.0, 900e6, 50.0, 1.5)
    dt = time.perf_counter() - t0
    check(1, {
        "L_d(0)": abs(ld0 - 6.033) <= 1e-3,
        "L_d(v<=-0.7)": all(knife_edge_loss(v) == 0.0 for v in (-0.7, -1.0, -5.0)),
        "fresnel": abs(r - math.sqrt(5)) <= 1e-9,
        "fspm": abs(fs - 92.45) <= 0.01,
        "hata": abs(hata - 123.33) <= 0.05,
        "runtime": dt < 1.0,
    }, f"L_d(0)={ld0:.4f} r_F1={r:.10f} FSPM={fs:.3f} Hata={hata:.3f} ({dt * 1e3:.1f} ms)")


def test_criterion_02_image_method_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(12345)
    empty = scene_of()
    worst_rel = worst_angle = worst_recip = 0.0
    found = misses = 0
    for _ in range(500):
        f, bs, ue = random_case(rng)
        paths = [p for p in find_paths(empty, bs, ue, include_ground=False, facades=[f]) if p.order == 1]
        ref, pt = brute_force_length(f, bs, ue)
        if not paths:
            s = np.dot(pt[:2] - f.a, f.b - f.a) / f.width ** 2
            on_edge = min(s, 1 - s) < 0.02 or min(pt[2] - f.z0, f.z1 - pt[2]) < 0.02 * (f.z1 - f.z0)
            misses += not on_edge
            continue
        found += 1
        p = paths[0]
        worst_rel = max(worst_rel, abs(p.d_ref - ref) / ref)
        back = [q for q in find_paths(empty, ue, bs, include_ground=False, facades=[f]) if q.order == 1]
        worst_recip = max(worst_recip, abs(back[0].d_ref - p.d_ref) / p.d_ref if back else 1.0)
        l0, l1 = p.legs
        n = f.normal
        worst_angle = max(worst_angle, abs(abs(l0 @ n) / np.linalg.norm(l0) - abs(l1 @ n) / np.linalg.norm(l1)))
    dt = time.perf_counter() - t0
    check(2, {
        "length": worst_rel <= 1e-3,
        "reciprocity": worst_recip <= 1e-12,
        "angle law": worst_angle <= 1e-9,
        "no missed specular points": misses == 0,
        "coverage": found >= 200,
        "runtime": dt < 60,
    }, f"{found}/500 scenes with a specular path, max rel err {worst_rel:.2e}, max angle err {worst_angle:.1e} ({dt:.1f} s)")


def test_criterion_03_occlusion_properties():
    t0 = time.perf_counter()
    ue_line = np.column_stack([np.linspace(10, 400, 40), np.zeros(40), np.full(40, 1.5)])
    open_ok = bool(np.all(occlusion_factor(scene_of(), (0, 0, 30), ue_line, 2e9).e_of == 1.0))
    bs, ue, f_c = (0.0, 0.0, 25.0), np.array([[150.0, 3.0, 1.5]]), 1.8e9
    series, worst = [], 0.0
    for h in np.linspace(0.0, 60.0, 50):
        scene = scene_of(box(0, 100, -10, 110, 10, float(h)))
        e = occlusion_factor(scene, bs, ue, f_c).e_of[0]
        worst = max(worst, abs(e - scalar_e_of(scene, bs, ue[0], f_c)))
        series.append(e)
    dt = time.perf_counter() - t0
    check(3, {
        "open scene": open_ok,
        "monotone": bool(np.all(np.diff(series) <= 0)),
        "oracle": worst <= 1e-12,
        "runtime": dt < 10,
    }, f"e_OF {series[0]:.3f} -> {series[-1]:.3f} over 50 heights, oracle diff {worst:.1e} ({dt:.2f} s)")


def test_criterion_04_embedding_contract():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    bad_shape = bad_sort = bad_pad = bad_los = 0
    scenes = 0
    while scenes < 1000:
        bs = [box(i, *sorted(rng.uniform(-60, 60, 2)), *sorted(rng.uniform(-60, 60, 2)), float(rng.uniform(5, 40)))
              for i in range(rng.integers(0, 4))]
        bs = [b for b in bs if b.area > 1.0]
        p0 = np.array([*rng.uniform(-80, 80, 2), rng.uniform(10, 40)])
        p1 = np.array([*rng.uniform(-80, 80, 2), 1.5])
        if any(points_in_polygon(np.array([p[:2]]), b.footprint)[0] for b in bs for p in (p0, p1)):
            continue
        scenes += 1
        paths = find_paths(scene_of(*bs), p0, p1)
        emb = build_embedding(paths, 1, 4)
        bad_shape += emb.shape != (5, 5)
        refl = emb[1:]
        used = np.any(refl != 0, axis=1)
        k = int(used.sum())
        bad_pad += not (np.all(used[:k]) and not np.any(used[k:]))
        keys = [(r[1], r[0]) for r in refl[:k]]
        bad_sort += keys != sorted(keys)
        bad_los += (not any(p.order == 0 for p in paths)) and bool(np.any(emb[0]))
    dt = time.perf_counter() - t0
    check(4, {"shape": bad_shape == 0, "sorted": bad_sort == 0, "padding": bad_pad == 0, "los row": bad_los == 0,
              "runtime": dt < 30},
          f"1000 scenes: shape/sort/pad/LOS violations {bad_shape}/{bad_sort}/{bad_pad}/{bad_los} ({dt:.1f} s)")


def test_criterion_05_diffusion_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    n = 100_000
    s = make_schedule(400)
    k = rng.integers(1, 401, n)
    x0, xc, eps = rng.normal(size=(3, n)) * np.array([[3.0], [3.0], [1.0]])
    e = rng.uniform(0, 1, n)
    a, b = s.alpha_ext[k], s.b_ext[k]
    from rsrpdiff.diffusion import forward_noise, prior_noise  # noqa: F401 (scalar API checked in unit tests)
    xk = np.sqrt(a) * x0 + b * eps
    prior = np.sqrt(a) * xc / (1 - a)
    sa = np.sqrt(a.astype(LD))
    u_fwd = ulps(xk, sa * x0.astype(LD) + b.astype(LD) * eps.astype(LD), np.maximum(np.abs(np.sqrt(a) * x0), np.abs(b * eps))).max()
    u_pri = ulps(prior, sa * xc.astype(LD) / (LD(1) - a.astype(LD)), prior).max()
    d = delta_target(eps, e, prior)
    scale = np.maximum(np.abs(eps), np.abs((1 - e) * prior))
    u_del = ulps(d, eps.astype(LD) + (LD(1) - e.astype(LD)) * prior.astype(LD), scale).max()
    u_rt = ulps(recover_eps(d, e, prior), eps.astype(LD), np.maximum(scale, np.abs(d))).max()

    ts = TorchSchedule(s, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    X0 = torch.randn(4, 64, generator=g, dtype=torch.float64)
    XC = X0 + 0.3 * torch.randn(4, 64, generator=g, dtype=torch.float64)
    E = torch.rand(4, 64, generator=g, dtype=torch.float64)
    chain_err = float((sample(oracle_fn(X0, XC, E, ts), XC, E, ts, 1, SamplerMode.DETERMINISTIC) - X0).abs().max())

    model = build_model(TOY_CONFIG, 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "premap.e_" not in name:
                p.add_(0.05 * torch.randn_like(p))
    ts32 = TorchSchedule(make_schedule(50))
    B, T = 3, 16
    params = torch.randn(B, T, 10, generator=g)
    calc = torch.randn(B, T, generator=g)
    ones = torch.ones(B, T)
    extras = dict(e_re=torch.randn(B, T, 25, generator=g), e_of=ones, crops=torch.randn(B, T, 2, 5, 5, generator=g))
    student = lambda x, kk: model(x, ConditionBundle(params, kk, **extras))
    teacher = lambda x, kk: model(x, ConditionBundle(params, kk))
    bit_sample = torch.equal(sample(student, calc, ones, ts32, 4), sample(teacher, calc, ones, ts32, 4))
    kk = torch.randint(1, 51, (B,), generator=g)
    ep = torch.randn(B, T, generator=g)
    bit_loss = torch.equal(diffusion_loss(student, calc, calc, ones, kk, ep, ts32, "student"),
                           diffusion_loss(teacher, calc, calc, ones, kk, ep, ts32, "student"))
    dt = time.perf_counter() - t0
    check(5, {
        "forward <= 4 ulp": u_fwd <= 4, "prior <= 4 ulp": u_pri <= 4, "delta <= 4 ulp": u_del <= 4,
        "round trip <= 4 ulp": u_rt <= 4, "oracle chain": chain_err < 1e-6,
        "e_OF=1 sampling bit-match": bit_sample, "e_OF=1 loss bit-match": bit_loss, "runtime": dt < 30,
    }, f"max ulp fwd/prior/delta/rt {float(u_fwd):.2f}/{float(u_pri):.2f}/{float(u_del):.2f}/{float(u_rt):.2f}, "
       f"chain err {chain_err:.1e} ({dt:.1f} s)")


def _randomize(module, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)


def test_criterion_06_gradient_checks():
    t0 = time.perf_counter()
    H = 16
    cfg = DenoiserConfig(hidden_size=H, attention_heads=4, blocks=1, condition_channels=8, pe_dim=8,
                         mfen=TOY_CONFIG.mfen)
    worst_block, worst_full = {}, 0.0
    for seed in range(5):
        torch.manual_seed(seed)
        g = torch.Generator().manual_seed(1000 + seed)
        w = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
        c = w(2, 5, 8)
        blocks = {
            "linear": (torch.nn.Linear(H, 3), lambda b: (lambda z: (b(z) ** 2).sum()), (2, 5, H)),
            "attention": (Attention(H, 4), lambda b: (lambda z: (b(z) ** 2).sum()), (2, 5, H)),
            "denoiser block": (DenoiserBlock(cfg), lambda b: (lambda z: (b(z, c) ** 2).sum()), (2, 5, H)),
            "final layer": (FinalLayer(cfg), lambda b: (lambda z: (b(z, c) ** 2).sum()), (2, 5, H)),
            "mfen": (MFEN(TOY_CONFIG.mfen), lambda b: (lambda z: (b(z) ** 2).sum()), (1, 2, 2, 5, 5)),
        }
        for name, (blk, make_fn, shape) in blocks.items():
            blk = blk.double()
            _randomize(blk, seed)
            err = grad_check(make_fn(blk), w(*shape), seed=seed)
            worst_block[name] = max(worst_block.get(name, 0.0), err)
        # premap convolutions, through the condition input
        pm_model = RSRPDenoiser(TOY_CONFIG).double()
        _randomize(pm_model, seed)
        T = 8
        bundle = lambda p: ConditionBundle(p, torch.tensor([3, 17]), e_re=w(2, T, 25), e_of=torch.rand(2, T, generator=g, dtype=torch.float64),
                                           crops=w(2, T, 2, 5, 5), coords=w(2, T, 2, 5, 5))
        fixed = bundle(w(2, T, 10))
        x = w(2, T)
        err = grad_check(lambda z: (pm_model.premap(dataclasses.replace(fixed, network_params=z)) ** 2).sum(), fixed.network_params, seed=seed)
        worst_block["premap"] = max(worst_block.get("premap", 0.0), err)
        worst_full = max(worst_full, grad_check(lambda z: (pm_model(z, fixed) ** 2).sum(), x, seed=seed))
    dt = time.perf_counter() - t0
    cond = {f"{k} < 1e-4": v < 1e-4 for k, v in worst_block.items()}
    cond["full model < 1e-3"] = worst_full < 1e-3
    cond["runtime"] = dt < 120
    check(6, cond, "worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst_block.items())
          + f", full {worst_full:.1e} ({dt:.1f} s)")


@pytest.fixture(scope="module")
def teacher_run():
    """Criterion 7 setup: 2000 teacher-only sequences (T=64), toy model, 50 epochs."""
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    ds = generate_dataset(None, SynthConfig(n_samples=2000, T=64, full=False), seed=2024)
    tr, va, te = split_indices(len(ds), (0.8, 0.1, 0.1), seed=0)
    train, val, test = ds.subset(tr), ds.subset(va), ds.subset(te)
    t_data = time.perf_counter() - t0
    norms = Normalizers.fit(train)
    schedule = make_schedule(400)
    model = build_model(TEACHER_CONFIG, 0)
    res = train_stage("teacher", train, val, model, schedule, TrainConfig(seed=1, **TOY_TRAIN), norms, max_epochs=50)
    t_train = time.perf_counter() - t0 - t_data
    return dict(model=model, norms=norms, schedule=schedule, test=test, result=res, t_data=t_data, t_train=t_train)


@pytest.mark.slow
def test_criterion_07_teacher_convergence(teacher_run):
    t0 = time.perf_counter()
    test = teacher_run["test"]
    pred = predict(teacher_run["model"], test, teacher_run["schedule"], teacher_run["norms"], "teacher", seed=0)
    score = nrmse(test.rsrp_calc, pred)
    res = teacher_run["result"]
    total = teacher_run["t_data"] + teacher_run["t_train"] + time.perf_counter() - t0
    check(7, {"nrmse < 0.05": score < 0.05, "runtime < 30 min": total < 1800},
          f"held-out NRMSE {score:.4f} on {len(test)} sequences, best epoch {res.best_epoch}/50, "
          f"total {total / 60:.1f} min on {torch.get_num_threads()} thread(s)")


@pytest.mark.slow
def test_criterion_09_length_insensitivity(teacher_run):
    scores = {}
    for T in (32, 64, 96):
        ds = generate_dataset(None, SynthConfig(n_samples=100, T=T, full=False), seed=77)
        pred = predict(teacher_run["model"], ds, teacher_run["schedule"], teacher_run["norms"], "teacher", seed=0)
        scores[T] = nrmse(ds.rsrp_calc, pred)
    vals = np.array(list(scores.values()))
    spread = (vals.max() - vals.min()) / vals.mean()
    check(9, {"spread < 20%": spread < 0.2},
          "NRMSE " + ", ".join(f"T={T}: {v:.4f}" for T, v in scores.items()) + f", relative spread {spread:.1%}")


def test_criterion_10_metrics_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    p, q = rng.normal(-90, 6, 400), rng.normal(-85, 9, 300)
    rows = [dict(name="a", jsd=0.1, nrmse=0.1, mae=1.0), dict(name="b", jsd=0.2, nrmse=0.2, mae=2.0),
            dict(name="c", jsd=0.3, nrmse=0.3, mae=3.0)]
    best = rank_models(rows).rows
    tie = {r.name: r.r_avg for r in rank_models([dict(name="x", jsd=0.1, nrmse=0.2, mae=1.0),
                                                 dict(name="y", jsd=0.1, nrmse=0.3, mae=2.0)]).rows}
    dt = time.perf_counter() - t0
    check(10, {
        "jsd zero": jsd(p, p) <= 1e-12,
        "jsd symmetry": abs(jsd(p, q) - jsd(q, p)) <= 1e-12,
        "jsd ln2": abs(jsd(np.zeros(20), np.full(20, 50.0)) - math.log(2)) <= 1e-9,
        "nrmse": abs(nrmse([-80, -90], [-82, -86]) - 0.31623) <= 1e-5,
        "mae": mae([-80, -90], [-82, -86]) == 3.0,
        "r_avg min/max": best[0].r_avg == 3 and best[-1].r_avg == 9,
        "r_avg ties": tie == {"x": 3, "y": 5},
        "m_ef": abs(performance_density(0.2, 1e5) - 1.0) <= 1e-12,
        "cdf": cdf_report(np.zeros(5)).fraction_below == 1.0 and cdf_report([5, 10]).fraction_below == 0.5,
        "runtime": dt < 1.0,
    }, f"all metric hand cases ({dt * 1e3:.0f} ms)")


@pytest.mark.slow
def test_criterion_11_determinism(tmp_path):
    conf = tmp_path / "exp.json"
    conf.write_text(json.dumps({"root_seed": 7}))
    blobs = []
    t0 = time.perf_counter()
    for run in ("a", "b"):
        assert cli_main(["experiment", "--config", str(conf), "--threads", "1", "-o", str(tmp_path / run)]) == 0
        blobs.append((tmp_path / run / "report.json").read_bytes())
    dt = time.perf_counter() - t0
    report = json.loads(blobs[0])
    finite = all(math.isfinite(v) for v in report["metrics"]["two_stage"].values())
    check(11, {"byte-identical": blobs[0] == blobs[1], "finite metrics": finite},
          f"report.json {len(blobs[0])} bytes, identical={blobs[0] == blobs[1]} ({dt:.0f} s for two runs)")


@pytest.mark.slow
def test_criterion_08_two_stage_benefit():
    """Teacher-initialized vs from-scratch student over 5 seeds on the full synthetic dataset."""
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    ds = generate_dataset(None, SynthConfig(n_samples=N8, T=32), seed=8)
    schedule = make_schedule(400)
    wins, lower_init, lines = 0, 0, []
    for seed in range(5):
        tr, va, te = split_indices(len(ds), (0.7, 0.1, 0.2), seed=stage_seed(seed, 1))
        train, val, test = ds.subset(tr), ds.subset(va), ds.subset(te)
        norms = Normalizers.fit(train)
        out = {}
        for tag, teacher_epochs in (("two", 50), ("scratch", 0)):
            model = build_model(TOY_CONFIG, stage_seed(seed, 2))
            cfg = TrainConfig(lr=1e-3, seed=stage_seed(seed, 3), batch_size=32, patience=100,
                              min_window=16, max_pos_shift=32)
            if teacher_epochs:
                train_stage("teacher", train, val, model, schedule, cfg, norms, max_epochs=teacher_epochs)
            res = train_stage("student", train, val, model, schedule, dataclasses.replace(cfg, seed=stage_seed(seed, 4)),
                              norms, max_epochs=STUDENT_EPOCHS_8)
            pred = predict(model, test, schedule, norms, "student", seed=0)
            out[tag] = (res.initial_val, mae(test.rsrp_real, pred))
        wins += out["two"][1] < out["scratch"][1]
        lower_init += out["two"][0] < out["scratch"][0]
        lines.append(f"s{seed} MAE {out['two'][1]:.2f}/{out['scratch'][1]:.2f} init {out['two'][0]:.3f}/{out['scratch'][0]:.3f}")
    dt = time.perf_counter() - t0
    check(8, {"MAE wins >= 4/5": wins >= 4, "initial loss lower in every seed": lower_init == 5, "runtime < 4 h": dt < 4 * 3600},
          f"two-stage wins {wins}/5, lower initial loss {lower_init}/5 [" + "; ".join(lines) + f"] ({dt / 60:.1f} min)")
