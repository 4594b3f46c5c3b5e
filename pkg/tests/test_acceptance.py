"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The verdicts are printed in the "acceptance criteria" section of the pytest
summary (see conftest.py) and also to stdout when run with ``-s``.
"""

import json
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from nightflow import appearance as ap
from nightflow import boundary as bd
from nightflow import evaluation as ev
from nightflow import flowcore as fc
from nightflow import gradcheck
from nightflow import synthdata as sd
from nightflow.benchmark import run_benchmark
from nightflow.evaluation import validate_report

from . import oracles
from .conftest import VERDICTS

ORACLE_SEEDS = range(100)


def verdict(n, ok, detail):
    VERDICTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = gradcheck.run_all(seed=0, size=8)
    seconds = time.perf_counter() - start
    w = gradcheck.worst(results)
    ok = all(r.passed(1e-4) for r in results) and seconds < 120
    verdict(1, ok, f"{len(results)} losses, worst {w.name} rel err {w.max_rel_err:.2e}, {seconds:.1f} s")


def _oracle_errors(seed):
    rng = np.random.default_rng(seed)
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    errs = {}
    a, b = rng.normal(size=(3, 5, 6)), rng.normal(size=(3, 5, 6))
    r = 1 + seed % 2
    errs["cost volume"] = np.abs(fc.cost_volume(t(a)[None], t(b)[None], radius=r)[0].numpy() - oracles.cost_volume(a, b, r)).max()
    img, flow = rng.random((6, 7)), rng.uniform(-3, 3, size=(6, 7, 2))
    errs["warp"] = np.abs(fc.warp(t(img)[None, None], t(flow).permute(2, 0, 1)[None])[0, 0].numpy() - oracles.warp(img, flow)).max()
    gt = rng.normal(scale=5, size=(5, 6, 2))
    pred = gt + rng.normal(scale=4, size=gt.shape)
    valid = rng.random((5, 6)) < 0.7
    valid[0, 0] = True
    errs["EPE"] = abs(ev.epe(pred, gt, valid) - oracles.epe(pred, gt, valid))
    errs["Fl-all"] = abs(ev.fl_all(pred, gt, valid) - oracles.fl_all(pred, gt, valid))
    u, v = rng.normal(size=(2, 2, 5, 5))
    got = bd.motion_consistency_loss(t(u)[None], t(v)[None], torch.as_tensor(valid[:5, :5])[None]).item()
    per_pixel = np.abs(u - v).sum(0)
    errs["masked L1"] = abs(got - oracles.masked_l1(per_pixel, np.zeros_like(per_pixel), valid[:5, :5]))
    p, q = rng.normal(scale=3, size=(2, 9, 4, 5))
    errs["KL"] = abs(ap.kl_cost_loss(t(p)[None], t(q)[None]).item() - oracles.kl_per_pixel_mean(p, q))
    values = rng.random(200)
    bins = 2 + seed % 19
    counts = bd.correlation_histogram(torch.as_tensor(values), bins)[1]
    errs["histogram"] = float(np.abs(np.asarray(counts) - oracles.histogram(values, bins)).max())
    return errs


def test_criterion_2_oracle_suite():
    worst = {}
    for seed in ORACLE_SEEDS:
        for name, e in _oracle_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), float(e))
    ok = all(e <= 1e-6 for e in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"{len(ORACLE_SEEDS)} seeds, max errors: {detail}")


def test_criterion_3_event_round_trip():
    worst, pixels = 0.0, 0
    for seed in range(50):
        s = sd.make_sample(seed)
        L = s.gt_illumination
        dlog = np.log(s.frame_t1 * L + sd.LOG_EPS) - np.log(s.frame_t * L + sd.LOG_EPS)
        err = np.abs(sd.accumulate_full(s.events) - dlog)
        worst = max(worst, err.max() / s.events.C)
        pixels += err.size
    verdict(3, worst <= 1 + 1e-9, f"{pixels} pixels over 50 sequences, max error {worst:.3f} C")


def test_criterion_4_event_frame_gradient_equivalence():
    cfg = sd.SampleConfig(motion=sd.MotionSpec(max_disp=2.0), noise=sd.NoiseSpec(0.0))
    errs = []
    for seed in range(20):
        s = sd.make_sample(seed, cfg)
        dL = sd.accumulate_full(s.events)
        g = bd.image_st_gradient(s.frame_t * s.gt_illumination, s.gt_flow)[0, 0].numpy()
        errs.append(np.abs(dL - g).mean())
    bound = cfg.C + 0.05
    verdict(4, max(errs) <= bound, f"max over 20 pairs of mean |dL_ev - (-grad log I . U)| = {max(errs):.3f} (bound {bound:.2f})")


@pytest.mark.slow
def test_criterion_5_adaptation_benchmark(tmp_path_factory):
    torch.set_num_threads(1)
    result = run_benchmark(tmp_path_factory.mktemp("bench"), n=200, seed=0)
    print(result.summary())
    failed = [k for k, ok in result.checks().items() if not ok]
    detail = (
        f"night EPE {result.epe_stage1_on_night:.4f} -> {result.epe_stage2:.4f} -> {result.epe_stage3:.4f}"
        f" (stage2 gain {result.stage2_gain:.1%}), boundary EPE {result.boundary_epe_stage2:.4f} -> "
        f"{result.boundary_epe_stage3:.4f}, {result.seconds:.0f} s" + (f"; failed: {failed}" if failed else "")
    )
    verdict(5, result.passed(), detail)


def test_criterion_6_kl_properties():
    rng = np.random.default_rng(0)
    min_kl, max_same, max_shift = np.inf, 0.0, 0.0
    for _ in range(1000):
        scale = rng.uniform(0.01, 20)
        cv = [torch.as_tensor(rng.normal(scale=scale, size=(1, 9, 3, 3))) for _ in range(4)]
        shift = rng.uniform(-50, 50)
        kl = ap.kl_cost_loss(cv[0], cv[1]).item()
        inter = ap.inter_align_loss(*cv).item()
        min_kl = min(min_kl, kl, inter)
        max_same = max(max_same, ap.kl_cost_loss(cv[0], cv[0].clone()).item(), ap.inter_align_loss(cv[0], cv[1], cv[0], cv[1]).item())
        dist = ap.softmax_dist(cv[0])
        max_shift = max(max_shift, (ap.softmax_dist(cv[0] + shift) - dist).abs().max().item())
    ok = min_kl >= 0 and max_same <= 1e-7 and max_shift <= 1e-7
    verdict(6, ok, f"1000 instances: min KL {min_kl:.2e}, max KL on identical {max_same:.1e}, softmax shift drift {max_shift:.1e}")


def _cli():
    exe = shutil.which("nightflow")
    return [exe] if exe else [sys.executable, "-m", "nightflow.cli"]


def _run(*args):
    return subprocess.run([*_cli(), *map(str, args)], capture_output=True, text=True)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train 1..3 -> eval -> viz on 20 samples with default settings, timed."""
    root = tmp_path_factory.mktemp("pipeline")
    data, run = root / "data", root / "run"
    start = time.perf_counter()
    steps = [("synth", "--samples", 20, "--seed", 0, "--out", data)]
    steps += [("train", "--stage", s, "--data", data, "--out", run, "--seed", 0) for s in (1, 2, 3)]
    steps += [
        ("eval", "--data", data, "--checkpoint", run / "stage3.npz", "--split", "test", "--out", root / "eval"),
        ("viz", "--data", data, "--checkpoint", run / "stage3.npz", "--out", root / "viz"),
    ]
    codes = [(step[0], _run(*step)) for step in steps]
    return root, codes, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_8_cli_pipeline(pipeline):
    root, codes, seconds = pipeline
    bad = [(name, p.returncode, p.stderr[-300:]) for name, p in codes if p.returncode != 0]
    report = root / "eval" / "report.json"
    schema_ok = False
    if report.exists():
        validate_report(json.loads(report.read_text()))
        schema_ok = True
    ok = not bad and schema_ok and seconds < 600
    verdict(8, ok, f"{len(codes)} commands, exit codes {[p.returncode for _, p in codes]}, {seconds:.0f} s" + (f"; {bad}" if bad else ""))


@pytest.mark.slow
def test_criterion_7_determinism(pipeline, tmp_path):
    root, _, _ = pipeline
    for s in (1, 2, 3):
        assert _run("train", "--stage", s, "--data", root / "data", "--out", tmp_path, "--seed", 0).returncode == 0
    same = [(root / "run" / f"stage{s}_report.json").read_bytes() == (tmp_path / f"stage{s}_report.json").read_bytes() for s in (1, 2, 3)]
    verdict(7, all(same), f"bitwise-equal stage reports across two runs: {same}")
