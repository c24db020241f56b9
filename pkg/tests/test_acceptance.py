"""Acceptance criteria, one test each, printing a PASS/FAIL line per criterion.

The toy pipeline (gen-data, pretrain, tune, ablate) runs once per session
through the ``eagle`` command in a scratch directory; the directional checks
read its report files.
"""

import math
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from eagle import checkpoint as ck
from eagle import data as dt
from eagle import evaluation as ev
from eagle import galore as G
from eagle import grounding as gr
from eagle import losses as L
from eagle import train
from eagle.config import load_config
from eagle.numeric import RngStream

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ENV = {**os.environ, "EAGLE_THREADS": "1"}


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}")
    assert ok, detail


def eagle(*args, cwd):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "eagle.cli", *args], cwd=cwd, env=ENV,
                          capture_output=True, text=True)
    if proc.returncode not in (0, 1):
        raise RuntimeError(f"eagle {' '.join(args)} exited {proc.returncode}:\n{proc.stderr}")
    return proc, time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Run the desk-scale pipeline once; returns the working directory and stage timings."""
    work = tmp_path_factory.mktemp("toy")
    shutil.copy(CONFIGS / "toy.cfg", work / "toy.cfg")
    timings = {}
    for stage in ("gen-data", "pretrain", "tune"):
        _, timings[stage] = eagle(stage, "--config", "toy.cfg", cwd=work)
    _, timings["ablate"] = eagle("ablate", "--config", "toy.cfg", cwd=work)
    return work, timings


def test_criterion_1_gradient_fidelity(capsys):
    proc, seconds = eagle("check-grad", "--config", str(CONFIGS / "tiny.cfg"), cwd=CONFIGS)
    summary = proc.stdout.strip().splitlines()[-1]
    ok = proc.returncode == 0 and summary.endswith("PASS") and seconds < 60
    verdict(capsys, 1, "gradient fidelity", ok, f"{summary} (wall {seconds:.1f}s)")


def loop_pool(raw, selected):
    total, count = np.zeros(raw.shape[1]), 0
    for i in range(raw.shape[0]):
        total += raw[i] if selected[i] else 0.0 * raw[i]
        count += bool(selected[i])
    return total / count


def test_criterion_2_pooling_oracle(capsys):
    gen = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        raw = gen.standard_normal((16, 64))
        sel = gen.random(16) < gen.random()
        if not sel.any():
            sel[gen.integers(16)] = True
        got = gr.pool_raw(torch.from_numpy(raw)[None], torch.from_numpy(sel)[None])[0].numpy()
        worst = max(worst, float(np.abs(got - loop_pool(raw, sel)).max()))
    raw = torch.from_numpy(gen.standard_normal((1, 16, 64)))
    exact = all(torch.equal(gr.pool_raw(raw, torch.arange(16)[None] == i)[0], raw[0, i]) for i in range(16))
    verdict(capsys, 2, "pooling oracle", worst < 1e-12 and exact,
            f"max |pool - loop| = {worst:.2e} over 1000 pairs; single-patch exact = {exact}")


def test_criterion_3_galore_equivalence(capsys):
    hyper = G.AdamWConfig(weight_decay=0.0, scale=1.0, rank=6, refresh_period=1)
    gap, ortho = 0.0, 0.0
    for trial in range(5):
        g = torch.Generator().manual_seed(trial)
        w0 = torch.randn(8, 6, generator=g, dtype=torch.float64)
        full, proj = {"w": w0.clone()}, {"w": w0.clone()}
        sched = G.Schedule(1e-2, 0, 10, "constant")
        opt_full = G.GaLoreAdamW(full, {"w": "adamw"}, sched, hyper)
        opt_proj = G.GaLoreAdamW(proj, {"w": "galore"}, sched, hyper)
        for _ in range(10):
            grad = torch.randn(8, 6, generator=g, dtype=torch.float64)
            opt_full.step(full, {"w": grad})
            opt_proj.step(proj, {"w": grad})
            p = opt_proj.state["w"].projection
            ortho = max(ortho, float((p.T @ p - torch.eye(6, dtype=torch.float64)).abs().max()))
            gap = max(gap, float((full["w"] - proj["w"]).abs().max()))
    verdict(capsys, 3, "GaLore equivalence", gap < 1e-8 and ortho < 1e-8,
            f"max |W_galore - W_adamw| = {gap:.3e} (need < 1e-8); max |PᵀP - I| = {ortho:.2e}")


def test_criterion_4_loss_closed_forms(capsys):
    checks = {}
    for K in (2, 8):
        txt = torch.nn.functional.normalize(torch.randn(K, 5, dtype=torch.float64), dim=1)
        pooled = torch.zeros(1, 5, dtype=torch.float64)
        checks[f"L_ins equal logits K={K}"] = abs(float(L.instance_contrastive_loss(pooled, txt, [0], 0.0))
                                                  - math.log(K)) < 1e-12
    half = torch.full((1, 4), 0.5, dtype=torch.float64)
    checks["L_ce at s=0.5"] = abs(float(L.multiclass_bce_loss(half, [1])) - math.log(2)) < 1e-12
    pooled = torch.nn.functional.normalize(torch.randn(3, 4, dtype=torch.float64), dim=1)
    txt = torch.nn.functional.normalize(torch.randn(3, 4, dtype=torch.float64), dim=1)
    b = L.total_loss(pooled, [0, 1, 2], txt, math.log(10.0))
    checks["total exact sum"] = float(b.total) == float(b.l_ins) + float(b.l_ce)
    hand = float(L.multiclass_bce_loss(torch.tensor([[0.9, 0.2, 0.1]], dtype=torch.float64), [0]))
    checks["BCE hand value"] = abs(hand - 0.1446) < 1e-4
    failed = [k for k, ok in checks.items() if not ok]
    verdict(capsys, 4, "loss closed forms", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} hold; BCE fixture {hand:.5f}" + (f"; failed {failed}" if failed else ""))


def test_criterion_5_resampler_uniformity(capsys):
    man = dt.generate(dt.DataConfig(n_images=600, zipf=1.0), RngStream(5))
    raw = np.bincount([c for e in man.entries.values() for _, c in e.masks], minlength=8)
    draws = dt.BalancedSampler(man, RngStream(55)).take(100_000)
    counts = np.bincount([man.entries[i].masks[k][1] for i, k in draws], minlength=8)
    ratio = counts.max() / counts.min()
    chi2 = float(((counts - 1e5 / 8) ** 2 / (1e5 / 8)).sum())
    crit = float(stats.chi2.ppf(0.999, 7))
    verdict(capsys, 5, "resampler uniformity", ratio < 1.1 and chi2 < crit,
            f"corpus mask ratio {raw.max() / raw.min():.1f}; draws max/min {ratio:.3f}, chi2 {chi2:.2f} < {crit:.2f}")


def test_criterion_6_determinism(toy, capsys):
    work, _ = toy
    eagle("tune", "--config", "toy.cfg", "--out", "runs/toy/tune_again", cwd=work)
    first = work / "runs/toy/tune"
    again = work / "runs/toy/tune_again"
    same_csv = (first / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()

    # a run that crashed at step 170, after writing the step-150 checkpoint
    crashed = work / "runs/toy/tune_resumed"
    crashed.mkdir()
    shutil.copy(first / "step_000150.ckpt", crashed)
    rows = (first / "metrics.csv").read_text().splitlines(keepends=True)
    (crashed / "metrics.csv").write_text("".join(rows[: 1 + 170]))
    eagle("tune", "--config", "toy.cfg", "--out", str(crashed), "--resume", str(crashed / "step_000150.ckpt"),
          cwd=work)
    same_resume = all((first / f).read_bytes() == (crashed / f).read_bytes() for f in ("metrics.csv", "final.ckpt"))
    verdict(capsys, 6, "determinism", same_csv and same_resume,
            f"repeat run CSV identical = {same_csv}; resume from step 150 identical (CSV and weights) = {same_resume}")


def test_criterion_7_checkpoint_roundtrip(toy, tmp_path, capsys):
    work, _ = toy
    cfg = load_config(work / "toy.cfg")
    man = dt.load(work / cfg.data_root)
    ok = True
    for src in (work / cfg.pretrain_checkpoint, work / "runs/toy/tune/step_000150.ckpt"):
        params, opt, rng = ck.load_checkpoint(src)
        ck.save_checkpoint(tmp_path / src.name, params, opt, rng)
        ok &= (tmp_path / src.name).read_bytes() == src.read_bytes()
    a = ev.evaluate(train.load_model(cfg, work / cfg.pretrain_checkpoint, man.class_names), man)
    b = ev.evaluate(train.load_model(cfg, tmp_path / Path(cfg.pretrain_checkpoint).name, man.class_names), man)
    verdict(capsys, 7, "checkpoint round-trip", ok and a == b,
            f"save/load/save bytes identical = {ok}; eval identical = {a == b}")


def test_criterion_8_directional_accuracy(toy, capsys):
    work, timings = toy
    r = ev.read_report(work / "runs/toy/tune/final.report")
    seq_gain = 100 * (r["seq_acc"] - r["before_seq_acc"])
    cls_drop = 100 * (r["before_cls_acc"] - r["cls_acc"])
    runtime = timings["gen-data"] + timings["pretrain"] + timings["tune"]
    ok = seq_gain >= 10 and cls_drop <= 5 and runtime < 600
    verdict(capsys, 8, "seq up, CLS kept", ok,
            f"seq {r['before_seq_acc']:.4f} -> {r['seq_acc']:.4f} ({seq_gain:+.2f} pts, need >= +10); "
            f"CLS {r['before_cls_acc']:.4f} -> {r['cls_acc']:.4f} (-{cls_drop:.2f} pts, need <= 5); "
            f"pipeline {runtime:.0f}s")


def test_criterion_9_false_positives_and_ablation_order(toy, capsys):
    work, _ = toy
    r = ev.read_report(work / "runs/toy/tune/final.report")
    cells = {p.stem[len("ablate_"):]: ev.read_report(p) for p in (work / "runs/toy/ablate").glob("ablate_*.report")}
    fp_fall = 1 - r["fp1"] / r["before_fp1"]
    galore_keeps_cls = cells["galore_seq"]["cls_acc"] > cells["full_seq"]["cls_acc"]
    ff_cls_fp = cells["full_cls"]["fp1"]
    ff_cls_ok = ff_cls_fp <= cells["full_cls"]["before_fp1"]
    ok = fp_fall >= 0.30 and galore_keeps_cls and ff_cls_ok
    verdict(capsys, 9, "FP@1 and ablation ordering", ok,
            f"FP@1 {r['before_fp1']:.4f} -> {r['fp1']:.4f} ({100 * fp_fall:.1f}% fall, need >= 30%); "
            f"CLS GaLore+Seq {cells['galore_seq']['cls_acc']:.4f} vs Full+Seq {cells['full_seq']['cls_acc']:.4f}; "
            f"FP@1 Full+CLS {ff_cls_fp:.4f} vs untuned {cells['full_cls']['before_fp1']:.4f}")
