"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line; the lines are
repeated in the terminal summary. Criteria 4-6 share one set of three
pre-training runs at the default configuration (with the desk-scale K=64
override) and are marked slow."""
import math
import subprocess
import sys
import time
from pathlib import Path
from statistics import median

import numpy as np
import pytest
import torch

from dicom_ssl.classification import auc, aupr, fine_tune, soc
from dicom_ssl.config import parse_config
from dicom_ssl.data import generate_synthetic, load_dataset
from dicom_ssl.objective import global_loss, local_loss, recon_loss, total_loss
from dicom_ssl.pretrain import (load_checkpoint, load_student_backbone, pretrain, save_checkpoint,
                                teacher_class_entropy)
from dicom_ssl.representation import rand_index, silhouette
from dicom_ssl.segmentation import dice, hd95, train_segmentation
from dicom_ssl.vit import VisionTransformer

from .conftest import record_criterion
from .oracles import (ap_bruteforce, auc_pairs, auc_ranksum, hd95_bruteforce, rand_pairs,
                      silhouette_pairs, soc_loop)
from .test_corruption import sample_stats
from .test_pretrain import gradient_check_total_loss

ROOT = Path(__file__).resolve().parent.parent
SEEDS = (0, 1, 2)
STEPS = 200
DESK = {"head": {"K": 64}}

# every example-driven unit test; the gradient checks, the 1000-mask study and
# the training harness runs belong to other criteria
EXAMPLE_SUITE = ["tests/test_objective.py", "tests/test_corruption.py", "tests/test_vit.py",
                 "tests/test_heads.py", "tests/test_data.py", "tests/test_segmentation.py",
                 "tests/test_classification.py", "tests/test_representation.py",
                 "tests/test_config.py", "tests/test_pretrain.py::test_ema_examples"]
EXAMPLE_FILTER = ("not gradient and not mask_statistics and not train_segmentation "
                  "and not probe and not fine_tune and not cluster_eval")


def test_criterion_1_equation_unit_suite():
    start = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          "-k", EXAMPLE_FILTER, *EXAMPLE_SUITE],
                         cwd=ROOT, capture_output=True, text=True)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 8, 8, generator=g, dtype=torch.float64)
    x_bar = torch.rand(2, 8, 8, generator=g, dtype=torch.float64)
    pixel = (torch.rand(2, 8, 8, generator=g) < 0.5).double()
    summed = recon_loss(x, x_bar, pixel, "sum")
    exact = [summed.item() == (pixel * (x - x_bar).abs()).sum().item()]
    p = torch.softmax(torch.randn(2, 5, 4, generator=g, dtype=torch.float64), -1)
    q = torch.softmax(torch.randn(2, 5, 4, generator=g, dtype=torch.float64), -1)
    exact.append(local_loss(p, q, torch.zeros(2, 5)).item() == 0.0)
    ps = [torch.softmax(torch.randn(3, 4, generator=g, dtype=torch.float64), -1) for _ in range(4)]
    exact.append(torch.equal(global_loss(*ps), global_loss(ps[2], ps[3], ps[0], ps[1])))
    bundle = total_loss(summed, local_loss(p, q, torch.ones(2, 5)), global_loss(*ps), (0.5, 2.0, 3.0))
    exact.append(bundle.total.item() == 0.5 * bundle.recons.item() + 2.0 * bundle.local.item()
                 + 3.0 * bundle.glob.item())
    elapsed = time.perf_counter() - start
    summary = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    ok = res.returncode == 0 and all(exact) and elapsed < 60
    record_criterion(1, ok, f"example suite '{summary}', bit-exact identities {sum(exact)}/4, "
                            f"{elapsed:.1f}s (< 60s)")
    assert ok, res.stdout[-3000:]


def test_criterion_2_gradient_check(tiny_cfg):
    assert (tiny_cfg.backbone.embed_dim, tiny_cfg.backbone.depth, tiny_cfg.head.K,
            tuple(tiny_cfg.data.image_size)) == (16, 2, 8, (8, 8))
    start = time.perf_counter()
    report, params, teacher_clean, changed = gradient_check_total_loss(tiny_cfg, n_coords=20)
    elapsed = time.perf_counter() - start
    enough = all(c >= min(20, p.numel()) for (c, _), (_, p) in zip(report.per_group.values(), params))
    ok = report.max_rel_error < 1e-4 and enough and teacher_clean and changed and elapsed < 300
    record_criterion(2, ok, f"max rel error {report.max_rel_error:.2e} (< 1e-4) over "
                            f"{report.checked} coords in {len(params)} groups, "
                            f"teacher grad zero={teacher_clean}, {elapsed:.1f}s (< 300s)")
    assert ok, report.worst


def test_criterion_3_masking_statistics():
    masks, connected = sample_stats(1000, seed=0)
    mean = masks.mean()
    freq = masks.mean(0)
    sigma = math.sqrt(mean * (1 - mean) / len(masks))
    worst = float(np.abs(freq - mean).max() / sigma)
    ok = abs(mean - 0.70) <= 0.05 and worst <= 3.0 and connected >= 0.90
    record_criterion(3, ok, f"mean fraction {mean:.4f} (0.70 +/- 0.05), max per-token deviation "
                            f"{worst:.2f} sigma (<= 3), grouped share {connected:.3f} (>= 0.90)")
    assert ok


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_inst = 150
    for _ in range(n_inst):
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 4, n) / 4.0 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(aupr(scores, labels) - ap_bruteforce(scores, labels)),
                    abs(auc(scores, labels) - auc_pairs(scores, labels)),
                    abs(auc(scores, labels) - auc_ranksum(scores, labels)))
        a, b = rng.integers(0, 3, n), rng.integers(0, 3, n)
        worst = max(worst, abs(rand_index(a, b) - rand_pairs(a, b)))
        x = rng.standard_normal((n, 3))
        cl = rng.integers(0, 3, n)
        cl[:2] = [0, 1]
        worst = max(worst, abs(silhouette(x, cl) - silhouette_pairs(x, cl)))
        seq = rng.random(int(rng.integers(1, 13)))
        worst = max(worst, abs(soc(seq) - soc_loop(seq)))
    ok = worst <= 1e-10
    record_criterion(7, ok, f"{n_inst} random instances (N <= 12) per metric, "
                            f"max |kernel - oracle| {worst:.1e} (<= 1e-10)")
    assert ok


def _ckpt_bytes(path):
    return (path / "tensors.bin").read_bytes(), (path / "manifest.json").read_bytes()


def test_criterion_8_checkpoint_round_trip(tiny_cfg, synth_dir, tmp_path):
    ds = load_dataset(synth_dir / "manifest.csv", (8, 8), 4)
    cfg = tiny_cfg.replace(**{"data.batch_size": 4, "train.epochs": 3, "train.checkpoint_every": 0})
    full = pretrain(ds, cfg, tmp_path / "full")
    save_checkpoint(load_checkpoint(tmp_path / "full" / "checkpoint"), tmp_path / "again")
    round_trip = _ckpt_bytes(tmp_path / "full" / "checkpoint") == _ckpt_bytes(tmp_path / "again")
    part = tmp_path / "part"
    pretrain(ds, cfg, part, max_steps=5)
    resumed = pretrain(ds, cfg, part, resume=part / "checkpoint")
    resume_ok = (resumed.step == full.step
                 and _ckpt_bytes(tmp_path / "full" / "checkpoint") == _ckpt_bytes(part / "checkpoint")
                 and (tmp_path / "full" / "loss_curve.csv").read_bytes()
                 == (part / "loss_curve.csv").read_bytes())
    ok = round_trip and resume_ok
    record_criterion(8, ok, f"save-load-save byte-identical={round_trip}, resume after step 5 of "
                            f"{full.step} bit-identical={resume_ok}")
    assert ok


# ------------------------------------------------------------ slow criteria

@pytest.fixture(scope="session")
def acceptance_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_data")
    generate_synthetic(out, 100, 2, (64, 64), seed=123)
    return load_dataset(out / "manifest.csv", (64, 64), 8)


@pytest.fixture(scope="session")
def pretrained_runs(acceptance_data, tmp_path_factory):
    """Three pre-training runs of 200 steps at batch 32, default config with K=64."""
    runs = []
    train_images = acceptance_data.split("train").images
    for seed in SEEDS:
        cfg = parse_config({**DESK, "seed": seed,
                            "train": {"max_steps": STEPS, "checkpoint_every": 0}})
        out = tmp_path_factory.mktemp(f"pretrain_{seed}")
        losses = {}

        def on_step(state, bundle):
            if state.step in (1, STEPS):
                losses[state.step] = bundle.as_floats()["L"]

        start = time.perf_counter()
        state = pretrain(acceptance_data, cfg, out, max_steps=STEPS, on_step=on_step)
        elapsed = time.perf_counter() - start
        runs.append({"seed": seed, "cfg": cfg, "ckpt": out / "checkpoint", "steps": state.step,
                     "loss_first": losses[1], "loss_last": losses.get(STEPS, math.nan),
                     "entropy": teacher_class_entropy(state, train_images), "seconds": elapsed})
    return runs


@pytest.mark.slow
def test_criterion_4_anti_collapse(pretrained_runs):
    cfg = pretrained_runs[0]["cfg"]
    threshold = 0.2 * math.log(cfg.head.K)
    entropy = median(r["entropy"] for r in pretrained_runs)
    first = median(r["loss_first"] for r in pretrained_runs)
    last = median(r["loss_last"] for r in pretrained_runs)
    seconds = sum(r["seconds"] for r in pretrained_runs)
    steps_ok = all(r["steps"] == STEPS for r in pretrained_runs)
    ok = entropy > threshold and last < first and seconds < 600 and steps_ok
    record_criterion(4, ok, f"median teacher class-token entropy {entropy:.4f} (> {threshold:.4f}), "
                            f"loss step 1 {first:.3f} -> step {STEPS} {last:.3f}, "
                            f"K={cfg.head.K}, batch {cfg.data.batch_size}, "
                            f"{seconds:.0f}s for 3 seeds (< 600s)")
    assert ok


def _random_backbone(cfg, seed):
    torch.manual_seed(seed)
    return VisionTransformer(cfg.backbone_config())


@pytest.mark.slow
def test_criterion_5_transfer_directionality(pretrained_runs, acceptance_data):
    rows = []
    start = time.perf_counter()
    for run in pretrained_runs:
        cfg = run["cfg"]
        assert cfg.finetune.epochs == 20
        backbone, _ = load_student_backbone(run["ckpt"])
        pre = fine_tune(backbone, acceptance_data, cfg, seed=run["seed"])
        rnd = fine_tune(_random_backbone(cfg, run["seed"]), acceptance_data, cfg, seed=run["seed"])
        rows.append((pre.final["aupr"], rnd.final["aupr"], pre.soc, rnd.soc))
    elapsed = time.perf_counter() - start
    aupr_pre, aupr_rnd, soc_pre, soc_rnd = (median(col) for col in zip(*rows))
    ok = aupr_pre >= 0.95 and aupr_pre >= aupr_rnd and soc_pre > soc_rnd and elapsed < 1800
    record_criterion(5, ok, f"median test AUPR pre-trained {aupr_pre:.4f} (>= 0.95) vs random "
                            f"{aupr_rnd:.4f}, median SoC {soc_pre:.4f} vs {soc_rnd:.4f}, "
                            f"fine-tune {elapsed:.0f}s (< 1800s, pre-training counted in 4)")
    assert ok


@pytest.mark.slow
def test_criterion_6_segmentation_directionality(pretrained_runs, acceptance_data):
    rows = []
    for run in pretrained_runs:
        cfg = run["cfg"]
        assert cfg.seg.epochs == 20
        backbone, _ = load_student_backbone(run["ckpt"])
        pre = train_segmentation(backbone, acceptance_data, cfg, seed=run["seed"])
        rnd = train_segmentation(_random_backbone(cfg, run["seed"]), acceptance_data, cfg,
                                 seed=run["seed"])
        rows.append((pre.final["dice"], rnd.final["dice"]))
    dice_pre, dice_rnd = (median(col) for col in zip(*rows))

    full = np.ones((8, 8), int)
    left = np.zeros((8, 8), int)
    left[:, :4] = 1
    other = np.zeros((8, 8), int)
    other[0, 0] = 1
    p1, p2 = np.zeros((10, 10), int), np.zeros((10, 10), int)
    p1[1, 1] = p2[4, 5] = 1
    square = np.zeros((20, 20), int)
    square[3:13, 3:13] = 1
    shifted = np.roll(square, 3, axis=1)
    examples = [dice(full, full) == 1.0, dice(full - left, left) == 0.0,
                dice(left, full) == 2 * 32 / (32 + 64), hd95(square, square) == 0.0,
                hd95(p1, p2) == 5.0, hd95(square, shifted) == hd95_bruteforce(square, shifted)]
    ok = dice_pre >= dice_rnd and all(examples)
    record_criterion(6, ok, f"median test Dice pre-trained {dice_pre:.4f} vs random {dice_rnd:.4f}, "
                            f"metric examples {sum(examples)}/{len(examples)} exact")
    assert ok
