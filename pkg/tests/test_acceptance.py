"""Acceptance suite: one test group per criterion, each reporting PASS/FAIL in
the terminal summary (see ``conftest.py``).

The training criteria are slow on CPU (criterion 4 about 20 min, the ablation
benchmark shared by 5, 6, 7 and 10 considerably longer). Set
``BEVDECOMP_TEST_CACHE`` to keep the generated benchmark data between sessions.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from sklearn.isotonic import IsotonicRegression

from bevdecomp.ablation import run_ablation
from bevdecomp.autoencoder import (autoencoder_from, corrupt, reconstruct, train_stage1,
                                   weighted_bce)
from bevdecomp.cli import main
from bevdecomp.config import ExperimentConfig, dumps
from bevdecomp.config import load as load_config
from bevdecomp.dataset import generate_split, load_split
from bevdecomp.geometry import (CameraModel, GridSpec, PolarSpec, cart_to_polar, fov_mask,
                                polar_to_cart)
from bevdecomp.metrics import DEFAULT_THRESHOLDS, best_iou, evaluate
from bevdecomp.alignment import mse_loss
from bevdecomp.nets import ColumnTransformer
from bevdecomp.training import stage_data

from conftest import tiny_config
from helpers import random_binary, random_rect_map
from oracles import bce as bce_oracle
from oracles import cart_from_polar, polar_from_cart, pooled_best_iou

QUICK_LIMIT_S = 60.0

# ablation benchmark: the first 400 scenes of the 900-scene train split of the
# shared 1000-scene dataset, evaluated on its 100-scene val split
BENCH_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.yaml"
BENCH_TRAIN = 400
BENCH_SEEDS = (0, 1, 2)


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def _recon_miou(y, net, cfg, seed=0):
    """Pooled per-class IoU of decode(corrupt(encode(y))) >= 0.5; empty classes score 1."""
    p = reconstruct(y, net, cfg, seed=seed) >= 0.5
    g = y > 0.5
    inter = (p & g).sum((0, 2, 3)).double()
    union = (p | g).sum((0, 2, 3)).double()
    per = torch.where(union == 0, torch.ones_like(union), inter / union.clamp(min=1))
    return per.numpy(), float(per.mean())


# -- 1. warps ---------------------------------------------------------------------------------

@pytest.mark.criterion(1, "warp correctness")
def test_c1_warps(record_property):
    G, P, cam = GridSpec(), PolarSpec(), CameraModel()
    assert G.shape == (200, 200) and P.shape == (64, 176)

    def run():
        for seed in range(20):
            cart = random_binary(seed, (2,) + G.shape)
            polar = cart_to_polar(cart, cam, G, P)
            ref = polar_from_cart(cart, G.x_range, G.y_range, G.resolution, 64, 176,
                                  P.max_range, cam.fov)
            assert np.array_equal(polar, ref), seed
            back = polar_to_cart(polar, cam, G, P)
            assert np.array_equal(back, cart_from_polar(polar, G.x_range, G.y_range,
                                                        G.resolution, P.max_range, cam.fov))
        wedge = fov_mask(cam, G)
        inter, union = np.zeros(3), np.zeros(3)
        for seed in range(20):
            m = random_rect_map(seed)
            rt = polar_to_cart(cart_to_polar(m, cam, G, P), cam, G, P)
            a, b = m & wedge, rt & wedge
            inter += (a & b).sum(axis=(1, 2))
            union += (a | b).sum(axis=(1, 2))
        return inter / union

    rt_iou, dt = _timed(run)
    record_property("round_trip_iou", np.round(rt_iou, 3).tolist())
    record_property("seconds", round(dt, 1))
    assert (rt_iou >= 0.90).all()
    assert dt < QUICK_LIMIT_S


# -- 2. losses --------------------------------------------------------------------------------

def _fd_rel_error(f, x, eps=1e-6):
    x = x.clone().requires_grad_(True)
    f(x).backward()
    num = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(x.numel()):
            d = torch.zeros_like(x).view(-1)
            d[i] = eps
            d = d.view_as(x)
            num.view(-1)[i] = (f(x + d) - f(x - d)) / (2 * eps)
    return float((x.grad - num).abs().max() / num.abs().max())


@pytest.mark.criterion(2, "loss correctness")
def test_c2_losses(record_property):
    rng = np.random.default_rng(2)
    g = torch.Generator().manual_seed(2)

    def run():
        worst_bce = worst_mse = worst_direct = 0.0
        for _ in range(50):
            p = torch.tensor(rng.uniform(0.05, 0.95, (2, 3, 4, 4)))
            y = torch.tensor((rng.random((2, 3, 4, 4)) < 0.4).astype(float))
            w = rng.uniform(0.2, 3.0, 3)
            worst_bce = max(worst_bce, _fd_rel_error(lambda t: weighted_bce(t, y, w), p))
            zh = torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64)
            z = torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64)
            worst_mse = max(worst_mse, _fd_rel_error(lambda t: mse_loss(t, z), zh))
            unit = weighted_bce(p, y, np.ones(3)).item()
            worst_direct = max(worst_direct, abs(unit - bce_oracle(p.numpy(), y.numpy(),
                                                                   np.ones(3))))
        return worst_bce, worst_mse, worst_direct

    (eb, em, ed), dt = _timed(run)
    record_property("bce_fd_rel", f"{eb:.1e}")
    record_property("mse_fd_rel", f"{em:.1e}")
    record_property("unit_bce_abs", f"{ed:.1e}")
    record_property("seconds", round(dt, 1))
    assert eb < 1e-4 and em < 1e-4 and ed < 1e-6
    assert dt < QUICK_LIMIT_S


# -- 3. noise ---------------------------------------------------------------------------------

@pytest.mark.criterion(3, "noise identity")
def test_c3_noise(record_property):
    def run():
        out = {}
        for eta in (0.0, 0.25, 0.5, 1.0):
            g = torch.Generator().manual_seed(int(eta * 100))
            z = torch.randn(100_000, generator=g, dtype=torch.float64)
            zt = corrupt(z, eta, g)
            if eta == 0.0:
                assert torch.equal(zt, z)
            out[eta] = float((zt ** 2).mean())
        return out

    moments, dt = _timed(run)
    record_property("second_moments", {k: round(v, 4) for k, v in moments.items()})
    record_property("seconds", round(dt, 1))
    assert all(abs(m - 1.0) < 0.05 for m in moments.values())
    assert dt < QUICK_LIMIT_S


# -- 4. stage-I learnability ------------------------------------------------------------------

@pytest.mark.criterion(4, "stage-I learnability")
def test_c4_heldout_reconstruction(record_property):
    cfg = ExperimentConfig().replace(train__ae__epochs=50, train__eta=0.5)
    t = time.perf_counter()
    train = generate_split(cfg.recipe, cfg.camera_model, cfg.gspec, 2000, seed=1,
                           render_image=False)
    held = generate_split(cfg.recipe, cfg.camera_model, cfg.gspec, 100, seed=2,
                          render_image=False)
    net = autoencoder_from(train_stage1(train, cfg))
    per, miou = _recon_miou(stage_data(held, cfg, need_images=False).targets, net, cfg, seed=5)
    dt = time.perf_counter() - t
    record_property("heldout_miou", round(miou, 4))
    record_property("heldout_per_class", np.round(per, 3).tolist())
    record_property("heldout_minutes", round(dt / 60, 1))
    assert miou >= 0.80
    assert dt <= 4 * 3600


@pytest.mark.criterion(4, "stage-I learnability")
def test_c4_overfit_eight(record_property):
    # batch size 1: the 200-epoch budget is then 1600 optimiser steps
    cfg = ExperimentConfig().replace(train__ae__epochs=200, train__ae__batch_size=1,
                                     train__eta=0.5)
    data = generate_split(cfg.recipe, cfg.camera_model, cfg.gspec, 8, seed=1,
                          render_image=False)
    net = autoencoder_from(train_stage1(data, cfg))
    per, miou = _recon_miou(stage_data(data, cfg, need_images=False).targets, net, cfg)
    record_property("overfit8_miou", round(miou, 4))
    assert miou >= 0.95


# -- 5, 6, 7, 10. ablation benchmark ----------------------------------------------------------

@pytest.fixture(scope="module")
def bench(bench_root):
    cfg = load_config(BENCH_CONFIG)
    train = load_split(bench_root, "train", BENCH_TRAIN)
    val = load_split(bench_root, "val")
    cache = {}
    res = run_ablation(cfg, train, val, seeds=BENCH_SEEDS, cache=cache)
    return res, cache, val


def _per_seed(res, group, key):
    return [r["mean_iou"] if key == "mean" else r["strata"][key] for r in res.reports[group]]


@pytest.mark.criterion(5, "task decomposition beats the joint baseline (layout)")
def test_c5_task_decomposition(bench, record_property):
    res = bench[0]
    td, joint = res.row("VI")["layout"], res.row("V")["layout"]
    record_property("VI_layout", round(td, 4))
    record_property("V_layout", round(joint, 4))
    record_property("per_seed_VI", np.round(_per_seed(res, "VI", "layout"), 3).tolist())
    record_property("per_seed_V", np.round(_per_seed(res, "V", "layout"), 3).tolist())
    assert td - joint > 0


@pytest.mark.criterion(6, "fine-tuning keeps mIoU and touches only the decoder")
def test_c6_finetune(bench, record_property):
    res, cache, _ = bench
    ft, base = res.row("VII")["mean"], res.row("VI")["mean"]
    record_property("VII_miou", round(ft, 4))
    record_property("VI_miou", round(base, 4))
    record_property("per_seed_VII", np.round(_per_seed(res, "VII", "mean"), 3).tolist())
    record_property("per_seed_VI", np.round(_per_seed(res, "VI", "mean"), 3).tolist())
    aligns = {c.checkpoint_id: c for k, c in cache.items() if k[0] == "align"}
    fts = [c for k, c in cache.items() if k[0] == "finetune"]
    assert len(fts) == len(BENCH_SEEDS)
    for c in fts:
        parent = aligns[c.lineage[-1]].hashes()
        child = c.hashes()
        assert set(parent) == set(child)
        changed = {k for k in child if child[k] != parent[k]}
        assert changed == {"decoder"}, changed
    assert ft >= base


@pytest.mark.criterion(7, "polar targets beat Cartesian targets (layout)")
def test_c7_cst(bench, record_property):
    res = bench[0]
    polar, cart = res.row("III")["layout"], res.row("I")["layout"]
    record_property("III_layout", round(polar, 4))
    record_property("I_layout", round(cart, 4))
    record_property("per_seed_III", np.round(_per_seed(res, "III", "layout"), 3).tolist())
    record_property("per_seed_I", np.round(_per_seed(res, "I", "layout"), 3).tolist())
    assert polar > cart


def _bin_curve(report):
    """Per-bin mean IoU over the classes present in that bin."""
    curve = []
    for b in report["distance_bins"]:
        vals = [v for name, v in zip(report["class_names"], b["per_class_iou"])
                if name not in b["empty_classes"]]
        curve.append(float(np.mean(vals)) if vals else np.nan)
    return np.array(curve)


def _longest_nonincreasing(x):
    best = [1] * len(x)
    for i in range(len(x)):
        for j in range(i):
            if x[j] >= x[i]:
                best[i] = max(best[i], best[j] + 1)
    return max(best)


@pytest.mark.criterion(10, "distance curve is non-increasing")
def test_c10_distance_curve(bench, record_property):
    res = bench[0]
    report = res.reports["VII"][0]
    curve = _bin_curve(report)
    assert len(curve) == 10 and np.isfinite(curve).all()
    iso = IsotonicRegression(increasing=False).fit_transform(np.arange(10), curve)
    bad = len(curve) - _longest_nonincreasing(curve)
    record_property("bin_miou", np.round(curve, 3).tolist())
    record_property("isotonic_max_residual", round(float(np.abs(iso - curve).max()), 3))
    record_property("out_of_order_bins", bad)
    assert bad <= 1


# -- 8. column transformer --------------------------------------------------------------------

@pytest.mark.criterion(8, "column transformer contracts")
def test_c8_column_transformer(record_property):
    def run():
        for seed in range(5):
            torch.manual_seed(seed)
            tr = ColumnTransformer(32, 32)
            with torch.no_grad():
                for p in tr.parameters():
                    p.add_(torch.randn_like(p) * 0.2)
            tr.eval()
            g = torch.Generator().manual_seed(seed)
            f = torch.randn(2, 32, 32, 88, generator=g)
            j = int(torch.randint(0, 88, (1,), generator=g))
            f2 = f.clone()
            f2[:, :, :, j] += torch.randn(2, 32, 32, generator=g)
            perm = torch.randperm(88, generator=g)
            with torch.no_grad():
                a, b = tr(f), tr(f2)
                keep = torch.arange(88) != j
                assert torch.equal(a[..., keep], b[..., keep])
                assert not torch.equal(a[..., j], b[..., j])
                assert torch.equal(tr(f[..., perm]), a[..., perm])

    _, dt = _timed(run)
    record_property("seconds", round(dt, 1))
    assert dt < QUICK_LIMIT_S


# -- 9. metric oracle -------------------------------------------------------------------------

@pytest.mark.criterion(9, "metric oracle and visibility masking")
def test_c9_metric_oracle(record_property):
    def run():
        for seed in range(100):
            rng = np.random.default_rng(seed)
            pred = np.round(rng.random((16, 16)), 2)
            gt = (pred + rng.normal(0, 0.3, pred.shape)) > rng.uniform(0.3, 0.9)
            valid = rng.random((16, 16)) > rng.uniform(0, 0.5)
            got = best_iou(pred, gt, valid)
            want = pooled_best_iou(pred[None], gt[None], valid[None], DEFAULT_THRESHOLDS)
            assert got[0] == pytest.approx(want[0], abs=1e-12) and got[1] == want[1]
        rng = np.random.default_rng(99)
        pred = rng.random((4, 3, 16, 16))
        gt = rng.random((4, 3, 16, 16)) < 0.3
        vis = rng.random((4, 16, 16)) < 0.6
        ref = evaluate(pred, gt, vis, class_names=["a", "b", "c"]).to_dict()
        out = ~vis[:, None].repeat(3, axis=1)
        pred2, gt2 = pred.copy(), gt.copy()
        pred2[out] = rng.random(out.sum())
        gt2[out] = ~gt2[out]
        assert evaluate(pred2, gt2, vis, class_names=["a", "b", "c"]).to_dict() == ref

    _, dt = _timed(run)
    record_property("seconds", round(dt, 1))
    assert dt < QUICK_LIMIT_S


# -- 11. reproducibility ----------------------------------------------------------------------

@pytest.mark.criterion(11, "reproducible three-stage pipeline")
def test_c11_reproducibility(tmp_path, monkeypatch, record_property):
    monkeypatch.setenv("BEVDECOMP_HOME", str(tmp_path / "home"))
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(dumps(tiny_config(2)))
    data = tmp_path / "data"
    assert main(["synth", "--n", "24", "--seed", "5", "--out", str(data)]) == 0
    reports = []
    for run in ("a", "b"):
        root = tmp_path / run
        prev = None
        for stage in ("ae", "align", "finetune"):
            argv = ["train", stage, "--config", str(cfg_path), "--data", str(data),
                    "--out", str(root / stage)]
            if prev:
                argv += ["--from", str(root / prev / f"{prev}.pt")]
            assert main(argv) == 0
            prev = stage
        out = root / "eval"
        assert main(["eval", "--ckpt", str(root / "finetune" / "finetune.pt"), "--data",
                     str(data), "--out", str(out)]) == 0
        reports.append(((out / "report.json").read_text(), (out / "manifest.json").read_text()))
    record_property("mean_iou", round(json.loads(reports[0][0])["mean_iou"], 4))
    assert reports[0] == reports[1]
