"""Acceptance gate: one test per criterion, each reporting PASS or FAIL.

Criteria 6 and 7 read the desk experiment results cached under
tests/.artifacts/desk (keyed by the experiment config digest). When the
cache is missing or stale the experiment is run, resuming any finished
stages; that takes a couple of CPU hours. Set PYROCAST_DESK_FORCE=1 to
recompute the sampling and scoring from the saved checkpoints.
"""
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import gradient_check, paper_reduced_net
from pyrocast.ca import CaParams, CellState, TerrainLayers, WindField, burn_probability, ensemble_next, initial_grid
from pyrocast.dataset import (
    KIND_ENSEMBLE,
    KIND_TRAIN,
    PairDataset,
    load_dataset,
    make_ensemble_dataset,
    make_training_dataset,
    save_dataset,
)
from pyrocast.diffusion import (
    DiffusionConfig,
    ddim_sample,
    ddim_sigma,
    forward_sample,
    make_linear_schedule,
    select_timesteps,
)
from pyrocast.experiment import DeskConfig, run
from pyrocast.metrics import frechet_feature_distance, hit_rate, kl_divergence, mse, psnr, ssim, threshold_sweep
from pyrocast.terrain import synthetic_terrain
from pyrocast.unet import NetConfig, PAPER_CONFIG, build_network, describe

DESK_DIR = Path(__file__).parent / ".artifacts" / "desk"


def gate(criterion, number, checks):
    """Evaluate named boolean checks, record the verdict and assert."""
    failed = [name for name, ok in checks if not ok]
    detail = "; ".join(name for name, _ in checks) if not failed else "failed: " + "; ".join(failed)
    criterion(number, not failed, detail)
    assert not failed, detail


def test_c1_architecture_conformance(criterion):
    rows = describe(PAPER_CONFIG)
    by_layer = {r.layer: r.params for r in rows}
    total = sum(r.params for r in rows)
    gate(criterion, 1, [
        (f"total {total:,} == 84,049,793", total == 84_049_793),
        ("input conv 2,432", by_layer["Conv2d (input conv)"] == 2_432),
        ("time embedding 328,704", by_layer["Time Embedding"] == 328_704),
        ("output conv 1,153", by_layer["Conv2d (output conv)"] == 1_153),
    ])


def test_c2_ca_oracle_equivalence(criterion):
    rng = np.random.default_rng(42)
    mask = np.zeros((5, 5), bool)
    mask[4, 4] = True
    terrain = TerrainLayers(p_veg=rng.uniform(-0.4, 0.3, (5, 5)), p_den=rng.uniform(-0.4, 0.3, (5, 5)),
                            slope_deg=rng.uniform(-10, 10, (5, 5)), unburnable_mask=mask)
    params = CaParams(p_h=0.5, wind=WindField(speed=4.0, direction_deg=135.0))
    state = initial_grid(terrain, [(2, 2), (1, 3)])
    m = 10_000
    mean = ensemble_next(state, terrain, params, m, 1, seed=99)
    p = np.zeros((5, 5))
    for r in range(5):
        for c in range(5):
            if state[r, c] == CellState.BURNING:
                p[r, c] = 1.0
            elif state[r, c] == CellState.UNBURNT:
                survive = 1.0
                for sr, sc in zip(*np.nonzero(state == CellState.BURNING)):
                    if max(abs(sr - r), abs(sc - c)) == 1:
                        survive *= 1.0 - burn_probability(params, terrain, (sr, sc), (r, c))
                p[r, c] = 1.0 - survive
    sd = np.sqrt(p * (1 - p) / m)
    z = np.abs(mean - p) / np.where(sd > 0, sd, 1.0)
    exact = np.all(mean[sd == 0] == p[sd == 0])
    gate(criterion, 2, [
        (f"max |z| {z[sd > 0].max():.2f} <= 3 over {int((sd > 0).sum())} stochastic cells", z[sd > 0].max() <= 3),
        ("deterministic cells exact", bool(exact)),
    ])


def test_c3_forward_process_statistics(criterion):
    cfg = DiffusionConfig(T=600)
    s = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    n = 10_000
    x0 = torch.tensor([[1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]], dtype=torch.float64)
    checks = []
    for t in (1, 300, 600):
        eps = torch.randn((n, 2, 3), generator=torch.Generator().manual_seed(t), dtype=torch.float64)
        xt = forward_sample(x0.expand(n, 2, 3), t, s, eps)
        ab = s.alpha_bar[t - 1]
        mean_z = ((xt.mean(0) - math.sqrt(ab) * x0).abs() / math.sqrt((1 - ab) / n)).max()
        var_z = ((xt.var(0) - (1 - ab)).abs() / ((1 - ab) * math.sqrt(2 / (n - 1)))).max()
        checks.append((f"t={t} mean |z| {float(mean_z):.2f}, var |z| {float(var_z):.2f} <= 3",
                       float(mean_z) <= 3 and float(var_z) <= 3))
    checks.append((f"alpha_bar_T {s.alpha_bar[-1]:.2e} < 1e-3", s.alpha_bar[-1] < 1e-3))
    gate(criterion, 3, checks)


def test_c4_ddim_ddpm_identity(criterion):
    s = make_linear_schedule(10)
    taus = select_timesteps(10, 10)
    worst = 0.0
    for t in taus:
        ab, ab_prev = s.alpha_bar[t - 1], (s.alpha_bar[t - 2] if t > 1 else 1.0)
        ddpm = math.sqrt(s.beta[t - 1] * (1 - ab_prev) / (1 - ab))
        worst = max(worst, abs(ddim_sigma(s, t, t - 1, 1.0) - ddpm))
    torch.manual_seed(0)
    cfg = NetConfig(base_channels=8, stage_channels=(8, 16), down_attention=(4,), up_attention=(4,), norm_groups=4,
                    attention_heads=2, time_embed_dim=16, image_size=8, dropout=0.0)
    net = build_network(cfg, zero_init_output=False).double()
    net.trained_steps = 1
    cond = (torch.rand(8, 8, generator=torch.Generator().manual_seed(1)) > 0.5).double()
    x_T = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    dcfg = DiffusionConfig(T=10, S=10, eta=0.0)
    a = ddim_sample(net, cond, dcfg, x_T=x_T, raw=True, generators=torch.Generator().manual_seed(3))
    b = ddim_sample(net, cond, dcfg, x_T=x_T, raw=True, generators=torch.Generator().manual_seed(4))
    gap = float((a - b).abs().max())
    gate(criterion, 4, [
        (f"max |sigma - ddpm std| {worst:.1e} <= 1e-12", taus == list(range(1, 11)) and worst <= 1e-12),
        (f"eta=0 rerun gap {gap:.1e} <= 1e-12", gap <= 1e-12),
    ])


def test_c5_gradient_correctness(criterion):
    results = gradient_check(paper_reduced_net(), n_params=12, seed=5)
    worst = max(r[-1] for r in results)
    gate(criterion, 5, [
        (f"{len(results)} params checked", len(results) >= 10),
        (f"max relative error {worst:.1e} <= 1e-4", worst <= 1e-4),
    ])


@pytest.fixture(scope="module")
def desk():
    return run(DeskConfig(), DESK_DIR, force=os.environ.get("PYROCAST_DESK_FORCE") == "1")


@pytest.mark.slow
def test_c6_directional_reproduction(criterion, desk):
    d, b = desk["means"]["diffusion"], desk["means"]["baseline"]
    cfg = desk["config"]
    gate(criterion, 6, [
        (f"ensemble M={cfg['M']} MSE {d['mse']:.5f} < baseline {b['mse']:.5f}", d["mse"] < b["mse"]),
        (f"ensemble SSIM {d['ssim']:.4f} > baseline {b['ssim']:.4f}", d["ssim"] > b["ssim"]),
        (f"{desk['n_test_pairs']} test pairs, {cfg['diffusion_steps']} diffusion steps",
         cfg["diffusion_steps"] >= 20_000 and cfg["test_samples"] == 20 and cfg["test_m"] == 30),
    ])


@pytest.mark.slow
def test_c7_ensemble_size_trend(criterion, desk):
    m20, m1 = desk["means"]["diffusion"]["mse"], desk["means"]["diffusion_m1"]["mse"]
    st = desk["sign_test_m20_vs_m1"]
    gate(criterion, 7, [
        (f"MSE M=20 {m20:.5f} <= M=1 {m1:.5f}", m20 <= m1),
        (f"sign test wins={st['wins']} losses={st['losses']} p={st['p_value']:.2e} < 0.05",
         st["p_value"] < 0.05 and st["wins"] > st["losses"]),
    ])


def test_c8_metric_identity_suite(criterion):
    rng = np.random.default_rng(8)
    frames = [rng.random((16, 16)) * (rng.random((16, 16)) < 0.6) for _ in range(30)]
    f, g = frames[0], frames[1]
    e = mse(f, g)
    pred = np.array([[0.9, 0.1], [0.6, 0.4]])
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    (s,) = threshold_sweep(pred, target, [0.5])
    gate(criterion, 8, [
        ("mse(f,f)=0", all(mse(x, x) == 0 for x in frames)),
        ("ssim(f,f)=1", all(abs(ssim(x, x) - 1) <= 1e-12 for x in frames)),
        ("hit_rate(f,f)=1", all(hit_rate(x, x) == 1 for x in frames)),
        ("kl(f,f)=0", all(abs(kl_divergence(x, x)) <= 1e-9 for x in frames)),
        ("frechet(S,S)<=1e-8", frechet_feature_distance(frames, frames) <= 1e-8),
        ("psnr consistency <=1e-9", abs(psnr(f, g) - 10 * math.log10(1 / e)) <= 1e-9),
        ("2x2 sweep fixture", (s.tp, s.fp, s.fn, s.tn) == (1, 1, 1, 1)
         and s.precision == s.recall == s.f1 == 0.5 and s.mcc == 0.0),
    ])


def test_c9_dataset_contract(criterion, tmp_path):
    terrain, params = synthetic_terrain(16, 16, seed=4), CaParams(seed=21)
    train = make_training_dataset(terrain, params, 12)
    per_traj = np.bincount(train.sample_index)
    test = make_ensemble_dataset(terrain, params, 6, m=5, exclude_seeds=train.seeds())
    trips = 0
    for k in range(100):
        rng = np.random.default_rng(k)
        n, h, w = rng.integers(1, 6), rng.integers(1, 10), rng.integers(1, 10)
        kind = KIND_TRAIN if k % 2 else KIND_ENSEMBLE
        x = (rng.random((n, h, w)) < 0.3).astype(np.float32)
        if kind == KIND_TRAIN:
            y = np.maximum(x, rng.random((n, h, w)) < 0.3).astype(np.float32)
        else:
            y = np.maximum(x, rng.integers(0, 6, (n, h, w)) / 5).astype(np.float32)
        data = PairDataset(x, y, kind, 1 if kind == KIND_TRAIN else 5)
        save_dataset(tmp_path / f"{k}.pcds", data)
        back = load_dataset(tmp_path / f"{k}.pcds")
        trips += back.inputs.tobytes() == x.tobytes() and back.targets.tobytes() == y.tobytes() \
            and back.kind == kind
    gate(criterion, 9, [
        ("pixelwise growth", bool(np.all(train.targets >= train.inputs) and np.all(test.targets >= test.inputs))),
        ("5 pairs per trajectory", len(per_traj) == 12 and set(per_traj.tolist()) == {5}),
        ("train/ensemble seeds disjoint", not set(train.seeds()) & set(test.seeds())),
        (f"{trips}/100 lossless round trips", trips == 100),
    ])
