"""Desk-scale comparison of the diffusion ensemble and the regression baseline.

A small 32x32 synthetic landscape, the reduced network and modest dataset
sizes keep the full pipeline (data, both trainings, sampling, scoring)
within a couple of CPU hours. Every stage writes its product into a work
directory and is skipped when that product already exists, so an
interrupted run resumes where it stopped. The final numbers land in
``results.json``.

    python -m pyrocast.experiment WORKDIR
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .ca import CaParams, WindField
from .checkpoint import MODEL_DETERMINISTIC, MODEL_DIFFUSION, load_checkpoint, save_checkpoint
from .dataset import load_dataset, make_ensemble_dataset, make_training_dataset, save_dataset
from .diffusion import DiffusionConfig, make_optimizer, schedule_for, train_diffusion
from .evaluate import evaluate_models, write_report
from .terrain import region_wind_speed, synthetic_terrain
from .unet import baseline_loss, build_baseline, build_network, reduced_config, train_baseline


@dataclass(frozen=True)
class DeskConfig:
    size: int = 32
    terrain_seed: int = 1
    master_seed: int = 3
    wind_region: str = "ferguson"
    wind_direction_deg: float = 45.0
    train_samples: int = 100
    test_samples: int = 20
    test_m: int = 30
    diffusion_steps: int = 20_000
    batch_size: int = 8
    lr: float = 1e-4
    baseline_chunk: int = 500
    baseline_max_steps: int = 20_000
    baseline_patience: int = 4
    baseline_val_fraction: float = 0.1
    M: int = 20
    checkpoint_every: int = 1000
    threads: int = 1

    def digest(self) -> str:
        blob = {"desk": asdict(self), "diffusion": DiffusionConfig().to_dict()}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:12]


class Log:
    def __init__(self, path: Path):
        self.path = path

    def __call__(self, msg: str) -> None:
        line = f"{time.strftime('%H:%M:%S')} {msg}"
        print(line, flush=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")


def _ca(cfg: DeskConfig):
    terrain = synthetic_terrain(cfg.size, cfg.size, seed=cfg.terrain_seed)
    wind = WindField(speed=region_wind_speed(cfg.wind_region), direction_deg=cfg.wind_direction_deg)
    return terrain, CaParams(wind=wind, seed=cfg.master_seed)


def make_datasets(cfg: DeskConfig, work: Path, log: Log):
    train_path, test_path = work / "train.pcds", work / "test.pcds"
    if not train_path.exists() or not test_path.exists():
        terrain, params = _ca(cfg)
        train = make_training_dataset(terrain, params, cfg.train_samples)
        test = make_ensemble_dataset(terrain, params, cfg.test_samples, cfg.test_m, exclude_seeds=train.seeds())
        save_dataset(train_path, train)
        save_dataset(test_path, test)
        log(f"datasets: {len(train)} training pairs, {len(test)} test pairs")
    return load_dataset(train_path), load_dataset(test_path)


def train_diffusion_stage(cfg: DeskConfig, train, work: Path, log: Log) -> Path:
    path = work / "diffusion.ckpt"
    dcfg = DiffusionConfig()
    if path.exists():
        ckpt = load_checkpoint(path, MODEL_DIFFUSION, lr=cfg.lr)
        net, opt, step = ckpt.net, ckpt.optimizer, ckpt.step
    else:
        net = build_network(reduced_config(cfg.size))
        net.trained_steps = 0
        opt, step = make_optimizer(net, cfg.lr), 0
    schedule = schedule_for(dcfg)
    losses: list[float] = []
    t0 = time.time()

    def record(s, loss):
        losses.append(loss)
        if s % 100 == 0:
            rate = (time.time() - t0) / len(losses)
            log(f"diffusion step {s} loss {np.mean(losses[-100:]):.5f} ({rate:.3f}s/step)")

    while step < cfg.diffusion_steps:
        n = min(cfg.checkpoint_every, cfg.diffusion_steps - step)
        train_diffusion(net, train.inputs, train.targets, n, schedule, cfg.batch_size, cfg.lr,
                        seed=cfg.master_seed, optimizer=opt, start_step=step, log=record)
        step += n
        save_checkpoint(path, net, MODEL_DIFFUSION, dcfg, step, opt)
    return path


def _val_loss(net, x, y) -> float:
    net.eval()
    with torch.no_grad():
        loss = float(baseline_loss(net, torch.from_numpy(x)[:, None], torch.from_numpy(y)[:, None]))
    net.train()
    return loss


def train_baseline_stage(cfg: DeskConfig, train, work: Path, log: Log) -> Path:
    """Train the regression baseline until held-out loss stops improving.

    The held-out split is a block of whole trajectories; the best weights
    seen on it are kept.
    """
    path = work / "baseline.ckpt"
    done = work / "baseline.done"
    if done.exists():
        return path
    n_val = max(1, int(round(cfg.train_samples * cfg.baseline_val_fraction)))
    val = train.sample_index >= cfg.train_samples - n_val
    xs, ys, xv, yv = train.inputs[~val], train.targets[~val], train.inputs[val], train.targets[val]
    net = build_baseline(reduced_config(cfg.size, in_channels=1))
    net.trained_steps = 0
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    best, best_step, stale, step = float("inf"), 0, 0, 0
    while step < cfg.baseline_max_steps and stale < cfg.baseline_patience:
        train_baseline(net, xs, ys, cfg.baseline_chunk, cfg.batch_size, cfg.lr, seed=cfg.master_seed,
                       optimizer=opt, start_step=step)
        step += cfg.baseline_chunk
        v = _val_loss(net, xv, yv)
        if v < best * (1 - 1e-3):
            best, best_step, stale = v, step, 0
            save_checkpoint(path, net, MODEL_DETERMINISTIC, DiffusionConfig(), step,
                            extra={"val_loss": v})
        else:
            stale += 1
        log(f"baseline step {step} val loss {v:.5f} (best {best:.5f} at {best_step})")
    done.write_text(f"best_step={best_step}\nval_loss={best}\nsteps_run={step}\n")
    return path


def run(cfg: DeskConfig, work, force: bool = False) -> dict:
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    results_path = work / "results.json"
    if results_path.exists() and not force:
        cached = json.loads(results_path.read_text())
        if cached.get("config_digest") == cfg.digest():
            return cached
    torch.set_num_threads(cfg.threads)
    log = Log(work / "log.txt")
    (work / "config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
    t_start = time.time()
    train, test = make_datasets(cfg, work, log)
    base_path = train_baseline_stage(cfg, train, work, log)
    diff_path = train_diffusion_stage(cfg, train, work, log)
    log("sampling")
    report = evaluate_models(diff_path, base_path, test, M=cfg.M, seed=cfg.master_seed, single_member=True,
                             progress=lambda i, n: log(f"pair {i}/{n}") if i % 10 == 0 else None)
    write_report(report, work / "report", mismatch_pngs=False)
    models = report.models
    results = {
        "config_digest": cfg.digest(),
        "config": asdict(cfg),
        "diffusion_config": DiffusionConfig().to_dict(),
        "n_test_pairs": len(test),
        "means": {name: {k: m.mean(k) for k in ("mse", "psnr", "ssim", "hit_rate", "kl")} | {"frechet": m.frechet}
                  for name, m in models.items()},
        "per_pair_mse": {name: m.values("mse").tolist() for name, m in models.items()},
        "per_pair_ssim": {name: m.values("ssim").tolist() for name, m in models.items()},
        "sign_test_m20_vs_m1": asdict(report.sign_test("diffusion", "diffusion_m1")),
        "sign_test_m20_vs_baseline": asdict(report.sign_test("diffusion", "baseline")),
        "wall_seconds": time.time() - t_start,
    }
    results_path.write_text(json.dumps(results, indent=1))
    log(f"done: {json.dumps(results['means'])}")
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir")
    ap.add_argument("--force", action="store_true", help="ignore cached results")
    ap.add_argument("--diffusion-steps", type=int)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args(argv)
    cfg = DeskConfig()
    if args.diffusion_steps:
        cfg = replace(cfg, diffusion_steps=args.diffusion_steps)
    if args.threads:
        cfg = replace(cfg, threads=args.threads)
    res = run(cfg, args.workdir, args.force)
    json.dump(res["means"], sys.stdout, indent=1)
    print()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
