"""``pyrocast`` command line: simulate, build datasets, train, sample, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error (including
missing or unreadable input files), 4 any other runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .ca import simulate
from .checkpoint import MODEL_DETERMINISTIC, MODEL_DIFFUSION, MODELS, load_checkpoint, save_checkpoint
from .config import DATASET_SIZES, RunConfig, load_config
from .dataset import (
    KIND_ENSEMBLE,
    binarize,
    export_png,
    load_dataset,
    make_ensemble_dataset,
    make_training_dataset,
    sample_ignition,
    save_dataset,
    save_trajectory,
)
from .diffusion import DiffusionConfig, ensemble_predict, make_optimizer, schedule_for, train_diffusion
from .errors import CheckpointMismatch, ConfigError, DataError, InvalidConfig, PyrocastError, ShapeMismatch
from .evaluate import evaluate_models, write_report
from .rng import make_rng
from .terrain import load_terrain, synthetic_terrain
from .unet import ResUNet, describe, format_table, train_baseline

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


# ------------------------------------------------------------------ helpers

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def echo_config(cfg: RunConfig, out: Path, command: str, inputs=()) -> None:
    """Write the resolved config and the hashes of all input files."""
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    lines = [f"config\t{cfg.digest()}"]
    for p in inputs:
        if p is not None:
            lines.append(f"{p}\t{file_digest(p)}")
    (out / f"{command}.inputs.sha256").write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_terrain(cfg: RunConfig):
    t = cfg["terrain"]
    if t["path"]:
        return load_terrain(t["path"], cell_size=t["cell_size"])
    return synthetic_terrain(t["height"], t["width"], t["seed"], relief=t["relief"],
                             unburnable_fraction=t["unburnable_fraction"], correlation=t["correlation"],
                             cell_size=t["cell_size"])


def parse_cell(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise InvalidConfig(f"ignition {text!r} is not of the form row,col") from None
    return r, c


def read_frame(path) -> np.ndarray:
    """Read a conditioning frame from ``.npy``, PNG or whitespace text."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        frame = np.load(path)
    elif suffix == ".png":
        frame = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    else:
        frame = np.loadtxt(path, ndmin=2)
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 2:
        raise ShapeMismatch(f"{path}: expected a 2-D frame, got shape {frame.shape}")
    return frame


class LossLog:
    """Append-only ``step<TAB>loss`` file."""

    def __init__(self, path: Path, every: int = 1):
        self.path, self.every = path, every
        self.f = open(path, "a", encoding="utf-8")

    def __call__(self, step: int, loss: float) -> None:
        if step % self.every == 0:
            self.f.write(f"{step}\t{loss:.8g}\n")

    def close(self):
        self.f.close()


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    terrain, params = build_terrain(cfg), cfg.ca_params()
    if args.ignite:
        ignition = [parse_cell(s) for s in args.ignite]
    else:
        ignition = [sample_ignition(terrain, make_rng(cfg.master_seed, 0))]
    steps = cfg["ca"]["n_steps"] if args.steps is None else args.steps
    traj = simulate(terrain, params, ignition, steps, seed=cfg.master_seed)
    echo_config(cfg, out, "simulate", [cfg["terrain"]["path"] or None])
    save_trajectory(out / "trajectory.pctr", traj.states)
    if args.png_every:
        frames = out / "frames"
        frames.mkdir(exist_ok=True)
        for k in range(0, len(traj.states), args.png_every):
            export_png(binarize(traj.states[k]), frames / f"step_{k:04d}.png")
    print(f"wrote {len(traj.states)} frames to {out / 'trajectory.pctr'}")
    return EXIT_OK


def cmd_dataset(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    d = cfg["dataset"]
    kind = args.kind or d["kind"]
    if kind not in DATASET_SIZES:
        raise InvalidConfig(f"dataset kind must be train or ensemble, got {kind!r}")
    n = args.n or d["n"] or DATASET_SIZES[kind]
    terrain, params = build_terrain(cfg), cfg.ca_params()
    if kind == "train":
        data = make_training_dataset(terrain, params, n, d["stride"], d["n_steps"], cfg.master_seed, args.workers)
    else:
        m = args.m or d["m"]
        data = make_ensemble_dataset(terrain, params, n, m, d["stride"], d["n_steps"], cfg.master_seed,
                                     workers=args.workers)
    echo_config(cfg, out, "dataset", [cfg["terrain"]["path"] or None])
    path = out / f"{kind}.pcds"
    save_dataset(path, data)
    print(f"wrote {len(data)} pairs to {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    tr = cfg["train"]
    model = args.model
    data = load_dataset(args.data)
    h, w = data.shape
    if h != w:
        raise CheckpointMismatch(f"networks need square frames, dataset has {h}x{w}")
    steps = tr["steps"] if args.steps is None else args.steps
    dcfg = cfg.diffusion_config()
    ckpt_path = out / f"{model}.ckpt"
    net_cfg = cfg.net_config(in_channels=2 if model == MODEL_DIFFUSION else 1, image_size=h)
    if ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path, expect_model=model, lr=tr["lr"])
        if ckpt.net_config != net_cfg:
            raise CheckpointMismatch(f"{ckpt_path}: stored network config differs from the requested one")
        net, opt, start = ckpt.net, ckpt.optimizer, ckpt.step
        if model == MODEL_DIFFUSION and ckpt.diffusion != dcfg:
            raise CheckpointMismatch(f"{ckpt_path}: stored diffusion config differs from the requested one")
    else:
        net = ResUNet(net_cfg)
        net.trained_steps = 0
        opt, start = None, 0
    opt = opt or (make_optimizer(net, tr["lr"]) if model == MODEL_DIFFUSION
                  else torch.optim.Adam(net.parameters(), lr=tr["lr"]))
    echo_config(cfg, out, "train", [args.data])
    log = LossLog(out / f"loss_{model}.tsv")
    schedule = schedule_for(dcfg)
    step, end = start, start + steps
    try:
        while step < end:
            n = min(tr["checkpoint_every"] or steps, end - step)
            if model == MODEL_DIFFUSION:
                train_diffusion(net, data.inputs, data.targets, n, schedule, tr["batch_size"], tr["lr"],
                                seed=tr["seed"], grad_clip=tr["grad_clip"] or None, optimizer=opt,
                                start_step=step, log=log)
            else:
                train_baseline(net, data.inputs, data.targets, n, tr["batch_size"], tr["lr"], seed=tr["seed"],
                               grad_clip=tr["grad_clip"] or None, optimizer=opt, start_step=step, log=log)
            step += n
            save_checkpoint(ckpt_path, net, model, dcfg, step, opt)
    finally:
        log.close()
    print(f"{model} trained to step {step}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    ckpt = load_checkpoint(args.ckpt, expect_model=MODEL_DIFFUSION)
    base = ckpt.diffusion.to_dict()
    if args.eta is not None:
        base["eta"] = args.eta
    if args.S is not None:
        base["S"] = args.S
    dcfg = DiffusionConfig(**base)
    frame = read_frame(args.condition)
    size = ckpt.net_config.image_size
    if frame.shape != (size, size):
        raise CheckpointMismatch(f"network expects {size}x{size} frames, condition is {frame.shape}")
    M = args.M or cfg["eval"]["M"]
    seed = cfg.master_seed if args.seed is None else args.seed
    pred = ensemble_predict(ckpt.net, torch.from_numpy(frame), M, dcfg, seed=seed)
    echo_config(cfg, out, "sample", [args.ckpt, args.condition])
    members = pred.members.numpy()
    for i, m in enumerate(members):
        np.save(out / f"member_{i:03d}.npy", m)
        export_png(m, out / f"member_{i:03d}.png")
    np.save(out / "mean.npy", pred.mean.numpy())
    export_png(pred.mean.numpy(), out / "mean.png")
    print(f"wrote {M} members and their mean to {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    e = cfg["eval"]
    data = load_dataset(args.data)
    if data.kind != KIND_ENSEMBLE:
        print("warning: evaluating against a training dataset (binary targets)", file=sys.stderr)
    diff = load_checkpoint(args.diffusion_ckpt)
    base = load_checkpoint(args.baseline_ckpt, expect_model=MODEL_DETERMINISTIC)
    M = args.M or e["M"]
    dcfg = diff.diffusion
    if args.eta is not None or args.S is not None:
        d = dcfg.to_dict()
        d.update({k: v for k, v in (("eta", args.eta), ("S", args.S)) if v is not None})
        dcfg = DiffusionConfig(**d)
    report = evaluate_models(diff, base, data, M, dcfg, seed=e["seed"], epsilon=e["epsilon"],
                             thresholds=cfg.thresholds(), single_member=args.single_member)
    report.header["config_hash"] = cfg.digest()
    report.header["diffusion_ckpt_sha256"] = file_digest(args.diffusion_ckpt)
    report.header["baseline_ckpt_sha256"] = file_digest(args.baseline_ckpt)
    report.header["dataset_sha256"] = file_digest(args.data)
    echo_config(cfg, out, "eval", [args.diffusion_ckpt, args.baseline_ckpt, args.data])
    write_report(report, out, mismatch_pngs=e["mismatch_pngs"])
    for name, m in report.models.items():
        print(f"{name}: mse={m.mean('mse'):.6g} ssim={m.mean('ssim'):.6g}")
    return EXIT_OK


def cmd_describe_net(cfg: RunConfig, args) -> int:
    if args.preset:
        cfg.set("net", "preset", args.preset)
    net_cfg = cfg.net_config(in_channels=args.in_channels)
    print(format_table(describe(net_cfg)))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "describe-net": cmd_describe_net,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pyrocast", description="Wildfire spread CA and diffusion ensembles.")
    ap.add_argument("--config", help="INI file with [run], [terrain], [ca], [dataset], [diffusion], [net], "
                                     "[train] and [eval] sections")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override a config value (repeatable)")
    ap.add_argument("--out", help="output directory (overrides run.output_dir)")
    ap.add_argument("--seed", type=int, dest="master_seed", help="master seed (overrides run.master_seed)")
    ap.add_argument("--threads", type=int, help="worker/thread cap (default: $PYROCAST_THREADS or 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one CA trajectory")
    p.add_argument("--ignite", action="append", metavar="R,C", help="ignition cell (repeatable)")
    p.add_argument("--steps", type=int)
    p.add_argument("--png-every", type=int, default=0, metavar="K")

    p = sub.add_parser("dataset", help="generate a training or ensemble dataset")
    p.add_argument("--kind", choices=sorted(DATASET_SIZES))
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)

    p = sub.add_parser("train", help="train the diffusion model or the deterministic baseline")
    p.add_argument("--model", choices=MODELS, default=MODEL_DIFFUSION)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("sample", help="ensemble forecast for one conditioning frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--condition", required=True, help="frame file (.npy, .png or text)")
    p.add_argument("--M", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--S", type=int)
    p.add_argument("--sample-seed", type=int, dest="seed")

    p = sub.add_parser("eval", help="compare diffusion ensemble and baseline on an ensemble dataset")
    p.add_argument("--diffusion-ckpt", required=True)
    p.add_argument("--baseline-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--M", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--S", type=int)
    p.add_argument("--single-member", action="store_true", help="also score the first member alone")

    p = sub.add_parser("describe-net", help="print the layer/parameter table")
    p.add_argument("--preset", choices=("paper", "reduced"))
    p.add_argument("--in-channels", type=int, default=2)
    return ap


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("PYROCAST_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidConfig(f"PYROCAST_THREADS={env!r} is not an integer") from None
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.out:
            cfg.set("run", "output_dir", args.out)
        if args.master_seed is not None:
            cfg.set("run", "master_seed", str(args.master_seed))
        args.workers = resolve_threads(args.threads)
        torch.set_num_threads(args.workers)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PyrocastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
