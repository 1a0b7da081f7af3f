"""Binary checkpoints for the denoiser and the deterministic baseline.

Layout (little-endian)::

    b"PCKP" | u32 version | u32 header_len | header (UTF-8 JSON)
    | u64 blob_len | float32 blob

The JSON header carries the model kind, the network and diffusion configs,
the step counter and a table ``[name, offset, shape]`` locating every
tensor in the flat blob (offsets in float32 elements). Adam moments, when
saved, are extra tensors named ``adam.exp_avg.<param>`` and
``adam.exp_avg_sq.<param>``. The noise schedule is never stored; it is
rebuilt from the diffusion config on load.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import DiffusionConfig, NoiseSchedule, schedule_for
from .errors import CheckpointMismatch, CorruptFile, VersionMismatch
from .unet import NetConfig, ResUNet

MAGIC = b"PCKP"
VERSION = 1
MODEL_DIFFUSION = "diffusion"
MODEL_DETERMINISTIC = "deterministic"
MODELS = (MODEL_DIFFUSION, MODEL_DETERMINISTIC)


@dataclass
class Checkpoint:
    model: str
    net: ResUNet
    net_config: NetConfig
    diffusion: DiffusionConfig
    step: int
    optimizer: torch.optim.Adam | None = None
    extra: dict = field(default_factory=dict)

    @property
    def schedule(self) -> NoiseSchedule:
        return schedule_for(self.diffusion)


def _adam_tensors(net: ResUNet, optimizer: torch.optim.Optimizer) -> tuple[dict, dict]:
    tensors, meta = {}, {}
    names = {id(p): n for n, p in net.named_parameters()}
    for group in optimizer.param_groups:
        meta = {k: v for k, v in group.items() if k != "params" and isinstance(v, (int, float, bool, tuple))}
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = names[id(p)]
            tensors[f"adam.exp_avg.{name}"] = state["exp_avg"]
            tensors[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"]
            meta.setdefault("steps", {})[name] = float(state["step"])
    return tensors, meta


def save_checkpoint(path, net: ResUNet, model: str, diffusion: DiffusionConfig, step: int,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    if model not in MODELS:
        raise ValueError(f"unknown model kind {model!r}")
    tensors = {n: t.detach() for n, t in net.state_dict().items() if t.is_floating_point()}
    adam = None
    if optimizer is not None:
        adam_tensors, adam = _adam_tensors(net, optimizer)
        tensors.update(adam_tensors)
    table, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.to(torch.float32).contiguous().numpy().astype("<f4", copy=False).ravel()
        table.append([name, offset, list(t.shape)])
        chunks.append(arr)
        offset += arr.size
    header = {
        "model": model,
        "net": net.config.to_dict(),
        "diffusion": diffusion.to_dict(),
        "step": int(step),
        "tensors": table,
        "adam": adam,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(head)))
        f.write(head)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
    tmp.replace(path)


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint")
    if len(raw) < 12:
        raise CorruptFile(f"{path}: truncated header")
    version, head_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = 12 + head_len
    if len(raw) < start + 8:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: bad header ({exc})") from None
    (blob_len,) = struct.unpack_from("<Q", raw, start)
    blob = raw[start + 8:]
    if len(blob) != blob_len:
        raise CorruptFile(f"{path}: blob is {len(blob)} bytes, header says {blob_len}")
    return header, blob


def load_checkpoint(path, expect_model: str | None = None, lr: float | None = None) -> Checkpoint:
    """Rebuild network (and Adam state, if stored) from a checkpoint file."""
    header, blob = read_header(path)
    model = header["model"]
    if expect_model is not None and model != expect_model:
        raise CheckpointMismatch(f"{path}: holds a {model} model, expected {expect_model}")
    net_config = NetConfig(**header["net"])
    diffusion = DiffusionConfig(**header["diffusion"])
    flat = np.frombuffer(blob, dtype="<f4")
    tensors = {}
    for name, offset, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + n > flat.size:
            raise CorruptFile(f"{path}: tensor {name} runs past the blob")
        tensors[name] = torch.from_numpy(flat[offset:offset + n].copy()).reshape(shape)

    net = ResUNet(net_config)
    state = net.state_dict()
    for name, ref in state.items():
        if not ref.is_floating_point():
            continue
        if name not in tensors:
            raise CheckpointMismatch(f"{path}: missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointMismatch(f"{path}: {name} has shape {tuple(tensors[name].shape)}, "
                                     f"network expects {tuple(ref.shape)}")
        state[name] = tensors[name]
    net.load_state_dict(state)
    net.trained_steps = int(header["step"])

    optimizer = None
    adam = header.get("adam")
    if adam is not None:
        optimizer = torch.optim.Adam(net.parameters(), lr=lr if lr is not None else adam.get("lr", 1e-4),
                                     betas=tuple(adam.get("betas", (0.9, 0.999))), eps=adam.get("eps", 1e-8))
        steps = adam.get("steps", {})
        for name, p in net.named_parameters():
            if name in steps:
                optimizer.state[p] = {
                    "step": torch.tensor(steps[name]),
                    "exp_avg": tensors[f"adam.exp_avg.{name}"].clone(),
                    "exp_avg_sq": tensors[f"adam.exp_avg_sq.{name}"].clone(),
                }
    return Checkpoint(model, net, net_config, diffusion, int(header["step"]), optimizer, header.get("extra", {}))
