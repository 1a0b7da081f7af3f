"""Attention Res-UNet noise predictor and its deterministic twin.

Layout for the default (64x64, two input channels) configuration::

    input conv 3x3            2 -> 128
    down   64: res 128, res 128                      -> downsample
           32: res 128->256, res 256, attention      -> downsample
           16: res 256, res 256                      -> downsample
            8: res 256, res 256
    bottleneck: res, attention, res
    up      8: res 256+256, res 256+256              -> upsample
           16: res 256+256, res 256+256              -> upsample
           32: res 256+256, res 256+256, attention   -> upsample
           64: res 256+128 -> 128, res 128+128 -> 128
    output GroupNorm, SiLU, conv 3x3 128 -> 1

Every up-path residual block concatenates the down-path residual output of
the same resolution (last in, first out). The diffusion network sees
``x_t`` and the conditioning frame stacked as two channels; the baseline sees
the conditioning frame alone with the time index pinned to 0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidConfig, ShapeMismatch


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 2
    out_channels: int = 1
    base_channels: int = 128
    stage_channels: tuple[int, ...] = (128, 256, 256, 256)
    blocks_per_stage: int = 2
    down_attention: tuple[int, ...] = (32,)
    up_attention: tuple[int, ...] = (32,)
    bottleneck_attention: bool = True
    norm_groups: int = 32
    dropout: float = 0.1
    attention_heads: int = 4
    time_embed_dim: int = 512
    image_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "down_attention", tuple(sorted(int(r) for r in self.down_attention)))
        object.__setattr__(self, "up_attention", tuple(sorted(int(r) for r in self.up_attention)))
        self.validate()

    def validate(self) -> None:
        chans = (self.in_channels, self.out_channels, self.base_channels, self.time_embed_dim,
                 self.blocks_per_stage, *self.stage_channels)
        if not self.stage_channels or min(chans) < 1:
            raise InvalidConfig("channel counts and block counts must be positive")
        if self.base_channels % 2:
            raise InvalidConfig("base_channels must be even (sinusoidal embedding)")
        factor = 2 ** (len(self.stage_channels) - 1)
        if self.image_size % factor:
            raise InvalidConfig(f"image size {self.image_size} is not divisible by {factor}")
        for c in (self.base_channels, *self.stage_channels):
            if c % self.norm_groups:
                raise InvalidConfig(f"{c} channels are not divisible into {self.norm_groups} groups")
        for c, r in zip(self.stage_channels, self.resolutions):
            if (r in self.down_attention or r in self.up_attention) and c % self.attention_heads:
                raise InvalidConfig(f"{c} channels are not divisible into {self.attention_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")

    @property
    def resolutions(self) -> list[int]:
        return [self.image_size // 2 ** i for i in range(len(self.stage_channels))]

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_CONFIG = NetConfig()


def reduced_config(image_size: int = 32, in_channels: int = 2) -> NetConfig:
    """Desk-scale network: base 32 channels, stages (32, 64, 64)."""
    return NetConfig(in_channels=in_channels, base_channels=32, stage_channels=(32, 64, 64),
                     down_attention=(image_size // 2,), up_attention=(image_size // 2,),
                     norm_groups=8, attention_heads=4, time_embed_dim=128, image_size=image_size)


def sinusoidal_embedding(t: torch.Tensor, dim: int, base: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, embed_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim))

    def forward(self, t):
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.base_dim).to(dtype))


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_ch: int, groups: int, dropout: float):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv1 = nn.Sequential(nn.GroupNorm(groups, in_ch), nn.SiLU(), nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.time_emb = nn.Sequential(nn.SiLU(), nn.Linear(time_ch, out_ch))
        self.conv2 = nn.Sequential(nn.GroupNorm(groups, out_ch), nn.SiLU(), nn.Dropout(dropout),
                                   nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.shortcut = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x, emb):
        h = self.conv1(x) + self.time_emb(emb)[:, :, None, None]
        return self.conv2(h) + self.shortcut(x)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, groups: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1, bias=False)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        # (b, heads, positions, head_dim)
        out = F.scaled_dot_product_attention(q.transpose(-1, -2), k.transpose(-1, -2), v.transpose(-1, -2))
        out = out.transpose(-1, -2).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ResUNet(nn.Module):
    def __init__(self, config: NetConfig, zero_init_output: bool = True):
        super().__init__()
        config.validate()
        self.config = cfg = config
        g, td = cfg.norm_groups, cfg.time_embed_dim
        self.time_embedding = TimeEmbedding(cfg.base_channels, td)
        self.input_conv = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        self.down = nn.ModuleList()
        skip_channels = []
        ch = cfg.base_channels
        for i, (out_ch, res) in enumerate(zip(cfg.stage_channels, cfg.resolutions)):
            stage = nn.ModuleDict()
            stage["blocks"] = nn.ModuleList()
            for _ in range(cfg.blocks_per_stage):
                stage["blocks"].append(ResidualBlock(ch, out_ch, td, g, cfg.dropout))
                ch = out_ch
                skip_channels.append(ch)
            if res in cfg.down_attention:
                stage["attention"] = AttentionBlock(ch, g, cfg.attention_heads)
            if i < len(cfg.stage_channels) - 1:
                stage["downsample"] = Downsample(ch)
            self.down.append(stage)

        self.mid1 = ResidualBlock(ch, ch, td, g, cfg.dropout)
        self.mid_attention = AttentionBlock(ch, g, cfg.attention_heads) if cfg.bottleneck_attention else None
        self.mid2 = ResidualBlock(ch, ch, td, g, cfg.dropout)

        self.up = nn.ModuleList()
        for i in reversed(range(len(cfg.stage_channels))):
            out_ch, res = cfg.stage_channels[i], cfg.resolutions[i]
            stage = nn.ModuleDict()
            stage["blocks"] = nn.ModuleList()
            for _ in range(cfg.blocks_per_stage):
                stage["blocks"].append(ResidualBlock(ch + skip_channels.pop(), out_ch, td, g, cfg.dropout))
                ch = out_ch
            if res in cfg.up_attention:
                stage["attention"] = AttentionBlock(ch, g, cfg.attention_heads)
            if i > 0:
                stage["upsample"] = Upsample(ch)
            self.up.append(stage)

        self.output = nn.Sequential(nn.GroupNorm(g, ch), nn.SiLU(), nn.Conv2d(ch, cfg.out_channels, 3, padding=1))
        if zero_init_output:
            nn.init.zeros_(self.output[-1].weight)
            nn.init.zeros_(self.output[-1].bias)
        self.trace: list[tuple[str, tuple]] | None = None

    @property
    def output_conv(self) -> nn.Conv2d:
        return self.output[-1]

    def _record(self, name, h):
        if self.trace is not None:
            self.trace.append((name, tuple(h.shape)))

    def forward(self, x, condition=None, t=None):
        """Predict noise (diffusion net) or the next frame (baseline).

        ``x`` and ``condition`` are ``(B, 1, H, W)`` tensors; ``t`` is a length-B
        integer tensor or an int. A missing ``t`` means index 0.
        """
        cfg = self.config
        if condition is not None:
            if condition.shape != x.shape:
                raise ShapeMismatch(f"condition {tuple(condition.shape)} vs input {tuple(x.shape)}")
            x = torch.cat([x, condition], dim=1)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeMismatch(f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        factor = 2 ** (len(cfg.stage_channels) - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeMismatch(f"spatial size {tuple(x.shape[-2:])} is not divisible by {factor}")
        b = x.shape[0]
        if t is None:
            t = 0
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        emb = self.time_embedding(t.reshape(-1).expand(b) if t.numel() == 1 else t)

        h = self.input_conv(x)
        skips = []
        for i, stage in enumerate(self.down):
            for j, block in enumerate(stage["blocks"]):
                h = block(h, emb)
                if j == len(stage["blocks"]) - 1 and "attention" in stage:
                    h = stage["attention"](h)
                self._record(f"down{i}.res{j}", h)
                skips.append(h)
            if "downsample" in stage:
                h = stage["downsample"](h)
        h = self.mid1(h, emb)
        if self.mid_attention is not None:
            h = self.mid_attention(h)
        h = self.mid2(h, emb)
        for i, stage in enumerate(self.up):
            for j, block in enumerate(stage["blocks"]):
                skip = skips.pop()
                self._record(f"up{i}.res{j}.skip", skip)
                self._record(f"up{i}.res{j}.input", h)
                h = block(torch.cat([h, skip], dim=1), emb)
            if "attention" in stage:
                h = stage["attention"](h)
            if "upsample" in stage:
                h = stage["upsample"](h)
        return self.output(h)


def build_network(config: NetConfig = PAPER_CONFIG, zero_init_output: bool = True) -> ResUNet:
    return ResUNet(config, zero_init_output)


def build_baseline(config: NetConfig = PAPER_CONFIG) -> ResUNet:
    """Same backbone with a single input channel (the current frame)."""
    return ResUNet(replace(config, in_channels=1))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


@dataclass
class LayerRow:
    stage: str
    layer: str
    output_shape: tuple
    kernel: str
    in_channels: str
    out_channels: str
    params: int


def describe(config: NetConfig = PAPER_CONFIG) -> list[LayerRow]:
    """Per-layer table of the network built from ``config``.

    Parameter counts are read off the instantiated modules.
    """
    net = build_network(config)
    cfg, n = config, count_parameters
    rows = [
        LayerRow("Input", "Time Embedding", (1, cfg.time_embed_dim), "2xLinear + SiLU",
                 f"{cfg.base_channels} -> {cfg.time_embed_dim}",
                 f"{cfg.time_embed_dim} -> {cfg.time_embed_dim}", n(net.time_embedding)),
        LayerRow("Input", "Conv2d (input conv)", (1, cfg.base_channels, cfg.image_size, cfg.image_size), "3x3",
                 str(cfg.in_channels), str(cfg.base_channels), n(net.input_conv)),
    ]

    def res_row(stage, block, res, skip=None):
        name = "ResidualBlock (skip)" if skip else "ResidualBlock"
        ins = f"{block.in_ch - skip}+{skip}" if skip else str(block.in_ch)
        return LayerRow(stage, name, (1, block.out_ch, res, res), "3x3", ins, str(block.out_ch), n(block))

    def attn_row(stage, block, ch, res):
        return LayerRow(stage, "AttentionBlock", (1, ch, res, res), "1x1(QKV)+1x1(Proj)", str(ch), str(ch), n(block))

    for stage, res in zip(net.down, cfg.resolutions):
        for block in stage["blocks"]:
            rows.append(res_row("Down sample", block, res))
        if "attention" in stage:
            rows.append(attn_row("Down sample", stage["attention"], block.out_ch, res))
        if "downsample" in stage:
            rows.append(LayerRow("Down sample", "Downsample", (1, block.out_ch, res // 2, res // 2),
                                 "3x3 (stride=2)", str(block.out_ch), str(block.out_ch), n(stage["downsample"])))
    res, ch = cfg.resolutions[-1], cfg.stage_channels[-1]
    rows.append(res_row("Bottleneck", net.mid1, res))
    if net.mid_attention is not None:
        rows.append(attn_row("Bottleneck", net.mid_attention, ch, res))
    rows.append(res_row("Bottleneck", net.mid2, res))
    prev = ch
    for stage, res in zip(net.up, reversed(cfg.resolutions)):
        for block in stage["blocks"]:
            rows.append(res_row("Up sample", block, res, skip=block.in_ch - prev))
            prev = block.out_ch
        if "attention" in stage:
            rows.append(attn_row("Up sample", stage["attention"], prev, res))
        if "upsample" in stage:
            rows.append(LayerRow("Up sample", "Upsample", (1, prev, res * 2, res * 2), "nearest + 3x3",
                                 str(prev), str(prev), n(stage["upsample"])))
    rows.append(LayerRow("Output", "GroupNorm + SiLU", (1, prev, cfg.image_size, cfg.image_size), "-",
                         str(prev), str(prev), n(net.output[0])))
    rows.append(LayerRow("Output", "Conv2d (output conv)", (1, cfg.out_channels, cfg.image_size, cfg.image_size),
                         "3x3", str(prev), str(cfg.out_channels), n(net.output_conv)))
    assert sum(r.params for r in rows) == n(net), "describe() missed a parameterised layer"
    return rows


def format_table(rows: list[LayerRow]) -> str:
    header = ("Stage", "Layer Type", "Output Shape", "Kernel", "In_Channels", "Out_Channels", "Param #")
    body = [(r.stage, r.layer, str(r.output_shape), r.kernel, r.in_channels, r.out_channels, f"{r.params:,}")
            for r in rows]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("-" * len(lines[0]))
    for row in body:
        lines.append("  ".join(v.rjust(w) if i == 6 else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths))))
    lines.append(f"Total Param #: {sum(r.params for r in rows):,}")
    return "\n".join(lines)


def _frames(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    return x[:, None] if x.ndim == 3 else x


def baseline_loss(net: ResUNet, x_n, x_next):
    return F.mse_loss(net(x_n), x_next)


def train_baseline(net: ResUNet, inputs, targets, steps: int, batch_size: int = 16, lr: float = 1e-4,
                   seed: int = 0, grad_clip: float | None = 1.0, optimizer=None, start_step: int = 0,
                   log=None):
    """Direct MSE regression from the current frame to the next one."""
    from .diffusion import iterate_batches
    from .rng import torch_generator

    dtype = next(net.parameters()).dtype
    inputs, targets = _frames(inputs).to(dtype), _frames(targets).to(dtype)
    if inputs.shape != targets.shape:
        raise ShapeMismatch(f"inputs {tuple(inputs.shape)} vs targets {tuple(targets.shape)}")
    optimizer = optimizer or torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch_generator(seed, start_step)
    batches = iterate_batches(len(inputs), batch_size, gen)
    net.train()
    for step in range(start_step + 1, start_step + steps + 1):
        idx = next(batches)
        optimizer.zero_grad(set_to_none=True)
        loss = baseline_loss(net, inputs[idx], targets[idx])
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
        optimizer.step()
        net.trained_steps = getattr(net, "trained_steps", 0) + 1
        if log is not None:
            log(step, float(loss.detach()))
    return optimizer


@torch.no_grad()
def baseline_predict(net: ResUNet, x_n) -> torch.Tensor:
    """Deterministic next-frame forecast clamped to [0, 1]."""
    was_training = net.training
    net.eval()
    try:
        dtype = next(net.parameters()).dtype
        return net(_frames(x_n).to(dtype)).clamp(0.0, 1.0)
    finally:
        net.train(was_training)
