"""Independent oracles shared by the unit and acceptance tests."""
import math

import numpy as np
import torch

from pyrocast.diffusion import diffusion_loss, make_linear_schedule, scale
from pyrocast.unet import NetConfig


# ---------------------------------------------------------------- parameter tally

def conv(cin, cout, k, bias=True):
    return cin * cout * k * k + (cout if bias else 0)


def linear(cin, cout):
    return cin * cout + cout


def norm(c):
    return 2 * c


def res_block(cin, cout, temb):
    total = norm(cin) + conv(cin, cout, 3) + linear(temb, cout) + norm(cout) + conv(cout, cout, 3)
    return total + (0 if cin == cout else conv(cin, cout, 1))


def attention(c):
    return norm(c) + conv(c, 3 * c, 1, bias=False) + conv(c, c, 1)


def hand_tally(cfg: NetConfig) -> int:
    """Parameter count of the Res-UNet layout, summed from layer formulas."""
    td, base = cfg.time_embed_dim, cfg.base_channels
    total = linear(base, td) + linear(td, td) + conv(cfg.in_channels, base, 3)
    res = [cfg.image_size >> i for i in range(len(cfg.stage_channels))]
    ch, skips = base, []
    for i, out in enumerate(cfg.stage_channels):
        for _ in range(cfg.blocks_per_stage):
            total += res_block(ch, out, td)
            ch = out
            skips.append(ch)
        if res[i] in cfg.down_attention:
            total += attention(ch)
        if i < len(res) - 1:
            total += conv(ch, ch, 3)
    total += 2 * res_block(ch, ch, td) + (attention(ch) if cfg.bottleneck_attention else 0)
    for i in reversed(range(len(res))):
        out = cfg.stage_channels[i]
        for _ in range(cfg.blocks_per_stage):
            total += res_block(ch + skips.pop(), out, td)
            ch = out
        if res[i] in cfg.up_attention:
            total += attention(ch)
        if i > 0:
            total += conv(ch, ch, 3)
    return total + norm(ch) + conv(ch, cfg.out_channels, 3)


# ---------------------------------------------------------------- finite differences

def gradient_check(net, n_params=12, h=1e-6, seed=0, size=None):
    """Compare autograd and central differences of the noise-prediction loss.

    Returns a list of (name, index, analytic, numeric, relative error) for
    ``n_params`` scalar weights drawn at random across all tensors.
    """
    net = net.double().eval()
    size = size or net.config.image_size
    gen = torch.Generator().manual_seed(seed)
    x0 = scale((torch.rand(2, 1, size, size, generator=gen) > 0.5).double())
    cond = scale((torch.rand(2, 1, size, size, generator=gen) > 0.7).double())
    eps = torch.randn(2, 1, size, size, generator=gen, dtype=torch.float64)
    t = torch.tensor([7, 480])
    schedule = make_linear_schedule(600)

    def loss():
        return diffusion_loss(net, x0, cond, t, eps, schedule)

    net.zero_grad()
    loss().backward()
    named = [(n, p) for n, p in net.named_parameters()]
    rng = np.random.default_rng(seed)
    out = []
    for k in rng.choice(len(named), size=n_params, replace=False):
        name, p = named[k]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss())
            p[idx] = orig - h
            down = float(loss())
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        out.append((name, idx, analytic, numeric, rel))
    return out


def paper_reduced_net():
    from pyrocast.unet import build_network, reduced_config
    from dataclasses import replace
    torch.manual_seed(0)
    net = build_network(replace(reduced_config(32), dropout=0.0), zero_init_output=False)
    return net
