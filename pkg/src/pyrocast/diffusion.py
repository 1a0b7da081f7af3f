"""Conditional denoising diffusion: schedule, training objective and samplers.

Frames live in [0, 1]; the diffusion runs on ``2 * frame - 1`` so that the
data are roughly zero-mean like the N(0, I) prior, and samples are mapped
back with ``(x + 1) / 2`` clamped to [0, 1]. The conditioning frame is
scaled the same way before being stacked with the noisy latent.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and
``alpha_bar(0) = 1`` by convention.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    InvalidConfig,
    InvalidEnsembleSize,
    InvalidScheduleBounds,
    ShapeMismatch,
    UntrainedNetWarning,
)
from .rng import torch_generator


def default_beta_range(T: int) -> tuple[float, float]:
    """The 1e-4..0.02 linear range of a 1000-step chain, rescaled to ``T`` steps.

    Rescaling by 1000 / T keeps the total noise injected (sum of betas) the
    same, so ``alpha_bar_T`` stays near zero for shorter chains.
    """
    k = 1000.0 / T
    return 1e-4 * k, min(0.02 * k, 0.999)


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 600
    S: int = 50
    eta: float = 0.0
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        if self.T < 1 or not 1 <= self.S <= self.T:
            raise InvalidConfig(f"need 1 <= S <= T, got S={self.S}, T={self.T}")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidConfig(f"eta must lie in [0, 1], got {self.eta}")
        lo, hi = default_beta_range(self.T)
        if self.beta_start is None:
            object.__setattr__(self, "beta_start", lo)
        if self.beta_end is None:
            object.__setattr__(self, "beta_end", hi)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def posterior_std(self, t: int) -> float:
        """DDPM posterior std sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))."""
        return math.sqrt(self.beta[t - 1] * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t)))


def make_linear_schedule(T: int, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear betas; missing endpoints default to ``default_beta_range(T)``."""
    if T < 1:
        raise InvalidScheduleBounds(f"T must be >= 1, got {T}")
    lo, hi = default_beta_range(T)
    beta_start = lo if beta_start is None else beta_start
    beta_end = hi if beta_end is None else beta_end
    if not 0.0 < beta_start < beta_end < 1.0:
        raise InvalidScheduleBounds(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def schedule_for(config: DiffusionConfig) -> NoiseSchedule:
    return make_linear_schedule(config.T, config.beta_start, config.beta_end)


def scale(frame):
    return 2.0 * frame - 1.0


def unscale(x):
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0) if torch.is_tensor(x) else np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def _coef(values, t, like):
    """Gather ``values[t - 1]`` and broadcast against ``like``."""
    if torch.is_tensor(like):
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        out = torch.as_tensor(values, dtype=like.dtype)[t - 1]
        return out.reshape(-1, *([1] * (like.ndim - 1))) if out.numel() > 1 else out.reshape(())
    return values[np.asarray(t) - 1]


def forward_sample(x0, t, schedule: NoiseSchedule, eps):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is an int or per-sample tensor."""
    ab = _coef(schedule.alpha_bar, t, x0)
    if torch.is_tensor(x0):
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_mean_from_eps(x_t, eps, t: int, schedule: NoiseSchedule):
    a, b, ab = schedule.alpha[t - 1], schedule.beta[t - 1], schedule.alpha_bar[t - 1]
    return (x_t - (b / math.sqrt(1.0 - ab)) * eps) / math.sqrt(a)


def ddpm_reverse_mean(net, x_t, condition, t: int, schedule: NoiseSchedule):
    """Mean of p(x^{t-1} | x^t, condition) from the predicted noise."""
    if t < 1:
        raise ValueError("t must be >= 1")
    eps = net(x_t, condition, torch.full((x_t.shape[0],), t, dtype=torch.long))
    return reverse_mean_from_eps(x_t, eps, t, schedule)


def select_timesteps(T: int, S: int) -> list[int]:
    """Ascending ``round(i * T / S)`` for ``i = 1..S`` (half rounds up)."""
    if T < 1 or not 1 <= S <= T:
        raise InvalidConfig(f"need 1 <= S <= T, got S={S}, T={T}")
    return sorted({int(math.floor(i * T / S + 0.5)) for i in range(1, S + 1)})


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab, ab_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)


def ddim_step(x_t, eps, t: int, t_prev: int, schedule: NoiseSchedule, sigma: float, z=None):
    """One update from ``x^t`` to ``x^{t_prev}`` given the predicted noise."""
    ab, ab_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    x0_pred = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    out = math.sqrt(ab_prev) * x0_pred + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
    if z is not None and sigma > 0:
        out = out + sigma * z
    return out


def _as_batch(frame) -> torch.Tensor:
    x = torch.as_tensor(frame)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatch(f"expected (H, W), (B, H, W) or (B, 1, H, W) frames, got {tuple(x.shape)}")
    return x


def _warn_if_untrained(net):
    if getattr(net, "trained_steps", None) == 0:
        warnings.warn("sampling from an untrained network", UntrainedNetWarning, stacklevel=3)


@torch.no_grad()
def ddim_sample(net, condition, config: DiffusionConfig, schedule: NoiseSchedule | None = None,
                generators: list[torch.Generator] | torch.Generator | None = None, x_T=None,
                raw: bool = False) -> torch.Tensor:
    """DDIM reverse process for a batch of conditioning frames.

    Member ``b`` of the batch draws its initial latent and per-step noise
    from ``generators[b]``; a single generator is shared across the batch.
    ``x_T`` overrides the initial draw. Returns ``(B, 1, H, W)`` frames in
    [0, 1], or the unclamped diffusion-space result when ``raw`` is set.
    """
    schedule = schedule or schedule_for(config)
    if schedule.T != config.T:
        raise InvalidConfig(f"schedule has T={schedule.T}, config says {config.T}")
    _warn_if_untrained(net)
    dtype = next(net.parameters()).dtype
    cond = scale(_as_batch(condition).to(dtype))
    b = cond.shape[0]
    if isinstance(generators, torch.Generator) or generators is None:
        generators = [generators] * b
    if len(generators) != b:
        raise ValueError(f"{len(generators)} generators for a batch of {b}")

    def noise():
        return torch.cat([torch.randn(cond.shape[1:], generator=g, dtype=dtype)[None] for g in generators])

    x = noise() if x_T is None else _as_batch(x_T).to(dtype).clone()
    taus = select_timesteps(config.T, config.S)
    was_training = net.training
    net.eval()
    try:
        for i in reversed(range(len(taus))):
            t, t_prev = taus[i], (taus[i - 1] if i > 0 else 0)
            sigma = 0.0 if i == 0 else ddim_sigma(schedule, t, t_prev, config.eta)
            z = noise() if sigma > 0 else None
            eps = net(x, cond, torch.full((b,), t, dtype=torch.long))
            x = ddim_step(x, eps, t, t_prev, schedule, sigma, z)
    finally:
        net.train(was_training)
    return x if raw else unscale(x)


@dataclass
class EnsemblePrediction:
    mean: torch.Tensor
    members: torch.Tensor


def ensemble_predict(net, condition, M: int, config: DiffusionConfig, schedule: NoiseSchedule | None = None,
                     seed: int = 0, batch_size: int | None = None) -> EnsemblePrediction:
    """Run ``M`` DDIM samples for one conditioning frame and average them.

    Member ``i`` uses the generator ``torch_generator(seed, i)``, so the
    members (and the mean) do not depend on ``batch_size``.
    """
    if M < 1:
        raise InvalidEnsembleSize(f"ensemble size must be >= 1, got {M}")
    schedule = schedule or schedule_for(config)
    cond = _as_batch(condition)
    if cond.shape[0] != 1:
        raise ShapeMismatch("ensemble_predict takes a single conditioning frame")
    batch_size = batch_size or M
    members = []
    for start in range(0, M, batch_size):
        idx = range(start, min(M, start + batch_size))
        gens = [torch_generator(seed, i) for i in idx]
        members.append(ddim_sample(net, cond.expand(len(idx), -1, -1, -1), config, schedule, gens))
    members = torch.cat(members)[:, 0]
    mean = members.to(torch.float64).sum(0) / M
    return EnsemblePrediction(mean.to(members.dtype), members)


# ------------------------------------------------------------------- training

def diffusion_loss(net, x0, condition, t, eps, schedule: NoiseSchedule):
    """Mean squared error between true and predicted noise.

    ``x0`` and ``condition`` are already in diffusion scale ([-1, 1]).
    """
    if x0.shape != condition.shape or x0.shape != eps.shape:
        raise ShapeMismatch("target, condition and noise must share one shape")
    x_t = forward_sample(x0, t, schedule, eps)
    return F.mse_loss(net(x_t, condition, t), eps)


def sample_training_inputs(x_next, schedule: NoiseSchedule, generator: torch.Generator):
    b = x_next.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(x_next.shape, generator=generator, dtype=x_next.dtype)
    return t, eps


def training_step(net, optimizer, x_n, x_next, schedule: NoiseSchedule, generator: torch.Generator,
                  grad_clip: float | None = 1.0) -> float:
    """One optimiser step on a batch of (current, next) frames in [0, 1]."""
    x_n, x_next = _as_batch(x_n), _as_batch(x_next)
    if x_n.shape != x_next.shape:
        raise ShapeMismatch(f"input {tuple(x_n.shape)} vs target {tuple(x_next.shape)}")
    dtype = next(net.parameters()).dtype
    x0, cond = scale(x_next.to(dtype)), scale(x_n.to(dtype))
    t, eps = sample_training_inputs(x0, schedule, generator)
    net.train()
    optimizer.zero_grad(set_to_none=True)
    loss = diffusion_loss(net, x0, cond, t, eps, schedule)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
    optimizer.step()
    net.trained_steps = getattr(net, "trained_steps", 0) + 1
    return float(loss.detach())


def make_optimizer(net, lr: float = 1e-4):
    return torch.optim.Adam(net.parameters(), lr=lr)


def iterate_batches(n: int, batch_size: int, generator: torch.Generator):
    """Endless stream of index batches, reshuffled every epoch."""
    while True:
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[start:start + batch_size]


def train_diffusion(net, inputs, targets, steps: int, schedule: NoiseSchedule, batch_size: int = 16,
                    lr: float = 1e-4, seed: int = 0, grad_clip: float | None = 1.0, optimizer=None,
                    start_step: int = 0, log: Callable[[int, float], None] | None = None):
    """Run ``steps`` optimiser steps of the noise-prediction objective."""
    inputs, targets = _as_batch(np.asarray(inputs)), _as_batch(np.asarray(targets))
    optimizer = optimizer or make_optimizer(net, lr)
    gen = torch_generator(seed, start_step)
    batches = iterate_batches(len(inputs), batch_size, gen)
    net.trained_steps = getattr(net, "trained_steps", start_step)
    for step in range(start_step + 1, start_step + steps + 1):
        idx = next(batches)
        loss = training_step(net, optimizer, inputs[idx], targets[idx], schedule, gen, grad_clip)
        if log is not None:
            log(step, loss)
    return optimizer
