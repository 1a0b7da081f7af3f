import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from pyrocast.diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    ddim_sample,
    ddim_sigma,
    ddim_step,
    ddpm_reverse_mean,
    diffusion_loss,
    ensemble_predict,
    forward_sample,
    make_linear_schedule,
    make_optimizer,
    reverse_mean_from_eps,
    scale,
    select_timesteps,
    train_diffusion,
    training_step,
    unscale,
)
from pyrocast.errors import (
    InvalidConfig,
    InvalidEnsembleSize,
    InvalidScheduleBounds,
    ShapeMismatch,
    UntrainedNetWarning,
)
from pyrocast.unet import NetConfig, build_network


class ZeroNet(nn.Module):
    """Noise predictor stub that always answers 0."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(()))
        self.trained_steps = 1

    def forward(self, x, condition=None, t=None):
        return torch.zeros_like(x) + 0 * self.w


class OracleNet(nn.Module):
    def __init__(self, eps):
        super().__init__()
        self.eps = eps
        self.w = nn.Parameter(torch.zeros(()))

    def forward(self, x, condition=None, t=None):
        return self.eps + 0 * self.w


def tiny_config(**kw):
    base = dict(base_channels=8, stage_channels=(8, 16), down_attention=(4,), up_attention=(4,),
                norm_groups=4, attention_heads=2, time_embed_dim=16, image_size=8, dropout=0.0)
    base.update(kw)
    return NetConfig(**base)


def custom_schedule(alphas):
    alpha = np.asarray(alphas, dtype=np.float64)
    return NoiseSchedule(1 - alpha, alpha, np.cumprod(alpha))


# ---------------------------------------------------------------- schedule

def test_two_step_schedule():
    s = make_linear_schedule(2, 0.1, 0.2)
    assert s.beta.tolist() == pytest.approx([0.1, 0.2])
    assert s.alpha_bar.tolist() == pytest.approx([0.9, 0.72], abs=1e-15)


def test_single_step_schedule():
    assert make_linear_schedule(1, 0.003, 0.02).beta.tolist() == [0.003]


@given(st.integers(1, 1000), st.floats(1e-6, 0.1), st.floats(0.11, 0.9))
def test_schedule_algebra(T, lo, hi):
    s = make_linear_schedule(T, lo, hi)
    assert np.all(np.diff(s.beta) > 0) or T == 1
    # strictly decreasing until the product underflows to zero
    live = s.alpha_bar[s.alpha_bar > 1e-300]
    assert np.all(np.diff(live) < 0)
    assert np.all((s.alpha_bar >= 0) & (s.alpha_bar < 1)) and s.alpha_bar[0] > 0
    assert np.allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], rtol=1e-12)


def test_default_schedule_ends_in_noise():
    s = make_linear_schedule(600)
    assert s.alpha_bar[-1] < 1e-3
    # 1000 steps give the usual 1e-4..0.02; shorter chains keep the same beta sum
    assert make_linear_schedule(1000).beta[[0, -1]].tolist() == pytest.approx([1e-4, 0.02])
    assert s.beta.sum() == pytest.approx(make_linear_schedule(1000).beta.sum())
    assert DiffusionConfig().beta_end == pytest.approx(0.02 * 1000 / 600)


@pytest.mark.parametrize("lo, hi, T", [(0.0, 0.02, 10), (0.02, 0.01, 10), (1e-4, 1.0, 10), (1e-4, 0.02, 0)])
def test_schedule_bounds(lo, hi, T):
    with pytest.raises(InvalidScheduleBounds):
        make_linear_schedule(T, lo, hi)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        DiffusionConfig(T=600, S=601)
    with pytest.raises(InvalidConfig):
        DiffusionConfig(eta=1.5)


# ---------------------------------------------------------------- forward process

def test_forward_sample_closed_form():
    s = make_linear_schedule(2, 0.1, 0.2)
    x0 = torch.ones(3, 3, dtype=torch.float64)
    assert torch.allclose(forward_sample(x0, 2, s, torch.zeros_like(x0)), math.sqrt(0.72) * x0)
    out = forward_sample(x0, 2, s, torch.ones_like(x0))
    # sqrt(0.72) + sqrt(0.28) = 1.377678...
    assert torch.allclose(out, torch.full_like(x0, math.sqrt(0.72) + math.sqrt(0.28)), atol=1e-12)
    assert float(out[0, 0]) == pytest.approx(1.37768, abs=5e-6)


def test_forward_sample_per_sample_t():
    s = make_linear_schedule(600)
    x0 = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    eps = torch.zeros_like(x0)
    out = forward_sample(x0, torch.tensor([1, 600]), s, eps)
    assert float(out[0, 0, 0, 0]) == pytest.approx(math.sqrt(s.alpha_bar[0]))
    assert float(out[1, 0, 0, 0]) == pytest.approx(math.sqrt(s.alpha_bar[-1]))


@pytest.mark.parametrize("t", [1, 300, 600])
def test_forward_marginals(t):
    s = make_linear_schedule(600)
    n = 10_000
    x0 = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
    g = torch.Generator().manual_seed(t)
    eps = torch.randn((n, 2, 2), generator=g, dtype=torch.float64)
    xt = forward_sample(x0.expand(n, 2, 2), t, s, eps)
    ab = s.alpha_bar[t - 1]
    var = 1 - ab
    mean_err = (xt.mean(0) - math.sqrt(ab) * x0).abs()
    assert torch.all(mean_err <= 3 * math.sqrt(var / n))
    var_err = (xt.var(0) - var).abs()
    assert torch.all(var_err <= 3 * var * math.sqrt(2 / (n - 1)))


# ---------------------------------------------------------------- reverse steps

def test_reverse_mean_scalar_example():
    s = NoiseSchedule(np.array([0.1]), np.array([0.9]), np.array([0.72]))
    x = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    mu = reverse_mean_from_eps(x, torch.ones_like(x), 1, s)
    assert float(mu) == pytest.approx((1 - 0.1 / math.sqrt(0.28)) / math.sqrt(0.9), rel=1e-12)
    assert float(mu) == pytest.approx(0.85489, abs=5e-6)


def test_reverse_mean_with_zero_noise():
    s = make_linear_schedule(10)
    x = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    mu = ddpm_reverse_mean(ZeroNet().double(), x, x, 7, s)
    assert torch.allclose(mu, x / math.sqrt(s.alpha[6]))


def test_reverse_mean_matches_true_posterior():
    # with the true noise, the eps-form mean equals the posterior mean of q(x_{t-1} | x_t, x0)
    s = make_linear_schedule(3, 0.1, 0.3)
    x0 = torch.tensor([0.7, -1.0, 1.0], dtype=torch.float64)
    eps = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    for t in (1, 2, 3):
        xt = forward_sample(x0, t, s, eps)
        ab, ab_prev = s.alpha_bar[t - 1], (s.alpha_bar[t - 2] if t > 1 else 1.0)
        beta, alpha = s.beta[t - 1], s.alpha[t - 1]
        posterior = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (math.sqrt(alpha) * (1 - ab_prev) / (1 - ab)) * xt
        assert torch.allclose(reverse_mean_from_eps(xt, eps, t, s), posterior, atol=1e-12)


def test_ddim_sigma_equals_ddpm_std_for_full_sequence():
    s = make_linear_schedule(10)
    taus = select_timesteps(10, 10)
    assert taus == list(range(1, 11))
    for t in taus:
        ab = s.alpha_bar[t - 1]
        ab_prev = s.alpha_bar[t - 2] if t > 1 else 1.0
        expected = math.sqrt(s.beta[t - 1] * (1 - ab_prev) / (1 - ab))
        assert abs(ddim_sigma(s, t, t - 1, 1.0) - expected) <= 1e-12
        assert ddim_sigma(s, t, t - 1, 0.0) == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ddim_step_mean_matches_ddpm_mean(seed):
    rng = np.random.default_rng(seed)
    s = custom_schedule(rng.uniform(0.3, 0.99, 2))
    x = torch.from_numpy(rng.normal(size=5))
    eps = torch.from_numpy(rng.normal(size=5))
    sigma = ddim_sigma(s, 2, 1, 1.0)
    assert sigma == pytest.approx(s.posterior_std(2), rel=1e-12)
    assert torch.allclose(ddim_step(x, eps, 2, 1, s, sigma), reverse_mean_from_eps(x, eps, 2, s), atol=1e-12)


def test_select_timesteps():
    taus = select_timesteps(600, 50)
    assert taus == list(range(12, 601, 12))
    assert select_timesteps(600, 1) == [600]
    assert select_timesteps(7, 7) == list(range(1, 8))
    assert select_timesteps(10, 4) == [3, 5, 8, 10]  # 2.5 and 7.5 round up
    with pytest.raises(InvalidConfig):
        select_timesteps(10, 11)
    with pytest.raises(InvalidConfig):
        select_timesteps(10, 0)


# ---------------------------------------------------------------- sampling

def test_single_step_stub_collapse():
    cfg = DiffusionConfig(T=1, S=1, beta_start=0.05, beta_end=0.5)
    x_T = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    out = ddim_sample(ZeroNet().double(), torch.zeros(4, 4), cfg, x_T=x_T, raw=True)
    assert torch.allclose(out, x_T / math.sqrt(0.95), atol=1e-12)


def test_eta_zero_is_deterministic():
    net = build_network(tiny_config()).double()
    net.trained_steps = 1
    cfg = DiffusionConfig(T=50, S=10, eta=0.0)
    cond = (torch.rand(8, 8) > 0.5).double()
    x_T = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    a = ddim_sample(net, cond, cfg, x_T=x_T, raw=True)
    b = ddim_sample(net, cond, cfg, x_T=x_T, raw=True, generators=torch.Generator().manual_seed(5))
    assert torch.max(torch.abs(a - b)) <= 1e-12


def test_stochastic_sampling_uses_generators():
    net = build_network(tiny_config(), zero_init_output=False)
    net.trained_steps = 1
    cfg = DiffusionConfig(T=50, S=10, eta=1.0)
    cond = torch.zeros(8, 8)
    run = lambda s: ddim_sample(net, cond, cfg, generators=torch.Generator().manual_seed(s))
    assert torch.equal(run(1), run(1))
    assert not torch.equal(run(1), run(2))
    out = run(3)
    assert out.min() >= 0 and out.max() <= 1 and out.shape == (1, 1, 8, 8)


def test_untrained_warning():
    net = build_network(tiny_config())
    net.trained_steps = 0
    with pytest.warns(UntrainedNetWarning):
        ddim_sample(net, torch.zeros(8, 8), DiffusionConfig(T=10, S=2))


def test_ensemble_predict_contract():
    # float64 so batch-size dependent roundoff stays far below the tolerances
    torch.manual_seed(0)
    net = build_network(tiny_config(), zero_init_output=False).double()
    net.trained_steps = 1
    cfg = DiffusionConfig(T=40, S=5, eta=0.5)
    cond = (torch.rand(8, 8, generator=torch.Generator().manual_seed(0)) > 0.5).double()
    one = ensemble_predict(net, cond, 1, cfg, seed=3)
    assert torch.equal(one.mean, one.members[0])
    many = ensemble_predict(net, cond, 6, cfg, seed=3)
    assert torch.allclose(many.mean, many.members.mean(0), atol=1e-6)
    assert many.mean.min() >= 0 and many.mean.max() <= 1
    batched = ensemble_predict(net, cond, 6, cfg, seed=3, batch_size=4)
    assert torch.allclose(batched.members, many.members, atol=1e-9)
    assert torch.allclose(one.members[0], many.members[0], atol=1e-9)
    with pytest.raises(InvalidEnsembleSize):
        ensemble_predict(net, cond, 0, cfg)


def test_identical_members_give_member_as_mean():
    net = ZeroNet()
    cfg = DiffusionConfig(T=20, S=4, eta=0.0)
    x_T = torch.randn(1, 1, 3, 3)
    out = ddim_sample(net, torch.zeros(3, 3), cfg, x_T=x_T.expand(4, 1, 3, 3))
    assert torch.equal(out.mean(0), out[0])


# ---------------------------------------------------------------- training

def test_loss_is_zero_for_a_perfect_predictor():
    s = make_linear_schedule(100)
    x0 = scale(torch.randint(0, 2, (2, 1, 8, 8)).double())
    eps = torch.randn_like(x0)
    loss = diffusion_loss(OracleNet(eps), x0, x0, torch.tensor([3, 70]), eps, s)
    assert float(loss.detach()) == 0.0


def test_training_step_contract():
    s = make_linear_schedule(100)
    net = build_network(tiny_config())
    opt = make_optimizer(net)
    x = torch.randint(0, 2, (3, 8, 8)).float()
    loss = training_step(net, opt, x, x, s, torch.Generator().manual_seed(0))
    assert math.isfinite(loss) and loss >= 0
    assert net.trained_steps == 1
    with pytest.raises(ShapeMismatch):
        training_step(net, opt, x, x[:, :4], s, torch.Generator())


def test_overfits_a_single_pair():
    torch.manual_seed(0)
    s = make_linear_schedule(100)
    net = build_network(tiny_config())
    x_n = torch.zeros(1, 8, 8)
    x_n[0, 3:5, 3:5] = 1
    x_next = torch.zeros(1, 8, 8)
    x_next[0, 2:6, 2:6] = 1
    losses = []
    train_diffusion(net, x_n, x_next, 2000, s, batch_size=1, lr=1e-3, seed=1, log=lambda i, l: losses.append(l))
    initial = np.mean(losses[:100])
    final = np.mean(losses[-100:])
    assert final < 0.1 * initial


def test_scale_round_trip():
    f = torch.tensor([0.0, 0.25, 1.0])
    assert torch.equal(scale(f), torch.tensor([-1.0, -0.5, 1.0]))
    assert torch.equal(unscale(scale(f)), f)
    assert torch.equal(unscale(torch.tensor([-3.0, 3.0])), torch.tensor([0.0, 1.0]))
