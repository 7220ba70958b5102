import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentshield.diffusion import (
    ScheduleError,
    check_schedule,
    ddim_sample,
    ddim_timesteps,
    denoiser_loss,
    make_schedule,
    q_sample,
)


class GaussianOptimal(torch.nn.Module):
    """Exact noise predictor for data z0 ~ N(0, s^2 I)."""

    def __init__(self, schedule, s):
        super().__init__()
        self.ab = torch.as_tensor(schedule.alpha_bars, dtype=torch.float64)
        self.s = s

    def forward(self, z, t, cond=None):
        ab = self.ab[t].reshape(-1, *([1] * (z.dim() - 1)))
        return (1 - ab).sqrt() * z / (ab * self.s ** 2 + 1 - ab)


def scalar_ddim_gain(alpha_bars, ts, s):
    """Independent scalar recurrence: DDIM with the Gaussian-optimal predictor
    multiplies z by a fixed factor at every step."""
    gain = 1.0
    for i, t in enumerate(ts):
        a = alpha_bars[t]
        a_next = alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        v = a * s * s + 1 - a
        eps_coef = math.sqrt(1 - a) / v
        x0_coef = (1 - math.sqrt(1 - a) * eps_coef) / math.sqrt(a)
        gain *= math.sqrt(a_next) * x0_coef + math.sqrt(1 - a_next) * eps_coef
    return gain


@given(T=st.integers(2, 2000), bs=st.floats(1e-5, 1e-2), span=st.floats(1.0, 50.0))
@settings(max_examples=60, deadline=None)
def test_linear_schedule_invariants(T, bs, span):
    be = min(bs * span, 0.999)
    s = make_schedule(T, bs, be)
    assert s.betas.shape == (T,)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(1 - s.betas), rtol=1e-12)


def test_default_schedule_passes_check():
    s = make_schedule()
    check_schedule(s)
    assert s.alpha_bars[-1] < 0.05
    check_schedule(make_schedule(kind="cosine"))


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (100, 0.0, 0.02), (100, 0.03, 0.02), (100, 1e-4, 1.0)])
def test_schedule_rejects_bad_parameters(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


def test_check_schedule_rejects_weak_terminal_noise():
    with pytest.raises(ScheduleError):
        check_schedule(make_schedule(10, 1e-4, 1e-3))


def test_q_sample_closed_form_and_bounds():
    s = make_schedule()
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 2, 3, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 2, 3, 3, generator=g, dtype=torch.float64)
    t = torch.tensor([0, 10, 500, 999])
    out = q_sample(z0, t, eps, s)
    for i in range(4):
        a = s.alpha_bars[t[i]]
        expect = math.sqrt(a) * z0[i] + math.sqrt(1 - a) * eps[i]
        torch.testing.assert_close(out.z_t[i], expect, atol=1e-12, rtol=1e-12)
    with pytest.raises(IndexError):
        q_sample(z0, 1000, eps, s)
    with pytest.raises(IndexError):
        q_sample(z0, -1, eps, s)
    with pytest.raises(ValueError):
        q_sample(z0, 3, eps[:, :1], s)


def test_q_sample_marginal_statistics():
    s = make_schedule()
    g = torch.Generator().manual_seed(1)
    z0 = torch.full((20000,), 2.0, dtype=torch.float64)
    eps = torch.randn(20000, generator=g, dtype=torch.float64)
    zt = q_sample(z0, 300, eps, s).z_t
    a = s.alpha_bars[300]
    assert abs(zt.mean().item() - 2 * math.sqrt(a)) < 0.03
    assert abs(zt.std().item() - math.sqrt(1 - a)) < 0.02


def test_denoiser_loss_perfect_predictor_is_zero():
    s = make_schedule(50, 1e-3, 0.2)

    class Oracle(torch.nn.Module):
        def forward(self, z, t, cond=None):
            return eps

    z0 = torch.randn(3, 2, 4, 4)
    eps = torch.randn(3, 2, 4, 4)
    assert denoiser_loss(Oracle(), z0, 7, eps, schedule=s).item() == 0.0

    class Zero(torch.nn.Module):
        def forward(self, z, t, cond=None):
            return torch.zeros_like(z)

    per = denoiser_loss(Zero(), z0, 7, eps, schedule=s, reduce=False)
    torch.testing.assert_close(per, (eps ** 2).flatten(1).mean(1))


def test_ddim_timesteps_evenly_spaced():
    ts = ddim_timesteps(1000, 50)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 50
    assert np.all(np.diff(ts) < 0)
    assert list(ddim_timesteps(1000, 4, t_start=300)) == [300, 200, 100, 0]
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


@pytest.mark.parametrize("steps", [1, 5, 50])
@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_ddim_matches_scalar_gaussian_oracle(steps, s):
    sch = make_schedule(200, 1e-4, 0.05)
    model = GaussianOptimal(sch, s)
    zT = torch.randn(8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    out = ddim_sample(model, zT, steps, schedule=sch)
    gain = scalar_ddim_gain(sch.alpha_bars, ddim_timesteps(sch.T, steps), s)
    torch.testing.assert_close(out, zT * gain, atol=1e-10, rtol=1e-9)


def test_ddim_many_steps_recovers_data_scale():
    sch = make_schedule(1000)
    s = 1.7
    z = torch.randn(50000, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    zT = z * math.sqrt(sch.alpha_bars[-1] * s * s + 1 - sch.alpha_bars[-1])
    out = ddim_sample(GaussianOptimal(sch, s), zT, 1000, schedule=sch)
    assert abs(out.std().item() / s - 1) < 0.01


def test_ddim_eta0_deterministic_and_eta1_stochastic():
    sch = make_schedule(100, 1e-3, 0.2)
    m = GaussianOptimal(sch, 1.0)
    zT = torch.randn(4, 5, dtype=torch.float64)
    a = ddim_sample(m, zT, 10, schedule=sch)
    b = ddim_sample(m, zT, 10, schedule=sch)
    assert torch.equal(a, b)
    c = ddim_sample(m, zT, 10, eta=1.0, schedule=sch, generator=torch.Generator().manual_seed(0))
    d = ddim_sample(m, zT, 10, eta=1.0, schedule=sch, generator=torch.Generator().manual_seed(1))
    assert not torch.equal(c, d)
    with pytest.raises(ValueError):
        ddim_sample(m, zT, 101, schedule=sch)
