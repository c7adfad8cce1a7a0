import math
import time

import numpy as np
import pytest
import torch

from src.diffusion.schedule import (
    LatentState,
    NoiseSchedule,
    build_schedule,
    ddim_invert_step,
    ddim_sample_step,
    ddpm_posterior_mean,
    ddpm_sample_step,
    forward_marginal,
    schedule_from_alpha_bars,
)
from src.exceptions import ConfigError, ShapeError


def _scalar(value: float) -> LatentState:
    return LatentState(torch.tensor([value], dtype=torch.float64), 0)


def test_single_step_schedule() -> None:
    sched = build_schedule(1, 0.1, 0.1, "linear")
    assert sched.alpha_bar(1) == pytest.approx(0.9, abs=1e-15)


def test_two_step_linear_cumulative_product() -> None:
    sched = build_schedule(2, 0.1, 0.2, "linear")
    np.testing.assert_allclose(sched.alpha_bars, [1.0, 0.9, 0.72], atol=1e-15)


def test_scaled_linear_matches_product_oracle() -> None:
    sched = build_schedule(20, 0.00085, 0.012, "scaled_linear")
    lo, hi = math.sqrt(0.00085), math.sqrt(0.012)
    product = 1.0
    for k in range(20):
        beta = (lo + (hi - lo) * k / 19) ** 2
        product *= 1.0 - beta
    assert sched.alpha_bar(20) == pytest.approx(product, rel=1e-12)


def test_train_steps_subsampling_uses_uniform_stride() -> None:
    sched = build_schedule(20, 0.00085, 0.012, "scaled_linear", train_steps=1000)
    full = build_schedule(1000, 0.00085, 0.012, "scaled_linear")
    assert sched.model_timestep(3) == 150
    assert sched.alpha_bar(3) == full.alpha_bar(150)
    np.testing.assert_allclose(np.cumprod(1.0 - sched.betas), sched.alpha_bars[1:], rtol=1e-12)


def test_random_schedules_are_monotone_and_positive() -> None:
    gen = np.random.default_rng(0)
    for _ in range(100):
        lo = float(gen.uniform(1e-5, 0.05))
        hi = float(gen.uniform(lo, 0.3))
        sched = build_schedule(int(gen.integers(1, 60)), lo, hi, str(gen.choice(["linear", "scaled_linear"])))
        assert sched.alpha_bars[0] == 1.0
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert np.all(sched.alpha_bars > 0)


@pytest.mark.parametrize(
    "args",
    [
        (0, 0.1, 0.2, "linear"),
        (10, 0.0, 0.2, "linear"),
        (10, 0.3, 0.2, "linear"),
        (10, 0.1, 1.0, "linear"),
        (10, 0.1, 0.2, "cosine"),
    ],
)
def test_build_schedule_rejects_invalid_arguments(args) -> None:
    with pytest.raises(ConfigError):
        build_schedule(*args)


def test_schedule_document_rebuilds_the_same_schedule() -> None:
    sched = build_schedule(20, 0.00085, 0.012, "scaled_linear", train_steps=1000)
    rebuilt = NoiseSchedule.from_dict(sched.to_dict())
    np.testing.assert_array_equal(rebuilt.alpha_bars, sched.alpha_bars)

    doc = sched.to_dict()
    doc["alpha_bars"][5] += 1e-3
    with pytest.raises(ConfigError):
        NoiseSchedule.from_dict(doc)


def test_forward_marginal_examples() -> None:
    sched = build_schedule(2, 0.1, 0.2, "linear")
    z0 = _scalar(1.0)
    noise = torch.tensor([0.5], dtype=torch.float64)

    assert torch.equal(forward_marginal(z0, 0, noise, sched).values, z0.values)
    out = forward_marginal(z0, 2, noise, sched)
    assert out.timestep == 2
    assert out.values.item() == pytest.approx(0.72**0.5 + 0.28**0.5 * 0.5, rel=1e-14)

    zero = forward_marginal(_scalar(0.0), 1, noise, sched)
    assert zero.values.item() == pytest.approx(0.1**0.5 * 0.5, rel=1e-14)

    with pytest.raises(ShapeError):
        forward_marginal(z0, 1, torch.zeros(2, dtype=torch.float64), sched)
    with pytest.raises(ConfigError):
        forward_marginal(z0, 3, noise, sched)


def test_forward_marginal_at_terminal_step_is_dominated_by_noise(rng) -> None:
    sched = build_schedule(1000, 1e-4, 0.02, "linear")
    assert sched.alpha_bar(1000) <= 1e-4
    z0 = torch.randn(4, 8, 8, generator=rng, dtype=torch.float64)
    noise = torch.randn(4, 8, 8, generator=rng, dtype=torch.float64)
    z0, noise = z0 / z0.norm(), noise / noise.norm()
    out = forward_marginal(LatentState(z0, 0), 1000, noise, sched).values
    corr = torch.dot(out.flatten(), noise.flatten()) / (out.norm() * noise.norm())
    assert corr >= 0.99


def test_ddim_steps_match_scalar_oracles() -> None:
    sched = schedule_from_alpha_bars([1.0, 0.95, 0.9, 0.8])
    eps = torch.tensor([0.1], dtype=torch.float64)

    up = ddim_invert_step(LatentState(torch.tensor([1.0], dtype=torch.float64), 2), eps, 2, sched)
    expected = math.sqrt(0.8 / 0.9) + math.sqrt(0.8) * (math.sqrt(1 / 0.8 - 1) - math.sqrt(1 / 0.9 - 1)) * 0.1
    assert up.timestep == 3
    assert up.values.item() == pytest.approx(expected, rel=1e-14)

    down = ddim_sample_step(LatentState(torch.tensor([1.0], dtype=torch.float64), 2), eps, 2, sched)
    expected = math.sqrt(0.95 / 0.9) + math.sqrt(0.95) * (math.sqrt(1 / 0.95 - 1) - math.sqrt(1 / 0.9 - 1)) * 0.1
    assert down.timestep == 1
    assert down.values.item() == pytest.approx(expected, rel=1e-14)
    assert down.values.item() == pytest.approx(1.0173, abs=1e-4)


def test_zero_eps_steps_are_pure_rescales() -> None:
    sched = build_schedule(10, 0.01, 0.1, "linear")
    z = LatentState(torch.tensor([2.0, -1.0], dtype=torch.float64), 4)
    eps = torch.zeros(2, dtype=torch.float64)
    up = ddim_invert_step(z, eps, 4, sched)
    down = ddim_sample_step(z, eps, 4, sched)
    torch.testing.assert_close(up.values, z.values * math.sqrt(sched.alpha_bar(5) / sched.alpha_bar(4)))
    torch.testing.assert_close(down.values, z.values * math.sqrt(sched.alpha_bar(3) / sched.alpha_bar(4)))


def test_invert_then_sample_round_trip_over_random_instances() -> None:
    gen = np.random.default_rng(7)
    started = time.perf_counter()
    for _ in range(200):
        T = int(gen.integers(2, 50))
        lo = float(gen.uniform(1e-4, 0.02))
        hi = float(gen.uniform(lo, 0.3))
        sched = build_schedule(T, lo, hi, str(gen.choice(["linear", "scaled_linear"])))
        t = int(gen.integers(0, T))
        z = torch.from_numpy(gen.normal(size=(3, 4, 4)))
        eps = torch.from_numpy(gen.normal(size=(3, 4, 4)))
        up = ddim_invert_step(LatentState(z, t), eps, t, sched)
        back = ddim_sample_step(up, eps, t + 1, sched)
        assert back.timestep == t
        assert float((back.values - z).norm() / z.norm()) <= 1e-10
    assert time.perf_counter() - started < 5.0


def test_step_range_checks() -> None:
    sched = build_schedule(5, 0.01, 0.1, "linear")
    z = torch.zeros(3, dtype=torch.float64)
    with pytest.raises(ConfigError):
        ddim_invert_step(LatentState(z, 5), z, 5, sched)
    with pytest.raises(ConfigError):
        ddim_sample_step(LatentState(z, 0), z, 0, sched)
    with pytest.raises(ShapeError):
        ddim_sample_step(LatentState(z, 2), torch.zeros(4, dtype=torch.float64), 2, sched)


def test_steps_accept_float32_latents() -> None:
    sched = build_schedule(5, 0.01, 0.1, "linear")
    z = torch.ones(3, dtype=torch.float32)
    out = ddim_sample_step(LatentState(z, 3), z, 3, sched)
    assert out.values.dtype == torch.float32


def test_ddpm_posterior_mean_examples() -> None:
    sched = schedule_from_alpha_bars([1.0, 0.9])
    z = torch.tensor([1.0], dtype=torch.float64)
    one = torch.tensor([1.0], dtype=torch.float64)

    beta = sched.beta(1)
    assert beta == pytest.approx(0.1, abs=1e-15)
    expected = (1.0 - 0.1 / math.sqrt(1 - 0.9) * 1.0) / math.sqrt(0.9)
    assert ddpm_posterior_mean(z, one, 1, sched).item() == pytest.approx(expected, rel=1e-12)
    assert ddpm_posterior_mean(z, torch.zeros(1, dtype=torch.float64), 1, sched).item() == pytest.approx(
        1.0 / math.sqrt(0.9), rel=1e-14
    )

    tiny = build_schedule(1, 1e-12, 1e-12, "linear")
    assert ddpm_posterior_mean(z, one, 1, tiny).item() == pytest.approx(1.0, abs=1e-5)

    with pytest.raises(ConfigError):
        ddpm_posterior_mean(z, one, 0, sched)


def test_ddpm_sample_step_adds_scaled_noise() -> None:
    sched = build_schedule(4, 0.05, 0.2, "linear")
    z = LatentState(torch.tensor([0.3, -0.7], dtype=torch.float64), 3)
    eps = torch.tensor([0.2, 0.1], dtype=torch.float64)
    noise = torch.tensor([1.5, -2.0], dtype=torch.float64)
    mean = ddpm_posterior_mean(z.values, eps, 3, sched)

    assert torch.equal(ddpm_sample_step(z, eps, 3, 0.0, noise, sched).values, mean)
    assert torch.equal(ddpm_sample_step(z, eps, 3, 0.7, torch.zeros(2, dtype=torch.float64), sched).values, mean)
    stepped = ddpm_sample_step(z, eps, 3, 1.0, noise, sched)
    assert stepped.timestep == 2
    torch.testing.assert_close(stepped.values, mean + noise)

    with pytest.raises(ConfigError):
        ddpm_sample_step(z, eps, 3, -0.1, noise, sched)


def test_step_operations_are_pure(rng) -> None:
    sched = build_schedule(20, 0.00085, 0.012, "scaled_linear", train_steps=1000)
    z = LatentState(torch.randn(4, 8, 8, generator=rng, dtype=torch.float64), 7)
    eps = torch.randn(4, 8, 8, generator=rng, dtype=torch.float64)
    assert torch.equal(ddim_sample_step(z, eps, 7, sched).values, ddim_sample_step(z, eps, 7, sched).values)
