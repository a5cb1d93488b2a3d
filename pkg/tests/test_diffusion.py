import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disenbooth import autodiff as ad
from disenbooth.autodiff import Tensor
from disenbooth.diffusion import (ConfigError, Denoiser, DenoiserConfig, TimestepError, ddim_loop,
                                  ddim_sample, ddim_timesteps, forward_noise, make_schedule, predict_noise)

from micro import MICRO


def scripted_cosine(T, s=0.008):
    # straight transcription of the cosine rule, loop form
    f = [math.cos(((t / T) + s) / (1 + s) * math.pi / 2) ** 2 for t in range(T + 1)]
    abar, prod = [1.0], 1.0
    for t in range(1, T + 1):
        beta = min(1 - (f[t] / f[0]) / (f[t - 1] / f[0]), 0.999)
        prod *= 1 - beta
        abar.append(prod)
    return np.array(abar)


@pytest.mark.parametrize("T", [2, 10, 100, 1000])
def test_variance_preserving(T):
    s = make_schedule(T)
    np.testing.assert_allclose(s.alphas**2 + s.sigmas**2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.alphas) <= 0) and np.all(np.diff(s.sigmas) >= 0)
    assert s.alphas[1] > s.alphas[T]


@pytest.mark.parametrize("T", [100, 1000])
def test_first_step_near_clean(T):
    assert make_schedule(T).alphas[1] >= 0.99


def test_schedule_matches_scripted_recomputation():
    s = make_schedule(100)
    np.testing.assert_allclose(s.alphas, np.sqrt(scripted_cosine(100)), rtol=1e-12)


def test_schedule_rejects_tiny_T():
    with pytest.raises(ConfigError):
        make_schedule(1)


def test_forward_noise_hand_arithmetic():
    class S:
        T = 1
        alphas = np.array([1.0, 0.8])
        sigmas = np.array([0.0, 0.6])

    out = forward_noise(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), S)
    np.testing.assert_allclose(out, [0.8, 0.6])


def test_forward_noise_zero_eps_and_range():
    s = make_schedule(100)
    z = np.random.default_rng(0).standard_normal(5)
    np.testing.assert_array_equal(forward_noise(z, 37, np.zeros(5), s), s.alphas[37] * z)
    with pytest.raises(TimestepError):
        forward_noise(z, 0, z, s)
    with pytest.raises(TimestepError):
        forward_noise(z, 101, z, s)


def test_forward_noise_preserves_unit_energy():
    rng = np.random.default_rng(1)
    s = make_schedule(100)
    z = np.array([1.0])
    eps = rng.standard_normal((10_000, 1))
    for t in (1, 50, 100):
        zt = forward_noise(np.broadcast_to(z, eps.shape), t, eps, s)
        assert abs(np.mean(np.sum(zt**2, axis=1)) - 1.0) < 0.05


def test_ddim_timesteps():
    assert ddim_timesteps(100, 4) == [100, 75, 50, 25, 0]
    assert ddim_timesteps(10, 10) == list(range(10, -1, -1))
    with pytest.raises(ConfigError):
        ddim_timesteps(10, 0)
    with pytest.raises(ConfigError):
        ddim_timesteps(10, 11)


def oracle_eps_fn(z0, sched):
    # epsilon implied by z_t and the true clean point
    return lambda z, t: (z - sched.alphas[t] * z0) / sched.sigmas[t]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 100), st.sampled_from([1, 7, 50, 100]))
def test_ddim_recovers_clean_point_with_true_noise(seed, t, steps):
    rng = np.random.default_rng(seed)
    s = make_schedule(100)
    z0, eps = rng.standard_normal((2, 3, 4, 4))
    zt = forward_noise(z0, t, eps, s)
    out = ddim_loop(oracle_eps_fn(z0, s), zt, s, min(steps, t), start=t)
    assert np.max(np.abs(out - z0)) <= 1e-5


def test_micro_denoiser_shape_and_determinism():
    m = Denoiser(MICRO, seed=0)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 3, 8, 8))
    cond = rng.standard_normal((2, 4, 8))
    a = m(z, np.array([3, 17]), cond).data
    b = m(z, np.array([3, 17]), cond).data
    assert a.shape == z.shape
    np.testing.assert_array_equal(a, b)
    single = predict_noise(m, z[0], 3, cond[0])
    assert single.shape == (3, 8, 8)


def test_fresh_denoiser_returns_scaled_input():
    # the output conv starts at zero, so only the sigma_t * z_t skip remains
    m = Denoiser(MICRO, seed=0)
    z = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
    s = make_schedule(MICRO.timesteps)
    out = m(z, np.array([1, 20]), np.zeros((4, 8))).data
    np.testing.assert_allclose(out[0], s.sigmas[1] * z[0], rtol=1e-6)
    np.testing.assert_allclose(out[1], s.sigmas[20] * z[1], rtol=1e-6)


def test_noise_error_is_alpha_times_head_error():
    with ad.precision(np.float64):
        m = Denoiser(MICRO, seed=0)
        m.out_conv.weight.data[...] = np.random.default_rng(1).normal(0, 0.1, m.out_conv.weight.shape)
        s = make_schedule(MICRO.timesteps)
        rng = np.random.default_rng(2)
        z0, eps = rng.standard_normal((2, 1, 3, 8, 8))
        cond = rng.standard_normal((4, 8))
        for t in (1, 7, 20):
            zt = s.alphas[t] * z0 + s.sigmas[t] * eps
            v = s.alphas[t] * eps - s.sigmas[t] * z0
            err = m(zt, t, cond).data - eps
            np.testing.assert_allclose(err, s.alphas[t] * (m.head(zt, t, cond).data - v), atol=1e-12)


def test_denoiser_rejects_out_of_range_timesteps():
    m = Denoiser(MICRO)
    for t in (0, MICRO.timesteps + 1):
        with pytest.raises(TimestepError):
            m(np.zeros((1, 3, 8, 8)), t, np.zeros((4, 8)))


def test_denoiser_shape_errors():
    m = Denoiser(MICRO)
    with pytest.raises(ad.DimensionError):
        m(np.zeros((1, 3, 4, 4)), 1, np.zeros((4, 8)))
    with pytest.raises(ad.DimensionError):
        m(np.zeros((1, 3, 8, 8)), 1, np.zeros((5, 8)))
    with pytest.raises(ConfigError):
        DenoiserConfig(latent_shape=(3, 6, 6), depth=2)


def test_every_stage_has_a_registered_condition_map():
    m = Denoiser(MICRO)
    reg = m.lora_registry
    assert len(reg) == len(set(reg))
    for stage in MICRO.stage_names():
        assert f"cond.{stage}" in reg
    assert {"attn.q", "attn.k", "attn.v", "attn.o"} <= set(reg)


def test_condition_reaches_output_after_a_training_step():
    # out_conv starts at zero, so take one gradient step before probing conditioning
    m = Denoiser(MICRO, seed=1)
    rng = np.random.default_rng(2)
    z = rng.standard_normal((2, 3, 8, 8))
    loss = ad.mse(m(z, np.array([5, 5]), rng.standard_normal((2, 4, 8))), Tensor(z))
    ad.backward(loss)
    for _, p in m.trainable():
        p.data -= 0.1 * p.grad
    c1, c2 = rng.standard_normal((2, 4, 8))
    diff = np.abs(m(z[:1], 5, c1).data - m(z[:1], 5, c2).data).mean()
    assert diff > 0


def test_ddim_sample_is_seeded():
    m = Denoiser(MICRO, seed=0)
    s = make_schedule(20)
    cond = np.random.default_rng(0).standard_normal((4, 8))
    a = ddim_sample(m, cond, 5, seed=3, sched=s, n=2)
    b = ddim_sample(m, cond, 5, seed=3, sched=s, n=2)
    np.testing.assert_array_equal(a, b)
    for steps in (20, 10):
        out = ddim_sample(m, cond, steps, seed=0, sched=s)
        assert out.shape == (1, 3, 8, 8) and np.isfinite(out).all()
    with pytest.raises(ConfigError):
        ddim_sample(m, cond, 21, seed=0, sched=s)
