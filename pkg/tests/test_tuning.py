import csv

import numpy as np
import pytest

from disenbooth import autodiff as ad
from disenbooth.autodiff import NonFiniteError, Tensor
from disenbooth.diffusion import ConfigError
from disenbooth.tuning import (STEP_LOG_COLUMNS, TrainConfig, compute_losses, pooled, train, train_step)

from micro import PROMPT, micro_images, micro_state


def losses(state, image, seed, lambda2=0.01, lambda3=0.001, adapter=None):
    f_p = state.image_encoder.encode_batch(image[None])[0]
    return compute_losses(state.model, adapter or state.adapter, state.schedule, image, state.f_s, f_p,
                          np.random.default_rng(seed), lambda2, lambda3)


def test_config_validation():
    TrainConfig(lambda2=0.0, lambda3=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda2=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda3=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    assert TrainConfig().digest() == TrainConfig().digest() != TrainConfig(seed=1).digest()


def test_paper_defaults():
    c = TrainConfig()
    assert (c.lambda2, c.lambda3, c.lr, c.iterations, c.lora_rank) == (0.01, 0.001, 1e-4, 3000, 4)


def test_total_is_sum_of_terms():
    state = micro_state()
    img = micro_images(1)[0]
    for seed in range(5):
        t = losses(state, img, seed)
        assert t.L.data == t.L1.data + t.L2.data + t.L3.data


def test_zero_weights_reduce_to_precise_loss():
    state = micro_state()
    img = micro_images(1)[0]
    t = losses(state, img, 3, 0.0, 0.0)
    assert t.L.data == t.L1.data
    assert t.L2.data == 0 and t.L3.data == 0


def test_weak_pass_shares_noise_and_timestep():
    state = micro_state()
    img = micro_images(1)[0]
    full = losses(state, img, 7)
    # with f_i = 0 both passes see the same condition, so L2 = lambda2 * L1
    zero = lambda f_p: Tensor(np.zeros(8))
    t = losses(state, img, 7, adapter=zero)
    np.testing.assert_allclose(t.L2.data, 0.01 * t.L1.data, rtol=1e-6)
    assert t.t == full.t
    np.testing.assert_array_equal(t.eps, full.eps)


def test_contrastive_term_of_aligned_embeddings():
    state = micro_state()
    img = micro_images(1)[0]
    same = lambda f_p: pooled(state.f_s)
    t = losses(state, img, 0, adapter=same)
    assert t.L3.data == np.float32(0.001)


def test_non_finite_loss_raises():
    state = micro_state()
    img = micro_images(1)[0]
    bad = lambda f_p: Tensor(np.full(8, np.inf), dtype=np.float32)
    with pytest.raises(NonFiniteError):
        losses(state, img, 0, adapter=bad)


def test_train_step_updates_only_trainable_tensors():
    state = micro_state()
    img = micro_images(1)[0]
    trainable = {n: p.data.copy() for n, p in state.trainable()}
    frozen = {n: p.data.copy() for n, p in state.frozen()}
    train_step(state, img, 0)
    train_step(state, img, 0)
    changed = {n for n, p in state.trainable() if not np.array_equal(p.data, trainable[n])}
    assert changed == set(trainable)
    for n, p in state.frozen():
        np.testing.assert_array_equal(p.data, frozen[n])


def test_image_feature_cached_once():
    state = micro_state()
    imgs = micro_images(2)
    a = state.image_feature(0, imgs[0])
    b = state.image_feature(0, imgs[1])
    assert a is b


def test_train_writes_step_log(tmp_path):
    state = micro_state(iterations=6)
    log = tmp_path / "steps.csv"
    saves = []
    state.config.save_every = 3
    recs = train(state, micro_images(3), log_path=str(log), on_save=lambda s: saves.append(s.iteration))
    rows = list(csv.reader(open(log)))
    assert tuple(rows[0]) == STEP_LOG_COLUMNS
    assert len(rows) == 7 and len(recs) == 6
    assert saves == [3, 6]
    for r in rows[1:]:
        L1, L2, L3, L = (np.float32(float(v)) for v in r[2:6])
        assert L1 + L2 + L3 == L


def test_training_is_deterministic():
    logs = []
    for _ in range(2):
        state = micro_state(iterations=4)
        logs.append([r.row() for r in train(state, micro_images(2))])
    assert logs[0] == logs[1]


def test_subject_prompt_in_state():
    assert micro_state().prompt == PROMPT


def test_perfect_denoiser_gives_zero_denoising_loss():
    state = micro_state()
    img = micro_images(1)[0].astype(np.float64)
    sched = state.schedule

    def oracle(z, t, cond):
        # recover the injected noise from z_t and the known clean image
        tt = int(np.asarray(t).ravel()[0])
        eps = (z.data - sched.alphas[tt] * img) / sched.sigmas[tt]
        return Tensor(eps.astype(z.dtype))

    f_p = state.image_encoder.encode_batch(img[None])[0]
    with ad.precision(np.float64):
        t = compute_losses(oracle, state.adapter, sched, img, Tensor(state.f_s.data), f_p,
                           np.random.default_rng(0))
    assert abs(t.L1.data) < 1e-20 and abs(t.L2.data) < 1e-20


def test_loss_decreases_on_micro_dataset():
    state = micro_state(iterations=200, lr=3e-3)
    imgs = micro_images(3)

    def held_out():
        return np.mean([losses(state, imgs[k], s).L1.data for s in range(8) for k in range(3)])

    before = held_out()
    train(state, imgs)
    assert held_out() < before
