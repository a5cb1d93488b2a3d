"""Tiny configurations shared by the unit and acceptance tests."""

from dataclasses import replace

import numpy as np

from disenbooth.diffusion import Denoiser, DenoiserConfig, make_schedule
from disenbooth.encoders import ImageEncoder, TextEncoder, Vocabulary
from disenbooth.tuning import TrainConfig, init_state

MICRO = DenoiserConfig(latent_shape=(3, 8, 8), cond_dim=8, cond_len=4, base_channels=8,
                       time_embed_dim=16, attn_dim=8, groups=4, timesteps=20)
PROMPT = "a S* square"


def micro_images(k=3, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (k, 3, 8, 8)).astype(np.float32)


def micro_base(seed=0, perturb=0.05, T=20):
    """Micro denoiser with a nonzero output layer so every path carries gradient."""
    model = Denoiser(replace(MICRO, timesteps=T), seed=seed)
    rng = np.random.default_rng(seed + 99)
    model.out_conv.weight.data[...] = rng.normal(0, perturb, model.out_conv.weight.shape)
    return model.state_dict()


def micro_state(config=None, seed=0, T=20, **kw):
    config = config or TrainConfig(lora_rank=2, seed=seed, **kw)
    return init_state(micro_base(seed, T=T), replace(MICRO, timesteps=T), make_schedule(T), TextEncoder(Vocabulary.load(), dim=8, length=4),
                      ImageEncoder(dim=8, image_size=8), PROMPT, config)
