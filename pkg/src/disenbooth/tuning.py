"""Disentangled finetuning: loss assembly, optimizer steps and the training loop."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .adaptation import FixedProjection, MaskAdapter, inject_lora, trainable_param_count
from .autodiff import NonFiniteError, Tensor
from .diffusion import ConfigError, Denoiser, DenoiserConfig, NoiseSchedule, forward_noise
from .encoders import ImageEncoder, TextEncoder
from .optim import AdamW

STEP_LOG_COLUMNS = ("iteration", "t", "L1", "L2", "L3", "L", "grad_norm")


@dataclass
class TrainConfig:
    lambda2: float = 0.01
    lambda3: float = 0.001
    lr: float = 1e-4
    iterations: int = 3000
    batch: int = 1
    seed: int = 0
    lora_rank: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    use_adapter: bool = True
    save_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.lambda2 < 1.0:
            raise ConfigError(f"lambda2 must satisfy 0 <= lambda2 < 1, got {self.lambda2}")
        if self.lambda3 < 0:
            raise ConfigError(f"lambda3 must be non-negative, got {self.lambda3}")
        for name in ("lr", "iterations", "batch", "lora_rank", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.weight_decay < 0:
            raise ConfigError("optimizer hyperparameters out of range")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class StepRecord:
    iteration: int
    t: int
    L1: float
    L2: float
    L3: float
    L: float
    grad_norm: float

    def row(self) -> list:
        return [self.iteration, self.t, repr(self.L1), repr(self.L2), repr(self.L3), repr(self.L), repr(self.grad_norm)]


@dataclass
class LossTerms:
    L1: Tensor
    L2: Tensor
    L3: Tensor
    L: Tensor
    t: int
    eps: np.ndarray
    z_t: np.ndarray
    f_i: Tensor


def pooled(f_s: Tensor) -> Tensor:
    return ad.mean(f_s, axis=0)


def compute_losses(
    model: Callable,
    adapter: Callable,
    schedule: NoiseSchedule,
    x_i: np.ndarray,
    f_s: Tensor,
    f_p: np.ndarray,
    rng: np.random.Generator,
    lambda2: float = 0.01,
    lambda3: float = 0.001,
) -> LossTerms:
    """Full objective for one image.

    One draw of (eps, t) feeds both denoising passes: the precise pass is
    conditioned on ``f_s + f_i`` (``f_i`` added to every token), the weak pass
    on ``f_s`` alone. ``f_s`` is the encoded subject prompt ``(L, d_c)`` and
    ``f_p`` the frozen image feature of ``x_i``.
    """
    dtype = ad.default_dtype()
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(x_i.shape).astype(dtype)
    z_t = forward_noise(np.asarray(x_i, dtype=dtype), t, eps, schedule).astype(dtype)
    f_i = adapter(Tensor(f_p))
    full = ad.add(f_s, ad.reshape(f_i, (1, -1)))
    target = Tensor(eps)
    if lambda2 > 0:
        cond = ad.concat([ad.reshape(full, (1,) + full.shape), ad.reshape(f_s, (1,) + f_s.shape)], axis=0)
        pred = model(Tensor(np.stack([z_t, z_t])), np.array([t, t]), cond)
        L1 = ad.mse(pred[0], target)
        L2 = ad.scale(ad.mse(pred[1], target), lambda2)
    else:
        pred = model(Tensor(z_t[None]), np.array([t]), ad.reshape(full, (1,) + full.shape))
        L1 = ad.mse(pred[0], target)
        L2 = Tensor(np.zeros((), dtype=dtype))
    L3 = ad.scale(ad.cosine_similarity(pooled(f_s), f_i), lambda3)
    L = ad.add(ad.add(L1, L2), L3)
    if not np.isfinite(L.data):
        raise NonFiniteError(f"non-finite loss at t={t}: L1={L1.data} L2={L2.data} L3={L3.data}")
    return LossTerms(L1, L2, L3, L, t, eps, z_t, f_i)


@dataclass
class TrainState:
    model: Denoiser
    adapter: object
    schedule: NoiseSchedule
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    config: TrainConfig
    prompt: str
    optimizer: AdamW = None
    rng: np.random.Generator = None
    iteration: int = 0
    f_s: Tensor = None
    _features: dict = field(default_factory=dict)

    def trainable(self) -> list[tuple[str, Tensor]]:
        params = [(f"unet.{n}", p) for n, p in self.model.trainable()]
        if isinstance(self.adapter, MaskAdapter):
            params += [(f"adapter.{n}", p) for n, p in self.adapter.trainable()]
        return params

    def frozen(self) -> list[tuple[str, Tensor]]:
        out = [(f"unet.{n}", p) for n, p in self.model.named_parameters() if not p.requires_grad]
        if not isinstance(self.adapter, MaskAdapter):
            out += [(f"adapter.{n}", p) for n, p in self.adapter.named_parameters()]
        return out

    def image_feature(self, index: int, image: np.ndarray) -> np.ndarray:
        if index not in self._features:
            self._features[index] = self.image_encoder.encode_batch(image[None])[0]
        return self._features[index]

    def trainable_count(self) -> int:
        return trainable_param_count(self.model, self.adapter if isinstance(self.adapter, MaskAdapter) else _Empty())


class _Empty:
    def parameters(self):
        return []


def init_state(
    base_state: dict,
    denoiser_config: DenoiserConfig,
    schedule: NoiseSchedule,
    text_encoder: TextEncoder,
    image_encoder: ImageEncoder,
    prompt: str,
    config: TrainConfig,
) -> TrainState:
    """Load the frozen base denoiser, inject LoRA and build the adapter."""
    if schedule.T != denoiser_config.timesteps:
        raise ConfigError(f"schedule has T={schedule.T}, denoiser expects {denoiser_config.timesteps}")
    model = Denoiser(denoiser_config)
    model.load_state_dict(base_state)
    inject_lora(model, rank=config.lora_rank, seed=config.seed)
    dim = denoiser_config.cond_dim
    adapter = MaskAdapter(dim, seed=config.seed) if config.use_adapter else FixedProjection(dim, seed=config.seed)
    state = TrainState(model, adapter, schedule, text_encoder, image_encoder, config, prompt)
    state.f_s = text_encoder.encode_prompt(prompt)
    state.optimizer = AdamW(
        state.trainable(), lr=config.lr, beta1=config.beta1, beta2=config.beta2,
        eps=config.eps, weight_decay=config.weight_decay,
    )
    state.rng = np.random.default_rng(config.seed)
    return state


def train_step(state: TrainState, image: np.ndarray, image_index: int) -> StepRecord:
    cfg = state.config
    f_p = state.image_feature(image_index, image)
    terms = compute_losses(state.model, state.adapter, state.schedule, image, state.f_s, f_p,
                           state.rng, cfg.lambda2, cfg.lambda3)
    opt = state.optimizer
    opt.zero_grad()
    ad.backward(terms.L)
    gn = opt.grad_norm()
    opt.step()
    opt.zero_grad()
    state.iteration += 1
    return StepRecord(state.iteration, terms.t, float(terms.L1.data), float(terms.L2.data),
                      float(terms.L3.data), float(terms.L.data), gn)


def trainable_tensors(state: TrainState) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in state.trainable()}


def train(
    state: TrainState,
    images: np.ndarray,
    log_path: Optional[str] = None,
    on_save: Optional[Callable[[TrainState], None]] = None,
    progress: Optional[Callable[[StepRecord], None]] = None,
) -> list[StepRecord]:
    """Run ``config.iterations`` steps cycling through ``images`` in order."""
    records = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STEP_LOG_COLUMNS)
    try:
        while state.iteration < state.config.iterations:
            k = state.iteration % len(images)
            rec = train_step(state, images[k], k)
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.row())
            if progress is not None:
                progress(rec)
            every = state.config.save_every
            if on_save is not None and every and state.iteration % every == 0:
                if fh is not None:
                    fh.flush()
                on_save(state)
    finally:
        if fh is not None:
            fh.close()
    return records
