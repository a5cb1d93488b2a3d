"""Noise schedule, forward noising, the conditional denoiser and DDIM sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv2d, GroupNorm, Linear, Module


class ConfigError(ValueError):
    pass


class TimestepError(IndexError):
    pass


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving coefficients; index 0 holds the clean point (1, 0)."""

    T: int
    alphas: np.ndarray
    sigmas: np.ndarray

    def alpha(self, t: int) -> float:
        return float(self.alphas[t])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t])


def cosine_alpha_bar(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """Cumulative signal fraction for t = 0..T (cosine form, betas clipped)."""
    f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
    abar = f / f[0]
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], max_beta)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def make_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if kind != "cosine":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    abar = cosine_alpha_bar(T)
    alphas = np.sqrt(abar)
    sigmas = np.sqrt(1.0 - abar)
    for a in (alphas, sigmas):
        a.setflags(write=False)
    return NoiseSchedule(T, alphas, sigmas)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= int(t) <= sched.T:
        raise TimestepError(f"timestep {t} outside 1..{sched.T}")


def forward_noise(z, t: int, eps, sched: NoiseSchedule):
    """``alpha_t * z + sigma_t * eps``; works for arrays and tensors alike."""
    _check_t(t, sched)
    a, s = sched.alphas[t], sched.sigmas[t]
    if isinstance(z, Tensor) or isinstance(eps, Tensor):
        z = z if isinstance(z, Tensor) else Tensor(z)
        eps = eps if isinstance(eps, Tensor) else Tensor(eps)
        if z.shape != eps.shape:
            raise ad.DimensionError(f"forward_noise: {z.shape} vs {eps.shape}")
        return ad.add(ad.scale(z, float(a)), ad.scale(eps, float(s)))
    z, eps = np.asarray(z), np.asarray(eps)
    if z.shape != eps.shape:
        raise ad.DimensionError(f"forward_noise: {z.shape} vs {eps.shape}")
    return (a * z + s * eps).astype(np.result_type(z, eps), copy=False)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    latent_shape: tuple = (3, 32, 32)
    cond_dim: int = 32
    cond_len: int = 8
    base_channels: int = 16
    depth: int = 2
    time_embed_dim: int = 64
    attn_dim: int = 32
    groups: int = 8
    timesteps: int = 100

    def __post_init__(self):
        c, h, w = self.latent_shape
        for name in ("cond_dim", "cond_len", "base_channels", "depth", "time_embed_dim", "attn_dim", "timesteps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(c, h, w) < 1:
            raise ConfigError(f"bad latent shape {self.latent_shape}")
        if h % 2**self.depth or w % 2**self.depth:
            raise ConfigError(f"latent {h}x{w} not divisible by 2^{self.depth}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def stage_names(self) -> list[str]:
        down = [f"down{i}" for i in range(self.depth)]
        up = [f"up{i}" for i in reversed(range(self.depth))]
        return down + ["mid"] + up


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class ResBlock(Module):
    """Residual conv block modulated per channel by time and pooled condition."""

    def __init__(self, ch: int, cfg: DenoiserConfig, rng):
        self.ch = ch
        self.norm1 = GroupNorm(cfg.groups, ch)
        self.conv1 = Conv2d(ch, ch, rng)
        self.time_proj = Linear(cfg.time_embed_dim, 2 * ch, rng)
        self.norm2 = GroupNorm(cfg.groups, ch)
        self.conv2 = Conv2d(ch, ch, rng)

    def __call__(self, x: Tensor, temb: Tensor, pooled: Tensor, cond_map) -> Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        film = self.time_proj(temb) + cond_map(pooled)
        n = film.shape[0]
        film = film.reshape(n, 1, 1, 2 * self.ch)
        gain = film[..., : self.ch]
        shift = film[..., self.ch :]
        h = self.norm2(h)
        h = h + h * gain + shift
        return x + self.conv2(ad.silu(h))


class Denoiser(Module):
    """Small conditional U-Net predicting the injected noise.

    ``maps`` holds every linear map eligible for low-rank injection: one
    condition projection per resolution stage and the bottleneck
    cross-attention's query/key/value/output maps. None of them has a bias.

    The noise estimate is preconditioned as ``sigma_t * z_t + alpha_t * h``
    where ``h`` is the U-Net output. The implied clean estimate is then
    ``alpha_t * z_t - sigma_t * h``, with no 1/alpha_t blow-up near t = T.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.schedule = make_schedule(cfg.timesteps)
        c_img = cfg.latent_shape[0]
        ch = [cfg.channels(level) for level in range(cfg.depth + 1)]
        tdim = cfg.time_embed_dim
        self.maps: dict = {}
        self.time1 = Linear(tdim // 2 * 2, tdim, rng)
        self.time2 = Linear(tdim, tdim, rng)
        self.in_conv = Conv2d(c_img, ch[0], rng)
        self.down_blocks = []
        self.down_convs = []
        for level in range(cfg.depth):
            name = f"down{level}"
            self.maps[f"cond.{name}"] = Linear(cfg.cond_dim, 2 * ch[level], rng, bias=False, std=0.1)
            self.down_blocks.append(ResBlock(ch[level], cfg, rng))
            self.down_convs.append(Conv2d(ch[level], ch[level + 1], rng, stride=2))
        cm = ch[cfg.depth]
        self.maps["cond.mid"] = Linear(cfg.cond_dim, 2 * cm, rng, bias=False, std=0.1)
        self.mid_block = ResBlock(cm, cfg, rng)
        self.attn_norm = GroupNorm(cfg.groups, cm)
        self.maps["attn.q"] = Linear(cm, cfg.attn_dim, rng, bias=False)
        self.maps["attn.k"] = Linear(cfg.cond_dim, cfg.attn_dim, rng, bias=False)
        self.maps["attn.v"] = Linear(cfg.cond_dim, cfg.attn_dim, rng, bias=False)
        self.maps["attn.o"] = Linear(cfg.attn_dim, cm, rng, bias=False, std=0.02)
        self.up_merges = []
        self.up_blocks = []
        for level in reversed(range(cfg.depth)):
            name = f"up{level}"
            self.maps[f"cond.{name}"] = Linear(cfg.cond_dim, 2 * ch[level], rng, bias=False, std=0.1)
            self.up_merges.append(Conv2d(ch[level + 1] + ch[level], ch[level], rng))
            self.up_blocks.append(ResBlock(ch[level], cfg, rng))
        self.out_norm = GroupNorm(cfg.groups, ch[0])
        self.out_conv = Conv2d(ch[0], c_img, rng, zero=True)

    @property
    def lora_registry(self) -> list[str]:
        return list(self.maps)

    def _attention(self, h: Tensor, cond: Tensor) -> Tensor:
        n, hh, ww, c = h.shape
        d = self.cfg.attn_dim
        q = self.maps["attn.q"](self.attn_norm(h).reshape(n, hh * ww, c))
        k = self.maps["attn.k"](cond)
        v = self.maps["attn.v"](cond)
        att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d)), axis=-1)
        out = self.maps["attn.o"](ad.matmul(att, v))
        return h + out.reshape(n, hh, ww, c)

    def __call__(self, z, t, cond) -> Tensor:
        """``z``: (N, C, H, W); ``t``: int or (N,) ints; ``cond``: (N, L, d_c) or (L, d_c)."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        h = self.head(z, t, cond)
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        alpha = self.schedule.alphas[t].astype(z.dtype)[:, None, None, None]
        sigma = self.schedule.sigmas[t].astype(z.dtype)[:, None, None, None]
        return ad.add(ad.hadamard(z, Tensor(sigma)), ad.hadamard(h, Tensor(alpha)))

    def head(self, z, t, cond) -> Tensor:
        """Raw U-Net output ``h``; its regression target is ``alpha_t * eps - sigma_t * z_0``."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        cfg = self.cfg
        if z.ndim != 4 or tuple(z.shape[1:]) != tuple(cfg.latent_shape):
            raise ad.DimensionError(f"latent shape {z.shape} does not match {cfg.latent_shape}")
        n = z.shape[0]
        if cond.ndim == 2:
            cond = ad.add(ad.reshape(cond, (1,) + cond.shape), Tensor(np.zeros((n, 1, 1), dtype=cond.dtype)))
        if tuple(cond.shape) != (n, cfg.cond_len, cfg.cond_dim):
            raise ad.DimensionError(f"condition shape {cond.shape}, expected ({n}, {cfg.cond_len}, {cfg.cond_dim})")
        t = np.broadcast_to(np.asarray(t), (n,))
        if t.min() < 1 or t.max() > cfg.timesteps:
            raise TimestepError(f"timestep outside 1..{cfg.timesteps}")
        temb = Tensor(timestep_features(t, cfg.time_embed_dim // 2 * 2))
        temb = ad.silu(self.time2(ad.silu(self.time1(temb))))
        pooled = ad.mean(cond, axis=1)

        h = self.in_conv(ad.transpose(z, (0, 2, 3, 1)))
        skips = []
        for level in range(cfg.depth):
            h = self.down_blocks[level](h, temb, pooled, self.maps[f"cond.down{level}"])
            skips.append(h)
            h = self.down_convs[level](h)
        h = self.mid_block(h, temb, pooled, self.maps["cond.mid"])
        h = self._attention(h, cond)
        for i, level in enumerate(reversed(range(cfg.depth))):
            h = ad.upsample_nearest(h, 2)
            h = self.up_merges[i](ad.concat([h, skips[level]], axis=-1))
            h = self.up_blocks[i](h, temb, pooled, self.maps[f"cond.up{level}"])
        out = self.out_conv(ad.silu(self.out_norm(h)))
        return ad.transpose(out, (0, 3, 1, 2))


def predict_noise(model: Denoiser, z_t, t: int, cond) -> Tensor:
    """Single-sample noise prediction: ``z_t`` is (C, H, W), ``cond`` is (L, d_c)."""
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    if tuple(z_t.shape) != tuple(model.cfg.latent_shape):
        raise ad.DimensionError(f"latent shape {z_t.shape} does not match {model.cfg.latent_shape}")
    out = model(ad.reshape(z_t, (1,) + z_t.shape), np.array([t]), cond)
    return ad.reshape(out, z_t.shape)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly strided descending subsequence of 1..T, terminated by 0."""
    if not 1 <= steps <= T:
        raise ConfigError(f"ddim steps must be in 1..{T}, got {steps}")
    return [int(round(T - i * T / steps)) for i in range(steps)] + [0]


def ddim_loop(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    z_T: np.ndarray,
    sched: NoiseSchedule,
    steps: int,
    clip: Optional[float] = None,
    start: Optional[int] = None,
) -> np.ndarray:
    """Deterministic DDIM iterations in float64.

    ``eps_fn(z_t, t)`` returns the predicted noise. With ``clip`` set, the
    clean estimate is clamped to ``[-clip, clip]`` and the noise re-derived.
    ``start`` begins the trajectory at an intermediate timestep instead of T.
    """
    z = np.asarray(z_T, dtype=np.float64)
    start = sched.T if start is None else start
    _check_t(start, sched)
    ts = ddim_timesteps(start, steps)
    for t, t_next in zip(ts[:-1], ts[1:]):
        a, s = sched.alphas[t], sched.sigmas[t]
        eps = np.asarray(eps_fn(z, t), dtype=np.float64)
        x0 = (z - s * eps) / a
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
            eps = (z - a * x0) / s
        z = sched.alphas[t_next] * x0 + sched.sigmas[t_next] * eps
    return z


def ddim_sample(
    model: Denoiser,
    cond,
    steps: int,
    seed: int,
    sched: NoiseSchedule,
    n: int = 1,
    clip: Optional[float] = 1.0,
) -> np.ndarray:
    """Generate ``n`` latents of shape ``(n, C, H, W)`` from seeded Gaussian noise.

    ``cond`` is one condition (L, d_c) shared by every sample or a per-sample
    stack (n, L, d_c).
    """
    cond = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    rng = np.random.default_rng(seed)
    z_T = rng.standard_normal((n,) + tuple(model.cfg.latent_shape))
    dtype = ad.default_dtype()
    cond_t = Tensor(cond.astype(dtype))

    def eps_fn(z, t):
        with ad.no_grad():
            return model(Tensor(z.astype(dtype)), np.full(n, t), cond_t).data

    return ddim_loop(eps_fn, z_T, sched, steps, clip=clip)


# ---------------------------------------------------------------------------
# base-model pretraining
# ---------------------------------------------------------------------------


def pretrain_base(
    model: Denoiser,
    sample_batch: Callable[[np.random.Generator], tuple],
    sched: NoiseSchedule,
    steps: int,
    seed: int = 0,
    lr: float = 1e-3,
    ema_decay: float = 0.999,
    warmup: int = 200,
    final_lr_frac: float = 0.1,
    log: Optional[Callable[[int, float], None]] = None,
) -> Denoiser:
    """Fit every denoiser weight on ``sample_batch(rng) -> (images, conds)``.

    The head is regressed onto ``alpha_t * eps - sigma_t * z_0``, which weights
    all timesteps evenly; the equivalent noise loss would vanish near t = T.
    The learning rate warms up linearly, then follows a cosine decay to
    ``final_lr_frac * lr``. Returns ``model`` holding the exponential moving
    average of the weights, frozen.
    """
    from .optim import AdamW

    if sched.T != model.cfg.timesteps:
        raise ConfigError(f"schedule has T={sched.T}, model expects {model.cfg.timesteps}")
    rng = np.random.default_rng(seed)
    model.unfreeze()
    params = model.trainable()
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    ema = {n: p.data.astype(np.float64) for n, p in params}
    for step in range(1, steps + 1):
        x0, cond = sample_batch(rng)
        n = len(x0)
        t = rng.integers(1, sched.T + 1, size=n)
        eps = rng.standard_normal(x0.shape)
        a = sched.alphas[t][:, None, None, None]
        s = sched.sigmas[t][:, None, None, None]
        zt = a * x0 + s * eps
        dtype = ad.default_dtype()
        pred = model.head(Tensor(zt.astype(dtype)), t, Tensor(cond.astype(dtype)))
        loss = ad.mse(pred, Tensor((a * eps - s * x0).astype(dtype)))
        opt.zero_grad()
        ad.backward(loss)
        progress = min(1.0, max(0.0, (step - warmup) / max(1, steps - warmup)))
        decay_lr = final_lr_frac + (1 - final_lr_frac) * 0.5 * (1 + math.cos(math.pi * progress))
        opt.lr = lr * min(1.0, step / warmup) * decay_lr
        opt.step()
        decay = min(ema_decay, (1.0 + step) / (10.0 + step))
        for name, p in params:
            ema[name] *= decay
            ema[name] += (1.0 - decay) * p.data
        if log is not None:
            log(step, float(loss.data))
    model.load_state_dict({n: a for n, a in ema.items()})
    return model.freeze()
