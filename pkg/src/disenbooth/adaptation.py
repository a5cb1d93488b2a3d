"""Low-rank injection into the denoiser and the identity-irrelevant mask adapter."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import ConfigError, Denoiser
from .layers import Linear, Module

LORA_INIT_STD = 0.02


class LoraLayer(Module):
    """Frozen ``W0`` (d x k) plus trainable ``B @ A``; applies ``x (W0 + BA)^T``."""

    def __init__(self, weight: Tensor, lora_A: Tensor, lora_B: Tensor):
        d, k = weight.shape
        r = lora_A.shape[0]
        if lora_A.shape != (r, k) or lora_B.shape != (d, r):
            raise ad.DimensionError(f"LoRA factors {lora_B.shape} @ {lora_A.shape} do not match W0 {weight.shape}")
        self.weight = weight.requires_grad_(False)
        self.lora_A = lora_A.requires_grad_(True)
        self.lora_B = lora_B.requires_grad_(True)

    @property
    def rank(self) -> int:
        return self.lora_A.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def effective_weight(self) -> Tensor:
        return ad.add(self.weight, ad.matmul(self.lora_B, self.lora_A))

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(self, x)


def init_lora(d: int, k: int, r: int, seed: int, weight=None) -> LoraLayer:
    """Gaussian ``A`` (std 0.02), zero ``B``; ``weight`` defaults to a zero W0."""
    if r < 1 or r > min(d, k):
        raise ConfigError(f"LoRA rank {r} must be in 1..min({d}, {k})")
    rng = np.random.default_rng(seed)
    if weight is None:
        weight = Tensor(np.zeros((d, k)))
    elif not isinstance(weight, Tensor):
        weight = Tensor(weight)
    if weight.shape != (d, k):
        raise ad.DimensionError(f"W0 has shape {weight.shape}, expected {(d, k)}")
    A = Tensor(rng.normal(0.0, LORA_INIT_STD, size=(r, k)))
    B = Tensor(np.zeros((d, r)))
    return LoraLayer(weight, A, B)


def lora_forward(layer: LoraLayer, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != layer.d_in:
        raise ad.DimensionError(f"lora_forward: input {x.shape} vs W0 {layer.weight.shape}")
    if x.ndim == 1:
        return ad.reshape(lora_forward(layer, ad.reshape(x, (1, -1))), (-1,))
    return ad.matmul(x, ad.transpose(layer.effective_weight()))


def inject_lora(model: Denoiser, rank: int = 4, seed: int = 0) -> dict[str, LoraLayer]:
    """Freeze ``model`` and wrap every registered map exactly once."""
    model.freeze()
    layers = {}
    for i, name in enumerate(model.lora_registry):
        base = model.maps[name]
        if isinstance(base, LoraLayer):
            raise ConfigError(f"map {name!r} already carries a LoRA wrapper")
        layer = init_lora(base.d_out, base.d_in, rank, seed * 1000 + i, weight=base.weight)
        model.maps[name] = layer
        layers[name] = layer
    return layers


def lora_layers(model: Denoiser) -> dict[str, LoraLayer]:
    return {n: m for n, m in model.maps.items() if isinstance(m, LoraLayer)}


class MaskAdapter(Module):
    """``f_i = M * f_p + MLP(M * f_p)`` with ``M = sigmoid(m_raw)``."""

    def __init__(self, dim: int = 32, seed: int = 0, hidden=None):
        rng = np.random.default_rng(seed)
        hidden = dim if hidden is None else hidden
        self.m_raw = Tensor(np.zeros(dim), requires_grad=True)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    @property
    def dim(self) -> int:
        return self.m_raw.shape[0]

    def mask(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.m_raw.data))

    def __call__(self, f_p) -> Tensor:
        return adapter_forward(self, f_p)


def adapter_forward(adapter: MaskAdapter, f_p) -> Tensor:
    f_p = f_p if isinstance(f_p, Tensor) else Tensor(f_p)
    if f_p.shape[-1] != adapter.dim:
        raise ad.DimensionError(f"adapter expects width {adapter.dim}, got {f_p.shape}")
    gated = ad.hadamard(ad.sigmoid(adapter.m_raw), f_p)
    return ad.add(gated, adapter.fc2(ad.relu(adapter.fc1(gated))))


class FixedProjection(Module):
    """Frozen random map f_p -> condition space, used when the adapter is ablated."""

    def __init__(self, dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed + 7919)
        self.weight = Tensor(rng.normal(0.0, dim**-0.5, size=(dim, dim)))

    def __call__(self, f_p) -> Tensor:
        f_p = f_p if isinstance(f_p, Tensor) else Tensor(f_p)
        return ad.matmul(ad.reshape(f_p, (-1, self.dim)), ad.transpose(self.weight)).reshape(f_p.shape)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]


def adapter_param_count(adapter: Module) -> int:
    return sum(p.size for p in adapter.parameters() if p.requires_grad)


def trainable_param_count(model: Denoiser, adapter: Module) -> int:
    """Sum of (d + k) * r over injected maps plus the adapter's own parameters."""
    total = 0
    for layer in lora_layers(model).values():
        total += (layer.d_out + layer.d_in) * layer.rank
    return total + adapter_param_count(adapter)
