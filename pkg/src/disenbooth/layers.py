"""Minimal parameter containers built on :mod:`disenbooth.autodiff`."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Attribute-walking parameter container.

    Any ``Tensor`` attribute is a parameter, any ``Module`` attribute (or list
    of modules) is a child. Iteration follows attribute insertion order, so
    names and ordering are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise ad.DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class Linear(Module):
    """``y = x W^T (+ b)`` with ``W`` of shape ``(d_out, d_in)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std=None):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        self.weight = Tensor(rng.normal(0.0, std, size=(d_out, d_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def effective_weight(self) -> Tensor:
        return self.weight

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.DimensionError(f"linear: input {x.shape} vs weight {self.weight.shape}")
        if x.ndim == 1:
            return ad.reshape(self(ad.reshape(x, (1, -1))), (-1,))
        y = ad.matmul(x, ad.transpose(self.effective_weight()))
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, zero: bool = False):
        std = np.sqrt(2.0 / (9 * c_in))
        w = np.zeros((3, 3, c_in, c_out)) if zero else rng.normal(0.0, std, size=(3, 3, c_in, c_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        self.groups = groups
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_normalize(x, self.groups) * self.gamma + self.beta
