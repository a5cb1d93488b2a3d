"""Frozen toy encoders standing in for the pretrained text/image encoders.

Both encoders are drawn from fixed seeds and never trained; their arrays are
marked read-only so accidental in-place updates fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TEXT_ENCODER_SEED = 1234
IMAGE_ENCODER_SEED = 4321
PAD = "<pad>"
SUBJECT_TOKEN = "S*"


class VocabularyError(KeyError):
    pass


class PromptLengthError(ValueError):
    pass


class InputError(ValueError):
    pass


class Vocabulary:
    """Bijective token <-> id map; the id is the line number in the vocab file."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def load(cls, path=None) -> "Vocabulary":
        if path is None:
            text = resources.files("disenbooth").joinpath("data/vocab.txt").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls([line.strip() for line in text.splitlines() if line.strip()])

    def dumps(self) -> str:
        return "\n".join(self.tokens) + "\n"

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"word {token!r} is not in the vocabulary") from None

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]


def tokenize(prompt: str, vocab: Vocabulary, length: int = 8) -> list[int]:
    words = prompt.split()
    if len(words) > length:
        raise PromptLengthError(f"prompt has {len(words)} words, limit is {length}: {prompt!r}")
    ids = [vocab.id(w) for w in words]
    return ids + [vocab.pad_id] * (length - len(ids))


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class TextEncoder:
    """Embedding table + positional code + one self-attention mixing block."""

    def __init__(self, vocab: Vocabulary, dim: int = 32, length: int = 8, seed: int = TEXT_ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.dim = dim
        self.length = length
        self.table = _readonly(rng.normal(0.0, 1.0, size=(len(vocab), dim)))
        self.positions = _readonly(rng.normal(0.0, 0.5, size=(length, dim)))
        self.wq = _readonly(rng.normal(0.0, dim**-0.5, size=(dim, dim)))
        self.wk = _readonly(rng.normal(0.0, dim**-0.5, size=(dim, dim)))
        self.wv = _readonly(rng.normal(0.0, dim**-0.5, size=(dim, dim)))

    def weights(self) -> dict[str, np.ndarray]:
        return {"table": self.table, "positions": self.positions, "wq": self.wq, "wk": self.wk, "wv": self.wv}

    def encode_ids(self, ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.shape != (self.length,):
            raise PromptLengthError(f"expected {self.length} token ids, got shape {ids.shape}")
        e = self.table[ids] + self.positions
        q, k, v = e @ self.wq, e @ self.wk, e @ self.wv
        logits = q @ k.T / np.sqrt(self.dim)
        logits -= logits.max(axis=-1, keepdims=True)
        att = np.exp(logits)
        att /= att.sum(axis=-1, keepdims=True)
        return _layer_norm(e + att @ v)

    def __call__(self, ids: Sequence[int]) -> Tensor:
        return Tensor(self.encode_ids(ids))

    def encode_prompt(self, prompt: str) -> Tensor:
        return self(tokenize(prompt, self.vocab, self.length))


class ImageEncoder:
    """Three stride-2 ReLU conv stages followed by global average pooling."""

    def __init__(self, dim: int = 32, image_size: int = 32, seed: int = IMAGE_ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.image_size = image_size
        widths = [3, 16, 32, dim]
        self.kernels = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(3, 3, cin, cout))
            self.kernels.append(_readonly(w))

    def weights(self) -> dict[str, np.ndarray]:
        return {f"conv{i}": k for i, k in enumerate(self.kernels)}

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        """``images`` is ``(N, 3, H, W)`` in [-1, 1]; returns ``(N, dim)``."""
        images = np.asarray(images)
        s = self.image_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise InputError(f"expected images of shape (N, 3, {s}, {s}), got {images.shape}")
        if images.min() < -1.0 - 1e-6 or images.max() > 1.0 + 1e-6:
            raise InputError("image values must lie in [-1, 1]")
        with ad.no_grad():
            h = Tensor(np.transpose(images, (0, 2, 3, 1)))
            for k in self.kernels:
                h = ad.relu(ad.conv2d(h, Tensor(k, dtype=h.dtype), stride=2))
        return h.data.mean(axis=(1, 2))

    def __call__(self, image) -> Tensor:
        data = image.data if isinstance(image, Tensor) else np.asarray(image)
        return Tensor(self.encode_batch(data[None])[0])


@dataclass(frozen=True)
class IdentityCodec:
    """Pixel-space codec: the latent is the image itself."""

    def encode(self, x):
        return x

    def decode(self, z):
        return z


def codec_encode(x, codec: IdentityCodec = IdentityCodec()):
    return codec.encode(x)


def codec_decode(z, codec: IdentityCodec = IdentityCodec()):
    return codec.decode(z)
