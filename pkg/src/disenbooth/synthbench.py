"""Procedural shapes benchmark with ground-truth identity and scene factors.

Colors are defined as 8-bit triples so every rendered value survives the
8-bit image round trip exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import SUBJECT_TOKEN, Vocabulary, tokenize
from .layers import Conv2d, Linear, Module
from .optim import AdamW

IMAGE_SIZE = 32
SHAPES = ("circle", "square", "triangle", "cross")
PALETTE = {
    "red": (230, 25, 25),
    "orange": (255, 140, 0),
    "yellow": (240, 230, 25),
    "green": (25, 190, 50),
    "cyan": (25, 205, 215),
    "blue": (40, 65, 230),
    "purple": (155, 50, 190),
    "white": (240, 240, 240),
}
COLORS = tuple(PALETTE)
TEXTURES = ("plain", "stripes", "checker")
SCALES = ("small", "medium")
MARKERS = (0, 1, 2, 3)
INK = (20, 20, 20)
CENTERS = (6, 16, 26)
HALF_SIZE = {"small": 4, "medium": 6}
MARKER_OFFSETS = {
    "small": {0: [], 1: [(-1, -1)], 2: [(-3, -1), (1, -1)], 3: [(-3, -3), (1, -3), (-1, 1)]},
    "medium": {0: [], 1: [(-1, -1)], 2: [(-4, -1), (2, -1)], 3: [(-4, -4), (2, -4), (-1, 2)]},
}


class BenchmarkConfigError(ValueError):
    pass


class BenchmarkQualityError(RuntimeError):
    """Probe classifiers did not reach the accuracy floor."""


@dataclass(frozen=True)
class SubjectSpec:
    shape: str
    fill: str
    marker: int

    def __post_init__(self):
        if self.shape not in SHAPES or self.fill not in PALETTE or self.marker not in MARKERS:
            raise BenchmarkConfigError(f"invalid subject {self}")


@dataclass(frozen=True)
class SceneSpec:
    bg_color: str
    texture: str
    position: int  # 0..8, row-major on the 3x3 grid
    scale: str

    def __post_init__(self):
        if (
            self.bg_color not in PALETTE
            or self.texture not in TEXTURES
            or self.position not in range(9)
            or self.scale not in SCALES
        ):
            raise BenchmarkConfigError(f"invalid scene {self}")

    @property
    def center(self) -> tuple[int, int]:
        return CENTERS[self.position // 3], CENTERS[self.position % 3]


# Four subjects of one class: identity lives in the fill color and marker count,
# so the class word alone never identifies the subject.
BENCHMARK_SUBJECTS = (
    SubjectSpec("square", "red", 1),
    SubjectSpec("square", "blue", 3),
    SubjectSpec("square", "green", 0),
    SubjectSpec("square", "yellow", 2),
)


def all_scenes() -> list[SceneSpec]:
    return [
        SceneSpec(c, tex, pos, sc)
        for c, tex, pos, sc in itertools.product(COLORS, TEXTURES, range(9), SCALES)
    ]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def to_unit(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) / 127.5 - 1.0


def shape_mask(shape: str, half: int) -> np.ndarray:
    d = np.arange(-half, half) + 0.5
    v, u = np.meshgrid(d, d, indexing="ij")
    if shape == "square":
        m = np.ones_like(u, dtype=bool)
    elif shape == "circle":
        m = u * u + v * v <= half * half
    elif shape == "triangle":
        m = np.abs(u) <= (v + half) / 2.0
    elif shape == "cross":
        m = (np.abs(u) <= half / 2.5) | (np.abs(v) <= half / 2.5)
    else:
        raise BenchmarkConfigError(f"unknown shape {shape!r}")
    return m


def _outline(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~inner


def subject_sprite(subject: SubjectSpec, scale: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (mask, rgb bytes) of the subject in its local 2h x 2h window."""
    half = HALF_SIZE[scale]
    mask = shape_mask(subject.shape, half)
    edge = _outline(mask)
    rgb = np.zeros(mask.shape + (3,), dtype=np.int64)
    rgb[mask] = PALETTE[subject.fill]
    rgb[edge] = INK
    interior = mask & ~edge
    for oy, ox in MARKER_OFFSETS[scale][subject.marker]:
        for dy in (0, 1):
            for dx in (0, 1):
                y, x = half + oy + dy, half + ox + dx
                if interior[y, x]:
                    rgb[y, x] = INK
    return mask, rgb


def background(scene: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    base = np.array(PALETTE[scene.bg_color], dtype=np.int64)
    shade = base * 11 // 20
    yy, xx = np.mgrid[0:size, 0:size]
    if scene.texture == "plain":
        alt = np.zeros((size, size), dtype=bool)
    elif scene.texture == "stripes":
        alt = (yy // 4) % 2 == 1
    else:
        alt = ((yy // 4) + (xx // 4)) % 2 == 1
    rgb = np.where(alt[..., None], shade, base)
    return rgb


def render_bytes(subject: Optional[SubjectSpec], scene: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """(H, W, 3) uint8 raster; ``subject=None`` renders the background only."""
    rgb = background(scene, size)
    if subject is not None:
        mask, sprite = subject_sprite(subject, scene.scale)
        half = HALF_SIZE[scene.scale]
        cy, cx = scene.center
        window = rgb[cy - half : cy + half, cx - half : cx + half]
        window[mask] = sprite[mask]
    return rgb.astype(np.uint8)


def render(subject: Optional[SubjectSpec], scene: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """(3, H, W) float32 image in [-1, 1]."""
    raster = render_bytes(subject, scene, size)
    return (np.transpose(raster, (2, 0, 1)).astype(np.float32) / np.float32(127.5) - np.float32(1.0))


def render_batch(pairs: Sequence[tuple], size: int = IMAGE_SIZE) -> np.ndarray:
    return np.stack([render(s, c, size) for s, c in pairs])


# ---------------------------------------------------------------------------
# subject sets and prompts
# ---------------------------------------------------------------------------


def prompt_for(shape: str, bg_color: Optional[str] = None, texture: Optional[str] = None, token: str = SUBJECT_TOKEN) -> str:
    """``a S* <class>`` optionally followed by ``on <color> <texture>``."""
    if shape not in SHAPES:
        raise BenchmarkConfigError(f"unknown class word {shape!r}")
    words = ["a", token, shape] if token else ["a", shape]
    if bg_color is not None or texture is not None:
        if bg_color not in PALETTE or texture not in TEXTURES:
            raise BenchmarkConfigError(f"unknown background words {bg_color!r} {texture!r}")
        words += ["on", bg_color, texture]
    return " ".join(words)


def parse_prompt(prompt: str) -> dict:
    """Inverse of :func:`prompt_for`; raises on anything outside the grammar."""
    words = prompt.split()
    bad = BenchmarkConfigError(f"prompt outside the closed grammar: {prompt!r}")
    if len(words) < 2 or words[0] != "a":
        raise bad
    rest = words[1:]
    token = None
    if rest and rest[0] not in SHAPES:
        token = rest.pop(0)
    if not rest or rest[0] not in SHAPES:
        raise bad
    out = {"token": token, "shape": rest[0], "bg_color": None, "texture": None}
    rest = rest[1:]
    if rest:
        if len(rest) != 3 or rest[0] != "on" or rest[1] not in PALETTE or rest[2] not in TEXTURES:
            raise bad
        out["bg_color"], out["texture"] = rest[1], rest[2]
    return out


@dataclass
class SubjectSet:
    subject_id: int
    subject: SubjectSpec
    prompt: str
    images: np.ndarray  # (K, 3, H, W)
    scenes: list = field(default_factory=list)

    def __post_init__(self):
        if self.prompt.split().count(SUBJECT_TOKEN) != 1:
            raise BenchmarkConfigError("subject prompt must contain the subject token exactly once")
        if len(self.images) != len(self.scenes):
            raise BenchmarkConfigError("one scene label per image required")

    @property
    def K(self) -> int:
        return len(self.images)

    @property
    def factor_labels(self) -> list[dict]:
        s = self.subject
        return [
            {"shape": s.shape, "fill": s.fill, "marker": s.marker, "bg_color": c.bg_color,
             "texture": c.texture, "position": c.position, "scale": c.scale}
            for c in self.scenes
        ]


def make_subject_set(subject: SubjectSpec, K: int = 4, seed: int = 0, subject_id: int = 0,
                     k_range: tuple = (3, 5)) -> SubjectSet:
    """Sample ``K`` distinct scenes for one subject (distinct backgrounds while possible)."""
    scenes = all_scenes()
    if K < 1 or K > len(scenes):
        raise BenchmarkConfigError(f"K={K} outside 1..{len(scenes)} distinct scenes")
    if k_range is not None and not k_range[0] <= K <= k_range[1]:
        raise BenchmarkConfigError(f"K={K} outside the configured range {k_range}")
    rng = np.random.default_rng(seed)
    if K <= len(COLORS):
        colors = [COLORS[i] for i in rng.permutation(len(COLORS))[:K]]
        chosen = [
            SceneSpec(c, TEXTURES[rng.integers(3)], int(rng.integers(9)), SCALES[rng.integers(2)])
            for c in colors
        ]
    else:
        chosen = [scenes[i] for i in rng.permutation(len(scenes))[:K]]
    images = np.stack([render(subject, sc) for sc in chosen])
    return SubjectSet(subject_id, subject, prompt_for(subject.shape), images, chosen)


def benchmark_grid(subjects: Sequence[SubjectSpec] = BENCHMARK_SUBJECTS) -> list[tuple[int, SubjectSpec, SceneSpec]]:
    return [(i, s, sc) for i, s in enumerate(subjects) for sc in all_scenes()]


def check_vocabulary(vocab: Vocabulary, length: int = 8) -> None:
    for shape in SHAPES:
        for c in COLORS:
            for tex in TEXTURES:
                tokenize(prompt_for(shape, c, tex), vocab, length)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


class ProbeNet(Module):
    """Three stride-2 conv stages, global average pool, one linear head per factor."""

    def __init__(self, heads: dict[str, int], seed: int = 0, width: int = 32):
        rng = np.random.default_rng(seed)
        self.c1 = Conv2d(3, 16, rng, stride=2)
        self.c2 = Conv2d(16, width, rng, stride=2)
        self.c3 = Conv2d(width, width, rng, stride=2)
        self.head_names = list(heads)
        self.heads = {name: Linear(width, n, rng) for name, n in heads.items()}

    def embed(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        h = ad.transpose(x, (0, 2, 3, 1))
        h = ad.relu(self.c1(h))
        h = ad.relu(self.c2(h))
        h = ad.relu(self.c3(h))
        return ad.mean(h, axis=(1, 2))

    def __call__(self, images) -> dict[str, Tensor]:
        e = self.embed(images)
        return {name: self.heads[name](e) for name in self.head_names}

    def predict_logits(self, images, batch: int = 256) -> dict[str, np.ndarray]:
        out = {name: [] for name in self.head_names}
        with ad.no_grad():
            for i in range(0, len(images), batch):
                logits = self(np.asarray(images[i : i + batch]))
                for name in self.head_names:
                    out[name].append(logits[name].data)
        return {k: np.concatenate(v) for k, v in out.items()}

    def embeddings(self, images, batch: int = 256) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate([self.embed(np.asarray(images[i : i + batch])).data
                                   for i in range(0, len(images), batch)])


SUBJECT_HEADS = {"shape": len(SHAPES), "fill": len(COLORS), "marker": len(MARKERS)}
BACKGROUND_HEADS = {"bg_color": len(COLORS), "texture": len(TEXTURES)}


def label_arrays(subjects: Sequence[SubjectSpec], scenes: Sequence[SceneSpec]) -> dict[str, np.ndarray]:
    return {
        "shape": np.array([SHAPES.index(s.shape) for s in subjects]),
        "fill": np.array([COLORS.index(s.fill) for s in subjects]),
        "marker": np.array([s.marker for s in subjects]),
        "bg_color": np.array([COLORS.index(c.bg_color) for c in scenes]),
        "texture": np.array([TEXTURES.index(c.texture) for c in scenes]),
    }


@dataclass
class ProbeSet:
    subject_probe: ProbeNet
    background_probe: ProbeNet
    seed: int
    accuracy: dict

    def freeze(self) -> "ProbeSet":
        self.subject_probe.freeze()
        self.background_probe.freeze()
        return self

    def checksum(self) -> str:
        return self.subject_probe.checksum() + self.background_probe.checksum()

    def subject_embeddings(self, images) -> np.ndarray:
        return self.subject_probe.embeddings(images)

    def identify_subjects(self, images, candidates: Sequence[SubjectSpec]) -> np.ndarray:
        """Index of the most probable candidate subject for every image."""
        logits = self.subject_probe.predict_logits(images)
        logp = {k: v - _logsumexp(v) for k, v in logits.items()}
        scores = np.stack([
            logp["shape"][:, SHAPES.index(c.shape)]
            + logp["fill"][:, COLORS.index(c.fill)]
            + logp["marker"][:, c.marker]
            for c in candidates
        ], axis=1)
        return scores.argmax(axis=1)

    def predict_backgrounds(self, images) -> tuple[np.ndarray, np.ndarray]:
        logits = self.background_probe.predict_logits(images)
        return logits["bg_color"].argmax(axis=1), logits["texture"].argmax(axis=1)


def _logsumexp(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=1, keepdims=True)
    return m + np.log(np.exp(v - m).sum(axis=1, keepdims=True))


def _fit_probe(net: ProbeNet, images, labels, rng, steps, batch, lr, noise) -> None:
    opt = AdamW(net.trainable(), lr=lr, weight_decay=1e-4)
    n = len(images)
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch)
        x = images[idx]
        if noise:
            x = np.clip(x + rng.normal(0.0, noise, size=x.shape).astype(x.dtype), -1.0, 1.0)
        logits = net(x)
        loss = None
        for name in net.head_names:
            term = ad.cross_entropy(logits[name], labels[name][idx])
            loss = term if loss is None else loss + term
        opt.zero_grad()
        ad.backward(loss)
        opt.step()


def head_accuracy(net: ProbeNet, images, labels) -> dict[str, float]:
    logits = net.predict_logits(images)
    return {k: float((logits[k].argmax(axis=1) == labels[k]).mean()) for k in net.head_names}


def train_probes(images: np.ndarray, subjects: Sequence[SubjectSpec], scenes: Sequence[SceneSpec],
                 seed: int = 0, steps: int = 1500, batch: int = 64, lr: float = 3e-3,
                 noise: float = 0.1, holdout: float = 0.2, floor: float = 0.9) -> ProbeSet:
    """Fit subject and background probes on labeled renders, then freeze them."""
    labels = label_arrays(subjects, scenes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_test = int(round(holdout * len(images)))
    test, train = order[:n_test], order[n_test:]
    tr_labels = {k: v[train] for k, v in labels.items()}
    te_labels = {k: v[test] for k, v in labels.items()}
    subject_probe = ProbeNet(SUBJECT_HEADS, seed=seed)
    background_probe = ProbeNet(BACKGROUND_HEADS, seed=seed + 1)
    _fit_probe(subject_probe, images[train], tr_labels, rng, steps, batch, lr, noise)
    _fit_probe(background_probe, images[train], tr_labels, rng, steps, batch, lr, noise)
    accuracy = {}
    accuracy.update({f"subject.{k}": v for k, v in head_accuracy(subject_probe, images[test], te_labels).items()})
    accuracy.update({f"background.{k}": v for k, v in head_accuracy(background_probe, images[test], te_labels).items()})
    probes = ProbeSet(subject_probe, background_probe, seed, accuracy).freeze()
    worst = min(accuracy.values())
    if worst < floor:
        raise BenchmarkQualityError(f"probe accuracy {worst:.3f} below floor {floor}: {accuracy}")
    return probes


# ---------------------------------------------------------------------------
# captioned data for the base denoiser
# ---------------------------------------------------------------------------


def base_caption(shape: str, scene: Optional[SceneSpec]) -> str:
    if scene is None:
        return prompt_for(shape, token=None)
    return prompt_for(shape, scene.bg_color, scene.texture, token=None)


class CaptionedSampler:
    """Random (subject, scene) renders over the whole factor space with captions.

    Captions name the class and, with probability ``p_background``, the
    background; fill color and markers are never described. With probability
    ``p_uncond`` the condition is dropped to all zeros, so the base model also
    learns an unconditional mode.
    """

    def __init__(self, text_encoder, batch: int = 16, p_background: float = 0.75, p_uncond: float = 0.1):
        self.encoder = text_encoder
        self.batch = batch
        self.p_background = p_background
        self.p_uncond = p_uncond
        self._cache: dict[str, np.ndarray] = {}

    def condition(self, caption: str) -> np.ndarray:
        if caption not in self._cache:
            self._cache[caption] = self.encoder.encode_prompt(caption).data
        return self._cache[caption]

    def __call__(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        images, conds = [], []
        for _ in range(self.batch):
            subject = SubjectSpec(SHAPES[rng.integers(4)], COLORS[rng.integers(8)], int(rng.integers(4)))
            scene = SceneSpec(COLORS[rng.integers(8)], TEXTURES[rng.integers(3)], int(rng.integers(9)),
                              SCALES[rng.integers(2)])
            images.append(render(subject, scene))
            described = scene if rng.random() < self.p_background else None
            cond = self.condition(base_caption(subject.shape, described))
            conds.append(np.zeros_like(cond) if rng.random() < self.p_uncond else cond)
        return np.stack(images).astype(np.float64), np.stack(conds)
