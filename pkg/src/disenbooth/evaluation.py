"""Probe-based metrics and the disentanglement demonstrations.

All generation here is seeded; a fixed personalized model, probe set and seed
always produce the same report.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .adaptation import MaskAdapter
from .autodiff import Tensor, no_grad
from .diffusion import Denoiser, NoiseSchedule, ddim_sample
from .encoders import ImageEncoder, InputError, TextEncoder
from .synthbench import BENCHMARK_SUBJECTS, COLORS, TEXTURES, SubjectSet, parse_prompt, prompt_for

DEFAULT_ETAS = (0.0, 0.2, 0.4, 0.6, 0.8)


@dataclass
class Personalized:
    """A tuned denoiser together with everything needed to condition it."""

    model: Denoiser
    adapter: object
    schedule: NoiseSchedule
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    prompt: str
    ddim_steps: int = 50

    @classmethod
    def from_state(cls, state, ddim_steps: int = 50) -> "Personalized":
        return cls(state.model, state.adapter, state.schedule, state.text_encoder,
                   state.image_encoder, state.prompt, ddim_steps)

    def text_condition(self, prompt: Optional[str] = None) -> np.ndarray:
        return self.text_encoder.encode_prompt(self.prompt if prompt is None else prompt).data

    def image_condition(self, image: np.ndarray) -> np.ndarray:
        f_p = self.image_encoder.encode_batch(np.asarray(image)[None])[0]
        with no_grad():
            return self.adapter(Tensor(f_p)).data

    def generate(self, cond: np.ndarray, n: int, seed: int) -> np.ndarray:
        """``n`` images in [-1, 1] from one (L, d) condition or a stack of n."""
        x = ddim_sample(self.model, cond, self.ddim_steps, seed, self.schedule, n=n, clip=1.0)
        return np.clip(x, -1.0, 1.0).astype(np.float32)


def _cos_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a @ b.T) / np.maximum(na * nb.T, 1e-12)


def embedding_identity_score(gen_emb: np.ndarray, real_emb: np.ndarray) -> float:
    if len(gen_emb) == 0 or len(real_emb) == 0:
        raise InputError("identity score needs at least one generated and one real image")
    return float(np.clip(_cos_matrix(gen_emb, real_emb).mean(), -1.0, 1.0))


def identity_score_bruteforce(gen_emb: np.ndarray, real_emb: np.ndarray) -> float:
    """Reference double loop over every (generated, real) pair."""
    if len(gen_emb) == 0 or len(real_emb) == 0:
        raise InputError("identity score needs at least one generated and one real image")
    total = 0.0
    for g in gen_emb:
        for r in real_emb:
            g64, r64 = np.asarray(g, np.float64), np.asarray(r, np.float64)
            den = math.sqrt(float(g64 @ g64)) * math.sqrt(float(r64 @ r64))
            total += float(g64 @ r64) / max(den, 1e-12)
    return total / (len(gen_emb) * len(real_emb))


def identity_score(generated: np.ndarray, real: np.ndarray, probes) -> float:
    """Mean cosine over all (generated, real) pairs of subject-probe embeddings."""
    if len(generated) == 0 or len(real) == 0:
        raise InputError("identity score needs at least one generated and one real image")
    return embedding_identity_score(probes.subject_embeddings(generated), probes.subject_embeddings(real))


def prompt_fidelity(generated: np.ndarray, prompt: str, probes) -> float:
    """Fraction of the prompt's background factors the background probe recovers."""
    try:
        factors = parse_prompt(prompt)
    except Exception as exc:
        raise InputError(f"prompt outside the closed grammar: {prompt!r}") from exc
    if factors.get("bg_color") is None:
        raise InputError(f"prompt names no background: {prompt!r}")
    if len(generated) == 0:
        raise InputError("no generated images")
    color, texture = probes.predict_backgrounds(generated)
    hits = (color == COLORS.index(factors["bg_color"])).astype(float)
    hits += (texture == TEXTURES.index(factors["texture"])).astype(float)
    return float(hits.mean() / 2.0)


def fs_only_probe(pm: Personalized, subject_set: SubjectSet, probes, n: int = 32, seed: int = 0,
                  candidates: Sequence = BENCHMARK_SUBJECTS, return_images: bool = False):
    """Generate from the subject prompt alone.

    Returns (subject accuracy, background accuracy); a background counts as
    recovered when its predicted (color, texture) pair belongs to a training image.
    """
    images = pm.generate(pm.text_condition(subject_set.prompt), n, seed)
    ids = probes.identify_subjects(images, candidates)
    subj = float((ids == subject_set.subject_id).mean())
    color, texture = probes.predict_backgrounds(images)
    seen = {(COLORS.index(s.bg_color), TEXTURES.index(s.texture)) for s in subject_set.scenes}
    bg = float(np.mean([(c, t) in seen for c, t in zip(color, texture)]))
    return (subj, bg, images) if return_images else (subj, bg)


def fi_only_conditions(pm: Personalized, subject_set: SubjectSet, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero text plus broadcast f_i, cycling through the source images."""
    L, d = pm.text_condition(subject_set.prompt).shape
    f_i = np.stack([pm.image_condition(img) for img in subject_set.images])
    source = np.arange(n) % subject_set.K
    conds = np.zeros((n, L, d), dtype=f_i.dtype) + f_i[source][:, None, :]
    return conds, source


def fi_only_probe(pm: Personalized, subject_set: SubjectSet, probes, n: int = 32, seed: int = 0,
                  candidates: Sequence = BENCHMARK_SUBJECTS, return_images: bool = False):
    """Generate from f_i alone; background color is scored against each source image."""
    conds, source = fi_only_conditions(pm, subject_set, n)
    images = pm.generate(conds, n, seed)
    ids = probes.identify_subjects(images, candidates)
    subj = float((ids == subject_set.subject_id).mean())
    color, _ = probes.predict_backgrounds(images)
    truth = np.array([COLORS.index(subject_set.scenes[k].bg_color) for k in source])
    bg = float((color == truth).mean())
    return (subj, bg, images) if return_images else (subj, bg)


def eta_sweep(pm: Personalized, prompt: str, reference: np.ndarray, probes,
              etas: Sequence[float] = DEFAULT_ETAS, seed: int = 0, n: int = 8,
              return_images: bool = False):
    """Condition on ``f'_s + eta * f_i`` with one sampling seed for every eta.

    Each curve entry is (eta, mean cosine between the generations' and the
    reference's subject-probe embeddings).
    """
    etas = [float(e) for e in etas]
    if not etas or etas[0] != 0.0 or any(b <= a for a, b in zip(etas, etas[1:])):
        raise InputError(f"etas must start at 0 and increase strictly: {etas}")
    f_s = pm.text_condition(prompt)
    f_i = pm.image_condition(reference)
    ref_emb = probes.subject_embeddings(np.asarray(reference)[None])
    curve, grids = [], []
    for eta in etas:
        images = pm.generate(f_s + eta * f_i, n, seed)
        curve.append((eta, embedding_identity_score(probes.subject_embeddings(images), ref_emb)))
        grids.append(images)
    return (curve, grids) if return_images else curve


def sweep_setup(subject_set: SubjectSet) -> tuple[str, np.ndarray]:
    """Prompt naming a background absent from the training set, and the first image as reference."""
    ref_scene = subject_set.scenes[0]
    color = next(c for c in COLORS if c not in {s.bg_color for s in subject_set.scenes})
    texture = next(t for t in TEXTURES if t != ref_scene.texture)
    return prompt_for(subject_set.subject.shape, color, texture), subject_set.images[0]


def rank_correlation(curve: Sequence[tuple[float, float]]) -> float:
    """Spearman correlation of the curve; a flat curve scores 0."""
    xs, ys = zip(*curve)
    if np.ptp(ys) == 0:
        return 0.0
    return float(spearmanr(xs, ys).statistic)


@dataclass
class EvalReport:
    identity_score: Optional[float] = None
    prompt_fidelity: Optional[float] = None
    fs_only: Optional[tuple[float, float]] = None
    fi_only: Optional[tuple[float, float]] = None
    eta_curve: list = field(default_factory=list)
    config_digest: str = ""
    seed: int = 0
    n: int = 0
    label: str = ""

    def __post_init__(self):
        for pair in (self.fs_only, self.fi_only):
            if pair is not None and not all(0.0 <= v <= 1.0 for v in pair):
                raise ValueError(f"accuracies must lie in [0, 1]: {pair}")
        if self.prompt_fidelity is not None and not 0.0 <= self.prompt_fidelity <= 1.0:
            raise ValueError("prompt fidelity must lie in [0, 1]")
        if self.identity_score is not None and not -1.0 <= self.identity_score <= 1.0:
            raise ValueError("identity score must lie in [-1, 1]")
        etas = [e for e, _ in self.eta_curve]
        if any(b <= a for a, b in zip(etas, etas[1:])):
            raise ValueError("eta values must increase strictly")

    def rows(self) -> list[tuple]:
        prefix = f"{self.label}." if self.label else ""
        out = []

        def add(name, value, n=self.n):
            out.append((prefix + name, repr(float(value)), self.seed, n))

        if self.identity_score is not None:
            add("identity_score", self.identity_score)
        if self.prompt_fidelity is not None:
            add("prompt_fidelity", self.prompt_fidelity)
        if self.fs_only is not None:
            add("fs_only.subject_acc", self.fs_only[0])
            add("fs_only.background_acc", self.fs_only[1])
        if self.fi_only is not None:
            add("fi_only.subject_acc", self.fi_only[0])
            add("fi_only.background_acc", self.fi_only[1])
        for eta, cos in self.eta_curve:
            add(f"eta_curve.{eta:.1f}", cos)
        if self.eta_curve:
            add("eta_curve.spearman", rank_correlation(self.eta_curve))
        return out


ABLATION_VARIANTS = {
    "full": {},
    "no_L2": {"lambda2": 0.0},
    "no_L3": {"lambda3": 0.0},
    "no_adapter": {"use_adapter": False},
}


def run_ablations(subject_set: SubjectSet, config, trainer: Callable, evaluator: Callable,
                  variants: Optional[Sequence[str]] = None, log: Callable = print) -> dict[str, Optional[EvalReport]]:
    """Train and evaluate the ablation variants from one base config.

    ``trainer(subject_set, config) -> Personalized`` and
    ``evaluator(pm, subject_set, config) -> EvalReport``. A variant that fails
    to train is logged and reported as None; the others still run.
    """
    names = list(ABLATION_VARIANTS) if variants is None else list(variants)
    table = {}
    for name in names:
        cfg = replace(config, **ABLATION_VARIANTS[name])
        try:
            pm = trainer(subject_set, cfg)
            report = evaluator(pm, subject_set, cfg)
        except (FloatingPointError, ValueError, ArithmeticError) as exc:
            log(f"ablation {name} failed: {exc}")
            table[name] = None
            continue
        report.label = name
        report.config_digest = hashlib.sha256(f"seed={config.seed}".encode()).hexdigest()
        table[name] = report
    return table
