"""Glue between configs, cached artifacts and the training/eval modules.

A data directory produced by ``gen-data`` holds::

    config.txt      run config used to build it
    manifest.csv    one row per subject image
    images/         s<subject>_<k>.ppm training images
    probes.ckpt     frozen subject and background probes
    base.ckpt       pretrained base denoiser (EMA weights)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .adaptation import FixedProjection, MaskAdapter, inject_lora
from .diffusion import Denoiser, DenoiserConfig, make_schedule, pretrain_base
from .encoders import ImageEncoder, TextEncoder, Vocabulary
from .evaluation import Personalized
from .storage import (MANIFEST_COLUMNS, RunConfig, entry_text, load_checkpoint, loads_config,
                      read_csv, read_ppm, save_checkpoint, text_entry, write_csv, write_ppm)
from .synthbench import (BENCHMARK_SUBJECTS, CaptionedSampler, ProbeNet, ProbeSet, SUBJECT_HEADS,
                         BACKGROUND_HEADS, SceneSpec, SubjectSet, benchmark_grid, make_subject_set,
                         prompt_for, render_batch, train_probes)
from .tuning import TrainConfig, TrainState, init_state, train, trainable_tensors

PROBE_FLOOR = 0.95


class DependencyError(RuntimeError):
    """A required cached artifact is missing."""


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(latent_shape=(3, cfg.image_size, cfg.image_size), cond_dim=cfg.cond_dim,
                          cond_len=cfg.cond_len, base_channels=cfg.base_channels, timesteps=cfg.timesteps)


def train_config(cfg: RunConfig, **overrides) -> TrainConfig:
    values = dict(lambda2=cfg.lambda2, lambda3=cfg.lambda3, lr=cfg.lr, iterations=cfg.iterations,
                  batch=cfg.batch, seed=cfg.seed, lora_rank=cfg.lora_rank, use_adapter=cfg.use_adapter)
    values.update(overrides)
    return TrainConfig(**values)


def encoders(cfg: RunConfig) -> tuple[TextEncoder, ImageEncoder]:
    return (TextEncoder(Vocabulary.load(), dim=cfg.cond_dim, length=cfg.cond_len),
            ImageEncoder(dim=cfg.cond_dim, image_size=cfg.image_size))


BASE_RECIPE = 2  # bump when the pretraining procedure changes so cached bases are rebuilt


def base_digest_text(cfg: RunConfig) -> str:
    keys = ("seed", "image_size", "cond_dim", "cond_len", "timesteps", "base_channels", "pretrain_steps")
    lines = [f"recipe = {BASE_RECIPE}"] + [f"{k} = {getattr(cfg, k)}" for k in keys]
    return "\n".join(lines) + "\n"


def subject_sets(cfg: RunConfig) -> list[SubjectSet]:
    return [make_subject_set(s, K=cfg.k_images, seed=cfg.seed * 100 + i, subject_id=i, k_range=None)
            for i, s in enumerate(BENCHMARK_SUBJECTS)]


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def probe_tensors(probes: ProbeSet) -> dict[str, np.ndarray]:
    out = {f"subject.{n}": p.data for n, p in probes.subject_probe.named_parameters()}
    out.update({f"background.{n}": p.data for n, p in probes.background_probe.named_parameters()})
    out["__meta__"] = text_entry(json.dumps({"seed": probes.seed, "accuracy": probes.accuracy}, sort_keys=True))
    return out


def probes_from_tensors(tensors: dict[str, np.ndarray]) -> ProbeSet:
    meta = json.loads(entry_text(tensors["__meta__"]))
    subject = ProbeNet(SUBJECT_HEADS, seed=meta["seed"])
    background = ProbeNet(BACKGROUND_HEADS, seed=meta["seed"] + 1)
    subject.load_state_dict({k[len("subject."):]: v for k, v in tensors.items() if k.startswith("subject.")})
    background.load_state_dict({k[len("background."):]: v for k, v in tensors.items() if k.startswith("background.")})
    return ProbeSet(subject, background, meta["seed"], meta["accuracy"]).freeze()


def fit_probes(cfg: RunConfig) -> ProbeSet:
    grid = benchmark_grid()
    images = render_batch([(s, c) for _, s, c in grid])
    return train_probes(images, [s for _, s, _ in grid], [c for _, _, c in grid], seed=cfg.seed,
                        steps=cfg.probe_steps, floor=PROBE_FLOOR)


# ---------------------------------------------------------------------------
# data directory
# ---------------------------------------------------------------------------


@dataclass
class DataDir:
    root: str

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def manifest(self) -> str:
        return self.path("manifest.csv")

    @property
    def probes(self) -> str:
        return self.path("probes.ckpt")

    @property
    def base(self) -> str:
        return self.path("base.ckpt")

    def config(self) -> RunConfig:
        with open(self.path("config.txt")) as fh:
            return loads_config(fh.read())

    def load_probes(self) -> ProbeSet:
        if not os.path.exists(self.probes):
            raise DependencyError(f"no probes at {self.probes}; run `disenbooth gen-data` first")
        tensors, _ = load_checkpoint(self.probes)
        return probes_from_tensors(tensors)

    def load_base(self) -> dict[str, np.ndarray]:
        if not os.path.exists(self.base):
            raise DependencyError(f"no base denoiser at {self.base}; run `disenbooth gen-data` first")
        tensors, _ = load_checkpoint(self.base)
        return tensors

    def subject_set(self, subject_id: int) -> SubjectSet:
        if not os.path.exists(self.manifest):
            raise DependencyError(f"no manifest at {self.manifest}; run `disenbooth gen-data` first")
        rows = [r for r in read_csv(self.manifest) if int(r["subject_id"]) == subject_id]
        if not rows:
            raise KeyError(f"subject {subject_id} not in manifest")
        images = np.stack([read_ppm(self.path(r["image_path"])) for r in rows])
        scenes = [SceneSpec(r["bg_color"], r["texture"], int(r["pos"]), r["scale"]) for r in rows]
        subject = BENCHMARK_SUBJECTS[subject_id]
        return SubjectSet(subject_id, subject, prompt_for(subject.shape), images, scenes)


def generate_data(cfg: RunConfig, out: str, log: Callable[[str], None] = print,
                  base_cache: Optional[str] = None) -> DataDir:
    """Write subject images, manifest, probes and the base denoiser into ``out``.

    An existing base checkpoint built from the same settings is reused, as is
    one at ``base_cache``.
    """
    d = DataDir(out)
    os.makedirs(d.path("images"), exist_ok=True)
    with open(d.path("config.txt"), "w") as fh:
        fh.write(cfg.dumps())
    rows = []
    for ss in subject_sets(cfg):
        for k, (img, sc) in enumerate(zip(ss.images, ss.scenes)):
            rel = f"images/s{ss.subject_id}_{k}.ppm"
            write_ppm(d.path(rel), img)
            s = ss.subject
            rows.append((rel, ss.subject_id, s.shape, s.fill, s.marker, sc.bg_color, sc.texture, sc.position, sc.scale))
    write_csv(d.manifest, MANIFEST_COLUMNS, rows)
    log(f"wrote {len(rows)} subject images")

    probes = fit_probes(cfg)
    save_checkpoint(d.probes, probe_tensors(probes), cfg.dumps())
    for name, acc in sorted(probes.accuracy.items()):
        log(f"probe {name}: {acc:.4f}")

    digest_text = base_digest_text(cfg)
    for candidate in (d.base, base_cache):
        if candidate and os.path.exists(candidate):
            tensors, text = load_checkpoint(candidate)
            if text == digest_text:
                if candidate != d.base:
                    save_checkpoint(d.base, tensors, digest_text)
                log(f"reusing base denoiser from {candidate}")
                return d
    tensors = pretrain(cfg, log)
    save_checkpoint(d.base, tensors, digest_text)
    if base_cache:
        os.makedirs(os.path.dirname(os.path.abspath(base_cache)), exist_ok=True)
        save_checkpoint(base_cache, tensors, digest_text)
    return d


def pretrain(cfg: RunConfig, log: Callable[[str], None] = print) -> dict[str, np.ndarray]:
    text_encoder, _ = encoders(cfg)
    model = Denoiser(denoiser_config(cfg), seed=cfg.seed)
    sched = make_schedule(cfg.timesteps)
    window = []

    def report(step, loss):
        window.append(loss)
        if step % 500 == 0:
            log(f"pretrain step {step}: loss {np.mean(window):.4f}")
            window.clear()

    pretrain_base(model, CaptionedSampler(text_encoder), sched, cfg.pretrain_steps, seed=cfg.seed, log=report)
    return model.state_dict()


# ---------------------------------------------------------------------------
# personalization
# ---------------------------------------------------------------------------


def start_tuning(cfg: RunConfig, base_state: dict, subject_set: SubjectSet,
                 tcfg: Optional[TrainConfig] = None) -> TrainState:
    text_encoder, image_encoder = encoders(cfg)
    return init_state(base_state, denoiser_config(cfg), make_schedule(cfg.timesteps), text_encoder,
                      image_encoder, subject_set.prompt, tcfg or train_config(cfg))


def finetune(cfg: RunConfig, base_state: dict, subject_set: SubjectSet, tcfg: Optional[TrainConfig] = None,
             log_path: Optional[str] = None, progress=None) -> TrainState:
    state = start_tuning(cfg, base_state, subject_set, tcfg)
    train(state, subject_set.images, log_path=log_path, progress=progress)
    return state


def checkpoint_tensors(state: TrainState, subject_id: int) -> dict[str, np.ndarray]:
    out = trainable_tensors(state)
    meta = {"subject_id": subject_id, "prompt": state.prompt, "use_adapter": state.config.use_adapter,
            "lora_rank": state.config.lora_rank, "seed": state.config.seed, "iteration": state.iteration}
    out["__meta__"] = text_entry(json.dumps(meta, sort_keys=True))
    return out


def personalized_from_checkpoint(path: str, base_state: dict) -> tuple[Personalized, RunConfig, dict]:
    tensors, text = load_checkpoint(path)
    cfg = loads_config(text)
    meta = json.loads(entry_text(tensors.pop("__meta__")))
    text_encoder, image_encoder = encoders(cfg)
    model = Denoiser(denoiser_config(cfg))
    model.load_state_dict(base_state)
    inject_lora(model, rank=meta["lora_rank"], seed=meta["seed"])
    dim = cfg.cond_dim
    adapter = MaskAdapter(dim, seed=meta["seed"]) if meta["use_adapter"] else FixedProjection(dim, seed=meta["seed"])
    params = {f"unet.{n}": p for n, p in model.named_parameters() if p.requires_grad}
    if meta["use_adapter"]:
        params.update({f"adapter.{n}": p for n, p in adapter.named_parameters()})
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise KeyError(f"checkpoint entries do not match the model: {missing[:5]}")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data[...] = tensors[name]
    pm = Personalized(model, adapter, make_schedule(cfg.timesteps), text_encoder, image_encoder,
                      meta["prompt"], cfg.ddim_steps)
    return pm, cfg, meta
