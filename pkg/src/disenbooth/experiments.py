"""Scaled experiments behind the end-to-end acceptance checks and scripts/."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import evaluation as ev
from .pipeline import DataDir, finetune, train_config
from .storage import RunConfig

ABLATION_SEEDS = (0, 1, 2)
SWEEP_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Bench:
    """A gen-data directory plus a memo of finetuned models keyed by (subject, seed, variant)."""

    cfg: RunConfig
    data: DataDir
    log: Callable[[str], None] = print
    _models: dict = field(default_factory=dict)
    _probes: object = None
    _base: dict = None

    @property
    def probes(self):
        if self._probes is None:
            self._probes = self.data.load_probes()
        return self._probes

    @property
    def base(self) -> dict:
        if self._base is None:
            self._base = self.data.load_base()
        return self._base

    def tuned(self, subject_id: int, seed: int = 0, variant: str = "full") -> ev.Personalized:
        key = (subject_id, seed, variant)
        if key not in self._models:
            cfg = self.cfg.replace(seed=seed, **ev.ABLATION_VARIANTS[variant])
            t0 = time.time()
            state = finetune(cfg, self.base, self.data.subject_set(subject_id), train_config(cfg))
            self.log(f"trained subject {subject_id} seed {seed} {variant} in {time.time() - t0:.0f}s")
            self._models[key] = ev.Personalized.from_state(state, cfg.ddim_steps)
        return self._models[key]


@dataclass
class ProbeResult:
    subject_id: int
    fs_only: tuple
    fi_only: tuple


def disentanglement(bench: Bench, subject_id: int, seed: int = 0, variant: str = "full",
                    n: Optional[int] = None) -> ProbeResult:
    pm = bench.tuned(subject_id, seed, variant)
    ss = bench.data.subject_set(subject_id)
    n = bench.cfg.n_samples if n is None else n
    fs = ev.fs_only_probe(pm, ss, bench.probes, n, seed)
    fi = ev.fi_only_probe(pm, ss, bench.probes, n, seed)
    return ProbeResult(subject_id, fs, fi)


def eta_monotonicity(bench: Bench, subject_id: int = 0, seeds=SWEEP_SEEDS, n: int = 8) -> tuple[float, list]:
    """Median Spearman correlation of the eta curve over sampling seeds."""
    pm = bench.tuned(subject_id)
    prompt, ref = ev.sweep_setup(bench.data.subject_set(subject_id))
    curves = [ev.eta_sweep(pm, prompt, ref, bench.probes, seed=s, n=n) for s in seeds]
    return statistics.median(ev.rank_correlation(c) for c in curves), curves


def ablation_directionality(bench: Bench, subject_id: int = 0, seeds=ABLATION_SEEDS,
                            variants=("full", "no_L2", "no_adapter")) -> dict[str, list[float]]:
    """fs_only subject accuracy per variant and seed."""
    table = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            table[v].append(disentanglement(bench, subject_id, seed, v).fs_only[0])
    return table
