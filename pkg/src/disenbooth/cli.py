"""Command-line entry point: gen-data, train, sample, eval.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import evaluation as ev
from .encoders import PromptLengthError, Vocabulary, VocabularyError, tokenize
from .pipeline import (DataDir, DependencyError, checkpoint_tensors, finetune, generate_data,
                       personalized_from_checkpoint, train_config)
from .storage import (REPORT_COLUMNS, ConfigFileError, image_grid, load_checkpoint, load_config, loads_config, read_ppm,
                      save_checkpoint, write_csv, write_ppm)
from .synthbench import COLORS, TEXTURES, parse_prompt, prompt_for

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disenbooth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the benchmark, fit probes, pretrain the base denoiser")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--base-cache", help="reuse or store the pretrained base denoiser here")

    t = sub.add_parser("train", help="personalize the base denoiser on one subject")
    t.add_argument("--config")
    t.add_argument("--subject", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="gen-data directory (default: out_dir from the config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--lambda3", type=float)
    t.add_argument("--no-adapter", action="store_true")

    s = sub.add_parser("sample", help="generate images from a personalized checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--ref")
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--seed", type=int)
    s.add_argument("--data")

    e = sub.add_parser("eval", help="score a personalized checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--suite", choices=("metrics", "probes", "sweep", "ablate"), required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--n", type=int)
    e.add_argument("--data")
    return p


def _config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    generate_data(cfg, args.out, base_cache=args.base_cache)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    changes = {k: getattr(args, k) for k in ("iterations", "lambda2", "lambda3") if getattr(args, k) is not None}
    if args.no_adapter:
        changes["use_adapter"] = False
    cfg = cfg.replace(**changes)
    data = DataDir(args.data or cfg.out_dir)
    base = data.load_base()
    subject_set = data.subject_set(args.subject)
    log_path = os.path.splitext(args.out)[0] + ".steps.csv"
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    t0 = time.time()

    def progress(rec):
        if rec.iteration % 500 == 0:
            print(f"iter {rec.iteration}: L={rec.L:.5f} L1={rec.L1:.5f} L2={rec.L2:.6f} L3={rec.L3:.6f}", flush=True)

    state = finetune(cfg, base, subject_set, train_config(cfg), log_path=log_path, progress=progress)
    total = sum(p.size for _, p in state.trainable()) + sum(p.size for _, p in state.frozen())
    print(f"trainable parameters: {state.trainable_count()}")
    print(f"total parameters: {total}")
    save_checkpoint(args.out, checkpoint_tensors(state, args.subject), cfg.dumps())
    print(f"wrote {args.out} and {log_path} in {time.time() - t0:.1f}s")
    return EXIT_OK


def _load(args):
    _, text = load_checkpoint(args.ckpt)
    data = DataDir(args.data or loads_config(text).out_dir)
    pm, cfg, meta = personalized_from_checkpoint(args.ckpt, data.load_base())
    return pm, cfg, meta, data


def cmd_sample(args) -> int:
    if args.eta < 0:
        raise UsageError("--eta must be non-negative")
    if args.eta > 0 and not args.ref:
        raise UsageError("--eta > 0 requires --ref")
    if args.n < 1:
        raise UsageError("--n must be positive")
    tokenize(args.prompt, Vocabulary.load())
    parse_prompt(args.prompt)
    pm, cfg, meta, _ = _load(args)
    seed = cfg.seed if args.seed is None else args.seed
    cond = pm.text_condition(args.prompt)
    if args.ref:
        cond = cond + np.float32(args.eta) * pm.image_condition(read_ppm(args.ref))
    images = pm.generate(cond, args.n, seed)
    os.makedirs(args.out, exist_ok=True)
    for i, img in enumerate(images):
        write_ppm(os.path.join(args.out, f"sample_{i:03d}.ppm"), img)
    sidecar = {"seed": seed, "prompt": args.prompt, "eta": args.eta, "ref": args.ref, "n": args.n,
               "ckpt": os.path.basename(args.ckpt), "ddim_steps": cfg.ddim_steps}
    with open(os.path.join(args.out, "provenance.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def _evaluator(probes, seed, n, suites):
    def evaluate(pm, subject_set, cfg, grids=None):
        report = ev.EvalReport(seed=seed, n=n, config_digest=cfg.digest())
        if "metrics" in suites:
            gen = pm.generate(pm.text_condition(subject_set.prompt), n, seed)
            report.identity_score = ev.identity_score(gen, subject_set.images, probes)
            scores = []
            for j, (color, texture) in enumerate(zip(COLORS[::2], TEXTURES * 2)):
                prompt = prompt_for(subject_set.subject.shape, color, texture)
                imgs = pm.generate(pm.text_condition(prompt), max(1, n // 4), seed + 1 + j)
                scores.append(ev.prompt_fidelity(imgs, prompt, probes))
                if grids is not None:
                    grids[f"fidelity_{color}_{texture}"] = imgs
            report.prompt_fidelity = float(np.mean(scores))
            if grids is not None:
                grids["identity"] = gen
        if "probes" in suites:
            *fs, fs_img = ev.fs_only_probe(pm, subject_set, probes, n, seed, return_images=True)
            *fi, fi_img = ev.fi_only_probe(pm, subject_set, probes, n, seed, return_images=True)
            report.fs_only, report.fi_only = tuple(fs), tuple(fi)
            if grids is not None:
                grids["fs_only"], grids["fi_only"] = fs_img, fi_img
        return report

    return evaluate


def cmd_eval(args) -> int:
    pm, cfg, meta, data = _load(args)
    probes = data.load_probes()
    seed = cfg.seed if args.seed is None else args.seed
    n = cfg.n_samples if args.n is None else args.n
    subject_set = data.subject_set(meta["subject_id"])
    os.makedirs(args.out, exist_ok=True)
    grids: dict[str, np.ndarray] = {}
    rows = []
    if args.suite in ("metrics", "probes"):
        report = _evaluator(probes, seed, n, {args.suite})(pm, subject_set, cfg, grids)
        rows = report.rows()
    elif args.suite == "sweep":
        prompt, ref = ev.sweep_setup(subject_set)
        curve, images = ev.eta_sweep(pm, prompt, ref, probes, seed=seed, n=max(1, n // 4), return_images=True)
        rows = ev.EvalReport(eta_curve=curve, seed=seed, n=max(1, n // 4)).rows()
        for eta, imgs in zip(ev.DEFAULT_ETAS, images):
            grids[f"eta_{eta:.1f}"] = imgs
    else:
        base = data.load_base()

        def trainer(ss, c):
            state = finetune(c, base, ss, train_config(c))
            return ev.Personalized.from_state(state, c.ddim_steps)

        table = ev.run_ablations(subject_set, cfg, trainer, _evaluator(probes, seed, n, {"probes"}))
        for name, report in table.items():
            if report is None:
                rows.append((f"{name}.failed", "nan", seed, n))
            else:
                rows.extend(report.rows())
    write_csv(os.path.join(args.out, "report.csv"), REPORT_COLUMNS, rows)
    for name, imgs in grids.items():
        write_ppm(os.path.join(args.out, f"grid_{name}.ppm"), image_grid(imgs))
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigFileError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VocabularyError, PromptLengthError) as exc:
        print(f"vocabulary error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
