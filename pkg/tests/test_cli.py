import json
import os

import numpy as np
import pytest

from disenbooth import cli
from disenbooth.adaptation import trainable_param_count
from disenbooth.pipeline import DataDir, personalized_from_checkpoint
from disenbooth.storage import load_checkpoint, read_csv, read_ppm

SMOKE = """\
seed = 0
iterations = 6
ddim_steps = 4
pretrain_steps = 4
probe_steps = 400
n_samples = 4
"""


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "smoke.cfg"
    cfg.write_text(SMOKE + f"out_dir = {root / 'data'}\n")
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    ckpt = root / "run" / "s0.ckpt"
    assert cli.main(["train", "--config", str(cfg), "--subject", "0", "--out", str(ckpt)]) == 0
    return root, cfg, ckpt


def test_gen_data_outputs(workspace, capsys, tmp_path):
    root, cfg, _ = workspace
    rows = read_csv(str(root / "data" / "manifest.csv"))
    images = os.listdir(root / "data" / "images")
    assert len(rows) == len(images) == 16
    assert set(rows[0]) == {"image_path", "subject_id", "shape", "fill", "marker", "bg_color", "texture", "pos", "scale"}
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(again),
                     "--base-cache", str(root / "data" / "base.ckpt")]) == 0
    out = capsys.readouterr().out
    assert (again / "manifest.csv").read_bytes() == (root / "data" / "manifest.csv").read_bytes()
    accs = [float(line.split()[-1]) for line in out.splitlines() if line.startswith("probe ")]
    assert len(accs) == 5 and min(accs) >= 0.95
    assert "reusing base denoiser" in out


def test_train_outputs(workspace, capsys, tmp_path):
    root, cfg, ckpt = workspace
    steps = read_csv(str(ckpt).replace(".ckpt", ".steps.csv"))
    assert len(steps) == 6
    tensors, text = load_checkpoint(str(ckpt))
    assert "seed = 0" in text
    pm, _, meta = personalized_from_checkpoint(str(ckpt), DataDir(str(root / "data")).load_base())
    out_ckpt = tmp_path / "ablate.ckpt"
    assert cli.main(["train", "--config", str(cfg), "--subject", "1", "--out", str(out_ckpt),
                     "--lambda2", "0", "--lambda3", "0"]) == 0
    out = capsys.readouterr().out
    printed = int(next(l for l in out.splitlines() if l.startswith("trainable parameters")).split()[-1])
    assert printed == trainable_param_count(pm.model, pm.adapter)
    assert all(float(r["L2"]) == 0 and float(r["L3"]) == 0
               for r in read_csv(str(out_ckpt).replace(".ckpt", ".steps.csv")))


def test_sample_eta_zero_ignores_reference(workspace, tmp_path):
    root, _, ckpt = workspace
    ref = root / "data" / "images" / "s0_1.ppm"
    base = ["sample", "--ckpt", str(ckpt), "--prompt", "a S* square on red plain", "--n", "2"]
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--ref", str(ref), "--eta", "0", "--out", str(tmp_path / "b")]) == 0
    for name in ("sample_000.ppm", "sample_001.ppm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert cli.main(base + ["--ref", str(ref), "--eta", "0.4", "--out", str(tmp_path / "c")]) == 0
    side = json.loads((tmp_path / "c" / "provenance.json").read_text())
    assert side["eta"] == 0.4 and side["prompt"] == "a S* square on red plain" and side["seed"] == 0
    assert read_ppm(str(tmp_path / "c" / "sample_000.ppm")).shape == (3, 32, 32)


def test_sample_errors(workspace, tmp_path, capsys):
    _, _, ckpt = workspace
    common = ["sample", "--ckpt", str(ckpt), "--out", str(tmp_path)]
    assert cli.main(common + ["--prompt", "a S* square", "--eta", "0.5"]) == 1
    assert cli.main(common + ["--prompt", "a S* dog"]) == 2
    assert "vocabulary" in capsys.readouterr().err
    assert cli.main(["sample"]) == 1


def test_eval_metrics_and_determinism(workspace, tmp_path):
    _, _, ckpt = workspace
    for d in ("a", "b"):
        assert cli.main(["eval", "--ckpt", str(ckpt), "--suite", "metrics", "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "report.csv").read_bytes()
    assert a == (tmp_path / "b" / "report.csv").read_bytes()
    names = [r["name"] for r in read_csv(str(tmp_path / "a" / "report.csv"))]
    assert names == ["identity_score", "prompt_fidelity"]
    assert (tmp_path / "a" / "grid_identity.ppm").exists()


def test_eval_probes_and_sweep(workspace, tmp_path):
    _, _, ckpt = workspace
    assert cli.main(["eval", "--ckpt", str(ckpt), "--suite", "probes", "--out", str(tmp_path / "p")]) == 0
    rows = read_csv(str(tmp_path / "p" / "report.csv"))
    assert [r["name"] for r in rows][:2] == ["fs_only.subject_acc", "fs_only.background_acc"]
    assert all(0 <= float(r["value"]) <= 1 for r in rows)
    assert cli.main(["eval", "--ckpt", str(ckpt), "--suite", "sweep", "--out", str(tmp_path / "s")]) == 0
    names = [r["name"] for r in read_csv(str(tmp_path / "s" / "report.csv"))]
    assert names[:5] == [f"eta_curve.{e}" for e in ("0.0", "0.2", "0.4", "0.6", "0.8")]


def test_eval_ablate_has_four_variants(workspace, tmp_path):
    _, _, ckpt = workspace
    assert cli.main(["eval", "--ckpt", str(ckpt), "--suite", "ablate", "--out", str(tmp_path), "--n", "2"]) == 0
    rows = read_csv(str(tmp_path / "report.csv"))
    variants = {r["name"].split(".")[0] for r in rows}
    assert variants == {"full", "no_L2", "no_L3", "no_adapter"}


def test_eval_without_probes_is_dependency_error(workspace, tmp_path, capsys):
    root, _, ckpt = workspace
    probes = root / "data" / "probes.ckpt"
    os.rename(probes, str(probes) + ".bak")
    try:
        assert cli.main(["eval", "--ckpt", str(ckpt), "--suite", "metrics", "--out", str(tmp_path)]) == 2
    finally:
        os.rename(str(probes) + ".bak", probes)
    assert "gen-data" in capsys.readouterr().err


def test_config_errors_are_usage_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("lambda2 = 1.0\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text("colour = red\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
