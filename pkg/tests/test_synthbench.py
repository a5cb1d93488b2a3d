import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2_contingency

from disenbooth.encoders import Vocabulary, tokenize
from disenbooth.synthbench import (BENCHMARK_SUBJECTS, COLORS, PALETTE, SHAPES, TEXTURES, BenchmarkConfigError,
                                   BenchmarkQualityError, SceneSpec, SubjectSpec, all_scenes, benchmark_grid,
                                   check_vocabulary, make_subject_set, parse_prompt, prompt_for, render,
                                   render_batch, render_bytes, train_probes)

subjects = st.builds(SubjectSpec, st.sampled_from(SHAPES), st.sampled_from(COLORS), st.integers(0, 3))
scenes = st.builds(SceneSpec, st.sampled_from(COLORS), st.sampled_from(TEXTURES), st.integers(0, 8),
                   st.sampled_from(("small", "medium")))


@settings(max_examples=30, deadline=None)
@given(subjects, scenes)
def test_render_is_deterministic_and_in_range(subject, scene):
    a, b = render(subject, scene), render(subject, scene)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 32, 32) and a.min() >= -1 and a.max() <= 1


@settings(max_examples=20, deadline=None)
@given(subjects, st.sampled_from(("small", "medium")), st.integers(0, 8), st.integers(0, 8))
def test_subject_patch_translates(subject, scale, p, q):
    half = {"small": 4, "medium": 6}[scale]
    patches = []
    for pos in (p, q):
        sc = SceneSpec("white", "plain", pos, scale)
        cy, cx = sc.center
        patches.append(render_bytes(subject, sc)[cy - half : cy + half, cx - half : cx + half])
    np.testing.assert_array_equal(patches[0], patches[1])


def test_background_only_has_no_subject_pixels():
    subject = SubjectSpec("square", "red", 2)
    scene = SceneSpec("blue", "stripes", 4, "medium")
    empty = render_bytes(None, scene)
    cy, cx = scene.center
    cell = empty[cy - 6 : cy + 7, cx - 6 : cx + 7].reshape(-1, 3)
    assert not np.any(np.all(cell == PALETTE["red"], axis=1))
    full = render_bytes(subject, scene)
    assert np.any(np.all(full.reshape(-1, 3) == PALETTE["red"], axis=1))


def test_markers_visible_at_medium_scale():
    scene = SceneSpec("white", "plain", 4, "medium")
    imgs = [render_bytes(SubjectSpec("square", "red", m), scene) for m in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.any(imgs[i] != imgs[j])


def test_subject_set():
    s = BENCHMARK_SUBJECTS[0]
    ss = make_subject_set(s, K=4, seed=0)
    assert ss.K == 4 and len(set(ss.scenes)) == 4
    assert ss.prompt.split().count("S*") == 1 and ss.prompt == "a S* square"
    other = make_subject_set(s, K=4, seed=1)
    assert other.subject == ss.subject and other.scenes != ss.scenes
    assert all(lab["fill"] == s.fill for lab in ss.factor_labels)
    with pytest.raises(BenchmarkConfigError):
        make_subject_set(s, K=6)
    with pytest.raises(BenchmarkConfigError):
        make_subject_set(s, K=len(all_scenes()) + 1, k_range=None)


def test_prompt_grammar():
    assert prompt_for("square", "red", "checker") == "a S* square on red checker"
    check_vocabulary(Vocabulary.load())
    strings = {prompt_for(sh, c, t) for sh in SHAPES for c in COLORS for t in TEXTURES}
    assert len(strings) == len(SHAPES) * len(COLORS) * len(TEXTURES)
    assert parse_prompt("a S* square on red checker") == {
        "token": "S*", "shape": "square", "bg_color": "red", "texture": "checker"}
    with pytest.raises(BenchmarkConfigError):
        prompt_for("square", "magenta", "plain")
    with pytest.raises(BenchmarkConfigError):
        parse_prompt("a S* square on red")


def test_grid_factors_are_independent():
    grid = benchmark_grid()
    table = np.zeros((len(BENCHMARK_SUBJECTS), len(COLORS)))
    for i, _, sc in grid:
        table[i, COLORS.index(sc.bg_color)] += 1
    stat, p, *_ = chi2_contingency(table)
    assert stat == pytest.approx(0.0) and p == pytest.approx(1.0)


def test_probe_accuracy_and_identification(probes_and_grid):
    probes, grid, images = probes_and_grid
    assert min(probes.accuracy.values()) >= 0.95
    ids = probes.identify_subjects(images, BENCHMARK_SUBJECTS)
    assert (ids == np.array([i for i, _, _ in grid])).mean() >= 0.95


def test_probe_embeddings_cluster_by_subject(probes_and_grid):
    probes, grid, images = probes_and_grid
    rng = np.random.default_rng(0)
    pick = rng.choice(len(images), 200, replace=False)
    emb = probes.subject_embeddings(images[pick])
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = emb @ emb.T
    labels = np.array([grid[i][0] for i in pick])
    same = labels[:, None] == labels[None]
    off_diag = ~np.eye(len(pick), dtype=bool)
    assert cos[same & off_diag].mean() > cos[~same].mean()


def test_probes_frozen_under_inference(probes_and_grid):
    probes, _, images = probes_and_grid
    before = probes.checksum()
    probes.identify_subjects(images[:10], BENCHMARK_SUBJECTS)
    probes.predict_backgrounds(images[:10])
    assert probes.checksum() == before


def test_probe_training_deterministic_and_floor():
    grid = benchmark_grid()[::40]
    images = render_batch([(s, c) for _, s, c in grid])
    args = (images, [s for _, s, _ in grid], [c for _, _, c in grid])
    a = train_probes(*args, seed=3, steps=3, floor=0.0)
    b = train_probes(*args, seed=3, steps=3, floor=0.0)
    assert a.checksum() == b.checksum()
    with pytest.raises(BenchmarkQualityError):
        train_probes(*args, seed=3, steps=1, floor=0.999)


def test_in_palette_prompts_tokenize():
    vocab = Vocabulary.load()
    for c in COLORS:
        tokenize(prompt_for("circle", c, "plain"), vocab)
