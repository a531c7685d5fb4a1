import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kendalltau

from mtnic.synthdata import (
    PROLIF_INK,
    MiniWsiLabel,
    MotifSpec,
    TASK_CLASSES,
    gen_mini_wsi,
    gen_patch_task,
    gen_patch_tasks,
    gen_survival,
    grow_region,
    ppm_bytes,
    read_ppm,
    recount_coverage,
    render_motif,
    render_motifs,
    write_ppm,
)


@pytest.fixture(scope="module")
def tasks():
    return gen_patch_tasks(seed=0, patches_per_task=180)


def test_patch_tasks_shapes_and_balance(tasks):
    assert [tasks[t].n_classes for t in TASK_CLASSES] == [2, 2, 2, 9]
    for name, ds in tasks.items():
        assert ds.train_x.shape[1:] == (64, 64, 3) and ds.train_x.dtype == np.float64
        assert ds.train_x.min() >= 0 and ds.train_x.max() <= 1
        labels = np.concatenate([ds.train_y, ds.val_y])
        counts = np.bincount(labels, minlength=ds.n_classes)
        assert counts.min() == counts.max() == 180 // ds.n_classes
        assert len(ds.val_y) == 36


def test_patch_tasks_deterministic(tasks):
    again = gen_patch_task("prostate", 0, 180)
    assert np.array_equal(again.train_x, tasks["prostate"].train_x)
    assert np.array_equal(again.val_y, tasks["prostate"].val_y)
    other = gen_patch_task("prostate", 1, 180)
    assert not np.array_equal(other.train_x, again.train_x)


def test_brightness_separates_first_task(tasks):
    ds = tasks["lymph"]
    mean_tr, mean_va = ds.train_x.mean(axis=(1, 2, 3)), ds.val_x.mean(axis=(1, 2, 3))
    # one-feature linear classifier: threshold between the class means on the training split
    thr = 0.5 * (mean_tr[ds.train_y == 0].mean() + mean_tr[ds.train_y == 1].mean())
    bright_class = int(mean_tr[ds.train_y == 1].mean() > thr)
    pred = np.where(mean_va > thr, bright_class, 1 - bright_class)
    assert (pred == ds.val_y).mean() > 0.9


def test_unknown_task():
    with pytest.raises(KeyError):
        gen_patch_task("retina", 0, 10)


# -- rendering ------------------------------------------------------------------


def test_render_is_pure_function_of_spec_and_seed():
    spec = MotifSpec("stripes", 0.3, 0.4, 0.2)
    a = render_motif(spec, 32, np.random.default_rng(7))
    b = render_motif(spec, 32, np.random.default_rng(7))
    assert a.dtype == np.uint8 and a.shape == (32, 32, 3) and np.array_equal(a, b)


def test_render_batch_equals_stacked_draws():
    specs = [MotifSpec(k) for k in ("dots", "stripes", "checker", "gradient", "flat")]
    batch = render_motifs(specs, 16, np.random.default_rng(3))
    assert batch.shape == (5, 16, 16, 3)
    assert np.array_equal(batch, render_motifs(specs, 16, np.random.default_rng(3)))


def test_prolif_ink_only_on_prolif_motifs():
    for task in ("mitosis", "prostate", "colorectal"):
        ds = gen_patch_task(task, 2, 90, 16)
        x = np.round(np.concatenate([ds.train_x, ds.val_x]) * 255).astype(np.uint8)
        y = np.concatenate([ds.train_y, ds.val_y])
        hit = np.all(x == np.array(PROLIF_INK, np.uint8), axis=3).any(axis=(1, 2))
        if task == "prostate":
            assert not hit.any()
        if task == "colorectal":
            assert hit[y == 0].all() and not hit[y != 0].any()


# -- mini-WSIs ---------------------------------------------------------------------


@pytest.mark.parametrize("coverage", [0.0, 1.0])
def test_mini_wsi_coverage_extremes(coverage):
    w = gen_mini_wsi(1, grid=16, patch_size=8, coverage=coverage)
    assert w.label.target == coverage and w.label.label == int(coverage > 0.5)
    assert w.image.shape == (128, 128, 3) and w.image.dtype == np.uint8
    assert recount_coverage(w.image, 8) == coverage


@pytest.mark.parametrize("seed", range(6))
def test_target_equals_pixel_recount(seed):
    w = gen_mini_wsi(seed, grid=16, patch_size=16)
    assert abs(recount_coverage(w.image, 16) - w.label.target) <= 1e-12
    assert w.layout.sum() / w.layout.size == w.label.target
    assert w.label.risk == pytest.approx(4.0 * (w.label.target - 0.5))


def test_recount_at_full_patch_scale():
    w = gen_mini_wsi(11, grid=16, patch_size=64, coverage=0.3)
    assert abs(recount_coverage(w.image, 64) - w.label.target) <= 1e-12
    assert w.label.target == round(0.3 * 256) / 256


def test_mini_wsi_deterministic_and_grid_bounds():
    assert np.array_equal(gen_mini_wsi(4, 16, 8).image, gen_mini_wsi(4, 16, 8).image)
    for grid in (15, 65):
        with pytest.raises(ValueError):
            gen_mini_wsi(0, grid=grid)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32), st.data())
def test_grown_region_is_connected(rows, cols, seed, data):
    count = data.draw(st.integers(0, rows * cols))
    layout = grow_region(np.random.default_rng(seed), rows, cols, count)
    assert layout.sum() == count
    if count == 0:
        return
    cells = set(zip(*np.nonzero(layout)))
    stack, seen = [next(iter(cells))], set()
    while stack:
        r, c = stack.pop()
        if (r, c) in seen:
            continue
        seen.add((r, c))
        stack.extend(n for n in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)) if n in cells)
    assert seen == cells


# -- survival cohorts ---------------------------------------------------------------


def labels_with_risk(risks):
    return [MiniWsiLabel(0.5, 0, float(r)) for r in risks]


def test_survival_no_censoring_and_determinism():
    labels = labels_with_risk(np.linspace(-2, 2, 50))
    recs = gen_survival(3, labels, 0.0)
    assert all(r.event for r in recs)
    assert recs == gen_survival(3, labels, 0.0)
    with pytest.raises(ValueError):
        gen_survival(3, labels, 1.0)


def test_survival_censoring_rate_and_shortening():
    recs = gen_survival(0, labels_with_risk([0.0] * 10_000), 0.3)
    assert abs(np.mean([not r.event for r in recs]) - 0.3) < 0.02
    base = gen_survival(1, labels_with_risk([1.0] * 10_000), 0.3)
    doubled = gen_survival(1, labels_with_risk([2.0] * 10_000), 0.3)
    mean_base = np.mean([r.follow_up for r in base])
    mean_doubled = np.mean([r.follow_up for r in doubled])
    # expected ratio is exp(-1); require a clear one-sided gap
    assert mean_doubled < 0.5 * mean_base


def test_risk_agrees_with_death_order_at_500():
    risks = np.random.default_rng(9).uniform(-2, 2, 500)
    recs = gen_survival(4, labels_with_risk(risks), 0.0)
    tau, _ = kendalltau(risks, [-r.follow_up for r in recs])
    assert tau > 0.3


# -- PPM ---------------------------------------------------------------------------


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    assert np.array_equal(read_ppm(io.BytesIO(ppm_bytes(img))), img)
    with pytest.raises(EOFError):
        read_ppm(io.BytesIO(ppm_bytes(img)[:-1]))
