import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbd.attack import (
    ALL_TO_ALL,
    ALL_TO_ONE,
    PoisonPlan,
    Trigger,
    TriggerError,
    apply_trigger,
    blend,
    catalog_trigger,
    load_trigger,
    placement_for_class,
    poison,
)
from vbd.data import SyntheticSpec, generate_synthetic
from vbd.fileio import write_pgm, write_ppm


def _rand_trigger(rng, dims=(8, 8, 3)):
    mask = rng.random(dims[:2]) < 0.3
    mask[0, 0] = True
    return Trigger(rng.random(dims), mask)


# --- blending --------------------------------------------------------------


def test_blend_scalar_example():
    x = np.zeros((1, 1, 1)) + 0.4
    out = blend(x, np.ones((1, 1, 1)), np.ones((1, 1), bool), 0.5)
    assert abs(out[0, 0, 0] - 0.7) <= 1e-15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_blend_identities(seed):
    rng = np.random.default_rng(seed)
    t = _rand_trigger(rng)
    x = rng.random((4, 8, 8, 3))
    assert np.array_equal(apply_trigger(x, t, 0.0), x)
    once = apply_trigger(x, t, 1.0)
    assert np.array_equal(once[:, t.mask], np.broadcast_to(t.pattern[t.mask], once[:, t.mask].shape))
    assert np.array_equal(apply_trigger(once, t, 1.0), once)
    full = Trigger(t.pattern, np.ones((8, 8), bool))
    assert np.array_equal(apply_trigger(x, full, 1.0), np.broadcast_to(t.pattern, x.shape))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_blend_off_mask_untouched_and_in_range(seed, alpha):
    rng = np.random.default_rng(seed)
    t = _rand_trigger(rng)
    x = rng.random((3, 8, 8, 3)).astype(np.float32)
    out = apply_trigger(x, t, alpha)
    assert out.dtype == x.dtype
    assert np.array_equal(out[:, ~t.mask], x[:, ~t.mask])
    assert out.min() >= 0 and out.max() <= 1
    expected = (1 - alpha) * x.astype(np.float64) + alpha * t.pattern
    assert np.allclose(out[:, t.mask], expected[:, t.mask], atol=1e-6)


def test_blend_per_image_alpha():
    rng = np.random.default_rng(0)
    t = _rand_trigger(rng)
    x = rng.random((3, 8, 8, 3))
    a = np.array([0.0, 0.3, 1.0])
    out = blend(x, t.pattern, t.mask, a)
    for i in range(3):
        assert np.array_equal(out[i], apply_trigger(x[i], t, a[i]))


def test_blend_errors():
    t = _rand_trigger(np.random.default_rng(0))
    with pytest.raises(ValueError):
        apply_trigger(np.zeros((8, 8, 3)), t, 1.5)
    with pytest.raises(ValueError):
        apply_trigger(np.zeros((8, 8, 1)), t, 0.5)
    with pytest.raises(ValueError):
        blend(np.zeros((2, 8, 8, 3)), t.pattern, t.mask, [0.1, 0.2, 0.3])


# --- catalog and placement -------------------------------------------------


def test_white_square_bottom_right():
    t = catalog_trigger("white_square", (29, 29), (32, 32, 3))
    rows, cols = np.nonzero(t.mask)
    assert t.mask.sum() == 9
    assert set(rows) == {29, 30, 31} and set(cols) == {29, 30, 31}
    assert np.all(t.pattern[t.mask] == 1)


def test_grids_have_checker_layout():
    for kind in ("white_grid", "color_grid"):
        t = catalog_trigger(kind, (4, 7), (16, 16, 3))
        assert t.mask.sum() == 5
        block = t.mask[4:7, 7:10]
        assert block.tolist() == [[True, False, True], [False, True, False], [True, False, True]]
    g = catalog_trigger("green_square", (0, 0), (8, 8, 3))
    assert np.all(g.pattern[g.mask] == [0, 1, 0])


def test_catalog_errors():
    with pytest.raises(TriggerError):
        catalog_trigger("white_square", (31, 31), (32, 32, 3))
    with pytest.raises(TriggerError):
        catalog_trigger("purple_star", (0, 0), (32, 32, 3))


def test_placement_examples():
    assert placement_for_class(0, (3, 3), (32, 32)) == (29, 29)
    assert placement_for_class(1, (3, 3), (32, 32)) == (29, 26)
    assert placement_for_class(10, (3, 3), (32, 32)) == (26, 29)
    with pytest.raises(TriggerError):
        placement_for_class(199, (3, 3), (32, 32))


def test_placements_disjoint():
    masks = [catalog_trigger("white_square", placement_for_class(k, (3, 3), (32, 32)), (32, 32, 3)).mask
             for k in range(100)]
    assert np.array_equal(np.sum(masks, axis=0) <= 1, np.ones((32, 32), bool))


# --- trigger files ---------------------------------------------------------


def test_load_trigger_opaque_and_large(tmp_path):
    rng = np.random.default_rng(1)
    write_ppm(tmp_path / "p.ppm", rng.random((10, 14, 3)))
    t = load_trigger(tmp_path / "p.ppm", image_dims=(64, 64, 3), offset=(5, 20))
    assert t.footprint == (10, 14) and t.offset == (5, 20)
    assert t.mask.sum() == 140
    t2 = load_trigger(tmp_path / "p.ppm", image_dims=(64, 64, 3))
    assert t2.offset == (54, 50)


def test_load_trigger_mask_rules(tmp_path):
    write_ppm(tmp_path / "p.ppm", np.ones((3, 3, 3)))
    write_pgm(tmp_path / "empty.pgm", np.zeros((3, 3)))
    with pytest.raises(TriggerError):
        load_trigger(tmp_path / "p.ppm", tmp_path / "empty.pgm")
    m = np.zeros((3, 3))
    m[1, 1] = 1
    write_pgm(tmp_path / "m.pgm", m)
    t = load_trigger(tmp_path / "p.ppm", tmp_path / "m.pgm", image_dims=(8, 8, 3), offset=(0, 0))
    assert t.mask.sum() == 1 and t.mask[1, 1]
    with pytest.raises(TriggerError):
        load_trigger(tmp_path / "p.ppm", image_dims=(8, 8, 3), offset=(7, 7))


# --- poisoning -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_set():
    return generate_synthetic(SyntheticSpec(class_count=10, per_class=500, dims=(16, 16, 3), seed=3))


def test_all_to_one_counts(small_set):
    pd = poison(small_set, PoisonPlan(ALL_TO_ONE, 0.1, 1.0, target_class=4, seed=1))
    assert pd.ground_truth.sum() == 500
    assert np.all(pd.data.labels[pd.ground_truth] == 4)
    orig = small_set.labels[pd.ground_truth]
    assert np.all(np.bincount(orig, minlength=10) == 50)
    t = pd.triggers[4]
    assert np.all(pd.data.images[pd.ground_truth][:, t.mask] == 1)
    clean = ~pd.ground_truth
    assert np.array_equal(pd.data.images[clean], small_set.images[clean])
    assert np.array_equal(pd.data.labels[clean], small_set.labels[clean])


def test_all_to_all_targets_and_placements(small_set):
    pd = poison(small_set, PoisonPlan(ALL_TO_ALL, 0.1, 1.0, seed=2))
    src = small_set.labels[pd.ground_truth]
    assert np.array_equal(pd.data.labels[pd.ground_truth], (src + 1) % 10)
    assert PoisonPlan(ALL_TO_ALL).target_for(9, 10) == 0
    assert sorted(pd.triggers) == list(range(10))
    total = np.sum([t.mask for t in pd.triggers.values()], axis=0)
    assert total.max() == 1


def test_label_only_poisoning(small_set):
    pd = poison(small_set, PoisonPlan(ALL_TO_ONE, 0.1, 0.0, target_class=0, seed=0))
    assert np.array_equal(pd.data.images, small_set.images)
    assert pd.ground_truth.sum() == 500


def test_poison_deterministic(small_set):
    a = poison(small_set, PoisonPlan(ALL_TO_ONE, 0.2, 0.5, target_class=1, seed=9))
    b = poison(small_set, PoisonPlan(ALL_TO_ONE, 0.2, 0.5, target_class=1, seed=9))
    assert np.array_equal(a.ground_truth, b.ground_truth)
    assert np.array_equal(a.data.images, b.data.images)
    c = poison(small_set, PoisonPlan(ALL_TO_ONE, 0.2, 0.5, target_class=1, seed=10))
    assert not np.array_equal(a.ground_truth, c.ground_truth)


def test_plan_errors(small_set):
    with pytest.raises(ValueError):
        PoisonPlan(mode="some_to_few")
    with pytest.raises(ValueError):
        PoisonPlan(ratio=1.5)
    with pytest.raises(ValueError):
        PoisonPlan.from_dict({"mode": ALL_TO_ONE, "colour": "red"})
    with pytest.raises(ValueError):
        poison(small_set, PoisonPlan(ALL_TO_ONE, target_class=10))
    assert PoisonPlan.from_dict(PoisonPlan(ALL_TO_ALL, 0.3).to_dict()) == PoisonPlan(ALL_TO_ALL, 0.3)
