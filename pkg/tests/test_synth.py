import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instyle.synth import (FG_HW, IMAGE_HW, NEUTRAL, STYLES, DatasetConfig, StyleSpec, build_dataset, compose,
                           corruption_plan, foreground_support, gen_background, gen_corrupted, gen_foreground,
                           generate, load_png, make_sample, manifest_hash, read_manifest, split_of, stylize)

rgb = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).integers(0, 256, (8, 8, 3), dtype=np.uint8))


def test_foreground_deterministic_and_seed_sensitive():
    a, da = gen_foreground(3)
    b, db = gen_foreground(3)
    c, _ = gen_foreground(4)
    assert np.array_equal(a, b) and da == db
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("seed", range(8))
def test_descriptor_area_counts_object_pixels(seed):
    fg, desc = gen_foreground(seed)
    support = foreground_support(fg)
    assert desc.area == support.sum()
    rows, cols = np.flatnonzero(support.any(1)), np.flatnonzero(support.any(0))
    assert desc.bbox == (rows[0], cols[0], rows[-1] + 1, cols[-1] + 1)
    assert (fg[~support] == NEUTRAL).all()


def test_compose_construction():
    fg, _ = gen_foreground(1)
    bg = gen_background(2)
    I_c, I_m = compose(fg, bg, (8, 16))
    inside = I_m.astype(bool)
    assert set(np.unique(I_m)) == {0, 1}
    assert np.array_equal(I_c[~inside], bg[~inside])
    window = I_c[8:8 + FG_HW, 16:16 + FG_HW]
    support = foreground_support(fg)
    assert np.array_equal(window[support], fg[support])
    assert np.array_equal(inside[8:8 + FG_HW, 16:16 + FG_HW], support)


@pytest.mark.parametrize("scale", [0.5, 0.75, 1.0, 1.25])
def test_mask_area_follows_scale(scale):
    fg, desc = gen_foreground(7)
    _, I_m = compose(fg, gen_background(0), (0, 0, scale))
    assert abs(I_m.sum() / (desc.area * scale**2) - 1) < 0.02


@pytest.mark.parametrize("placement", [(-1, 0), (0, 17), (20, 20, 1.0), (0, 0, 1.5)])
def test_compose_out_of_frame(placement):
    fg, _ = gen_foreground(0)
    with pytest.raises(ValueError, match="out of frame"):
        compose(fg, gen_background(0), placement)


def test_identity_style_is_bitwise_identity():
    img = gen_background(5)
    assert np.array_equal(stylize(img, "identity"), img)


@settings(max_examples=25, deadline=None)
@given(img=rgb)
def test_involutive_palettes(img):
    invert = StyleSpec("inv", palette="invert")
    swap = StyleSpec("sw", palette="swap", perm=(1, 0, 2))
    for spec in (invert, swap):
        assert np.array_equal(stylize(stylize(img, spec), spec), img)


@settings(max_examples=25, deadline=None)
@given(img=rgb, levels=st.integers(2, 6))
def test_posterize_levels(img, levels):
    out = stylize(img, StyleSpec("p", texture="posterize", levels=levels))
    for ch in range(3):
        assert len(np.unique(out[..., ch])) <= levels


@pytest.mark.parametrize("style", sorted(STYLES))
def test_styles_are_deterministic(style):
    img = gen_background(9)
    assert np.array_equal(stylize(img, style), stylize(img, STYLES[style]))


def test_style_errors():
    with pytest.raises(ValueError):
        stylize(np.zeros((2, 2, 3), np.uint8), StyleSpec("x", palette="sepia"))
    with pytest.raises(ValueError):
        stylize(np.zeros((2, 2, 3), np.uint8), StyleSpec("x", texture="dots"))


def corruption_case():
    fg, _ = gen_foreground(10)
    other, _ = gen_foreground(11)
    bg = gen_background(12)
    placement = (8, 8, 1.0)
    I_c, I_m = compose(fg, bg, placement)
    return fg, other, bg, placement, I_c, I_m


def test_identity_drift_changes_only_the_object():
    _, other, bg, placement, I_c, I_m = corruption_case()
    I_s = stylize(I_c, "ocean")
    bad = gen_corrupted(I_c, I_m, "ocean", "identity_drift", background=bg, other_fg=other, placement=placement)
    inside = I_m.astype(bool)
    assert np.array_equal(bad[~inside], I_s[~inside])
    assert not np.array_equal(bad[inside], I_s[inside])


def test_style_incoherence_leaves_subject_unstyled():
    *_, I_c, I_m = corruption_case()
    bad = gen_corrupted(I_c, I_m, "ocean", "style_incoherence")
    inside = I_m.astype(bool)
    assert np.array_equal(bad[inside], I_c[inside])
    assert np.array_equal(bad[~inside], stylize(I_c, "ocean")[~inside])


def test_corruption_errors():
    *_, I_c, I_m = corruption_case()
    with pytest.raises(ValueError):
        gen_corrupted(I_c, I_m, "ocean", "blur")
    with pytest.raises(ValueError):
        gen_corrupted(I_c, I_m, "ocean", "identity_drift")


def test_corruption_plan_counts():
    plan = corruption_plan(DatasetConfig(n=400, corruption_rate=0.5))
    assert plan.count("identity_drift") == 100 and plan.count("style_incoherence") == 100
    assert corruption_plan(DatasetConfig(n=50)) == [None] * 50


def test_positive_samples_are_style_coherent():
    for s in generate(DatasetConfig(n=5, seed=2)):
        assert s.record.label == "good" and s.record.mode is None
        assert np.array_equal(s.I_s, stylize(s.I_c, s.record.style_id))
        assert np.array_equal(s.styled_background, stylize(s.background, s.record.style_id))


def test_samples_are_pure_in_seed_and_index():
    cfg = DatasetConfig(n=6, seed=4, corruption_rate=0.5)
    plan = corruption_plan(cfg)
    serial = generate(cfg)
    for i in (5, 0, 3):
        one = make_sample(cfg, i, plan[i])
        assert one.record == serial[i].record
        assert all(np.array_equal(getattr(one, k), getattr(serial[i], k)) for k in ("I_f", "I_c", "I_m", "I_s"))


def test_split_is_a_hash_of_the_id():
    assert split_of("s00001", 0.5) == split_of("s00001", 0.5)
    assert split_of("s00001", 0.0) == "train" and split_of("s00001", 1.0) == "heldout"
    splits = [split_of(f"s{i:05d}", 0.1) for i in range(2000)]
    assert 0.07 < splits.count("heldout") / 2000 < 0.13


def test_build_dataset_files_and_reproducibility(tmp_path):
    cfg = DatasetConfig(n=8, seed=1, corruption_rate=0.5)
    m1 = build_dataset(cfg, tmp_path / "a")
    m2 = build_dataset(cfg, tmp_path / "b")
    assert manifest_hash(m1) == manifest_hash(m2)
    records = read_manifest(m1)
    assert len(records) == 8
    assert sorted(r.label for r in records).count("bad") == 4
    for r in records:
        for attr in ("I_f", "I_c", "I_m", "I_s", "background", "styled_background"):
            assert (tmp_path / "a" / getattr(r, attr)).read_bytes() == (tmp_path / "b" / getattr(r, attr)).read_bytes()
        I_c, I_s = load_png(tmp_path / "a" / r.I_c), load_png(tmp_path / "a" / r.I_s)
        I_m = load_png(tmp_path / "a" / r.I_m, mask=True)
        assert I_c.shape == I_s.shape == (IMAGE_HW, IMAGE_HW, 3)
        assert set(np.unique(I_m)) == {0, 1}


def test_no_corruption_means_no_negatives(tmp_path):
    records = read_manifest(build_dataset(DatasetConfig(n=5), tmp_path))
    assert {r.label for r in records} == {"good"}


def test_mask_png_is_0_255(tmp_path):
    build_dataset(DatasetConfig(n=1), tmp_path)
    from PIL import Image

    with Image.open(tmp_path / "s00000_m.png") as im:
        assert im.mode == "L" and set(np.unique(np.asarray(im))) == {0, 255}
