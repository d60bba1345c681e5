import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instyle import bench
from instyle.embedders import CLIP_ROLE, CSD_ROLE, DINO_ROLE, AestheticScorer, cosine_similarity01
from instyle.synth import DatasetConfig, gen_background, gen_foreground, generate

images = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).integers(0, 256, (24, 24, 3), dtype=np.uint8))


@pytest.fixture(scope="module")
def bench_samples():
    return generate(DatasetConfig(n=8, seed=21))


# ------------------------------------------------------------------- embedders


@pytest.mark.parametrize("emb", [CLIP_ROLE, DINO_ROLE, CSD_ROLE], ids=lambda e: e.name)
def test_embedders_deterministic_finite_nonzero(emb):
    img, _ = gen_foreground(2)
    a, b = emb(img), emb(img.copy())
    assert np.array_equal(a, b)
    assert a.shape == (emb.dim,)
    assert np.isfinite(a).all() and np.linalg.norm(a) > 0


@settings(max_examples=20, deadline=None)
@given(a=images, b=images)
def test_similarities_in_unit_interval_and_symmetric(a, b):
    for emb in (CLIP_ROLE, CSD_ROLE):
        s = emb.similarity(a, b)
        assert 0.0 <= s <= 1.0
        assert s == pytest.approx(emb.similarity(b, a), abs=1e-12)
    assert CLIP_ROLE.similarity(a, a) == 1.0


def test_cosine_mapping():
    assert cosine_similarity01(np.array([1.0, 0]), np.array([0, 1.0])) == 0.5
    assert cosine_similarity01(np.array([1.0, 0]), np.array([-1.0, 0])) == 0.0
    assert cosine_similarity01(np.array([1.0, 2]), np.array([2.0, 4])) == pytest.approx(1.0)


def test_style_embedder_mask_must_select_pixels():
    with pytest.raises(ValueError):
        CSD_ROLE(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), bool))


def test_aesthetic_scorer_deterministic_and_bounded():
    img = gen_background(3)
    aes = AestheticScorer()
    assert aes(img) == aes(img.copy())
    assert 0.0 <= aes(img) <= 1.0
    noisy = np.clip(img.astype(int) + np.random.default_rng(0).integers(-60, 60, img.shape), 0, 255).astype(np.uint8)
    assert aes(noisy) < aes(img)


# ------------------------------------------------------------------ metrics


@pytest.mark.parametrize("clip,csd,aes,want", [
    (0.779, 0.481, 0.655, 0.638),
    (0.761, 0.466, 0.697, 0.641),
    (1.0, 1.0, 1.0, 1.0),
])
def test_overall_mean_is_arithmetic(clip, csd, aes, want):
    assert round(bench.overall_mean(clip, csd, aes), 3) == want


def test_edit_mask_cases():
    bg = gen_background(1)
    assert bench.edit_mask(bg, bg)[1] == 0.0
    assert bench.edit_mask(bg, 255 - bg)[1] == pytest.approx(1.0, abs=0.01)
    out = bg.copy()
    out[16:48, 16:48] = (bg[16:48, 16:48].astype(int) + 40) % 256
    mask, frac = bench.edit_mask(bg, out)
    assert abs(frac - 0.25) <= 0.01
    assert mask[16:48, 16:48].all() and mask.sum() == 32 * 32
    with pytest.raises(ValueError):
        bench.edit_mask(bg, bg[:32])


def test_edit_mask_threshold_is_strict():
    bg = np.zeros((4, 4, 3), np.uint8)
    out = bg.copy()
    out[0, 0, 1] = 8
    out[1, 1, 2] = 9
    mask, _ = bench.edit_mask(bg, out, 8 / 255)
    assert mask.sum() == 1 and mask[1, 1]


def test_no_edit_is_failure_and_gated():
    bg = gen_background(2)
    fg, _ = gen_foreground(2)
    r = bench.score_sample(fg, bg, bg.copy())
    assert r.gated and r.clip_i == bench.GATED and r.error == "failure-to-edit"


def test_small_edit_gates_style_and_aesthetics():
    bg = gen_background(2)
    fg, _ = gen_foreground(2)
    out = bg.copy()
    out[:16, :16] = 255 - out[:16, :16]
    r = bench.score_sample(fg, bg, out)
    assert r.edit_fraction <= bench.GATE_FRACTION
    assert isinstance(r.clip_i, float) and r.csd == r.aes == bench.GATED


def test_copy_paste_identity_high_and_style_below_oracle(bench_samples):
    report = bench.run_benchmark(bench_samples, {"copy": bench.copy_paste, "oracle": bench.uniform_stylize_oracle})
    copy, oracle = report.row("copy"), report.row("oracle")
    assert copy.clip_i > 0.95
    assert copy.csd < oracle.csd
    assert copy.gated == 0


def test_single_sample_report_equals_record(bench_samples):
    report = bench.run_benchmark(bench_samples[:1], {"copy": bench.copy_paste})
    (rec,), row = report.records, report.rows[0]
    assert (row.clip_i, row.csd, row.aes) == (rec.clip_i, rec.csd, rec.aes)
    assert row.overall == pytest.approx((rec.clip_i + rec.csd + rec.aes) / 3)


def test_identical_methods_give_identical_rows(bench_samples):
    report = bench.run_benchmark(bench_samples, {"a": bench.copy_paste, "b": bench.copy_paste})
    a, b = report.row("a"), report.row("b")
    assert (a.clip_i, a.csd, a.aes, a.overall) == (b.clip_i, b.csd, b.aes, b.overall)


def test_failing_method_is_recorded(bench_samples):
    def broken(queries):
        raise RuntimeError("boom")

    report = bench.run_benchmark(bench_samples[:3], {"broken": broken, "copy": bench.copy_paste})
    row = report.row("broken")
    assert row.failures == 3 and row.gated == 3 and math.isnan(row.overall)
    assert report.row("copy").failures == 0
    short = bench.run_benchmark(bench_samples[:3], {"short": lambda q: []})
    assert short.row("short").failures == 3


def test_gating_soundness_in_summary():
    records = [
        bench.EvalRecord("m", "a", 0.8, 0.9, 0.7, 0.5),
        bench.EvalRecord("m", "b", 0.6, bench.GATED, bench.GATED, 0.1),
        # a value present on a small edit must still not count
        bench.EvalRecord("m", "c", 0.4, 0.0, 0.0, 0.2),
    ]
    row = bench.summarize(records, ["m"]).rows[0]
    assert row.clip_i == pytest.approx(0.6)
    assert (row.csd, row.aes) == (0.9, 0.7)
    assert row.gated == 1


def test_report_formats_and_ordering(bench_samples, tmp_path):
    report = bench.run_benchmark(bench_samples, {"oracle": bench.uniform_stylize_oracle, "copy": bench.copy_paste})
    assert [r.method for r in report.rows] == ["oracle", "copy"]
    keys = [(r.method, r.sample_id) for r in report.records]
    assert keys == sorted(keys)
    table = report.table()
    assert table.startswith("# edit-mask pixel threshold 0.031373")
    assert f"{report.row('copy').overall:7.3f}" in table
    for r in report.rows:
        for v in (r.clip_i, r.csd, r.aes, r.overall):
            assert 0.0 <= v <= 1.0
    report.write(tmp_path / "r.jsonl", "jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 2 + len(report.records)
    again = bench.run_benchmark(bench_samples, {"oracle": bench.uniform_stylize_oracle, "copy": bench.copy_paste})
    assert again.jsonl() == report.jsonl()


def test_paste_keeps_background_outside_mask(bench_samples):
    s = bench_samples[0]
    out = bench.paste(s.I_f, s.styled_background, s.I_m)
    outside = ~s.I_m.astype(bool)
    assert np.array_equal(out[outside], s.styled_background[outside])


def test_oracle_needs_style_id(bench_samples):
    s = bench_samples[0]
    with pytest.raises(ValueError):
        bench.uniform_stylize_oracle([bench.Query(s.I_f, s.styled_background, s.I_m)])
