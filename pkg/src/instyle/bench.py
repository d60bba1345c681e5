"""Evaluation protocol: identity, style and aesthetic stand-ins with edit gating.

A method maps a list of :class:`Query` (reference, scene, placement mask)
to output images. Style and aesthetic scores only count when the detected edit covers
more than :data:`GATE_FRACTION` of the image, so a method that leaves the
background untouched earns nothing for it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from ._validation import check_image
from .curation import mask_bbox
from .embedders import CLIP_ROLE, CSD_ROLE, AestheticScorer
from .recipes import _bbox
from .synth import NEUTRAL, Sample, foreground_support, resize_nearest, stylize

GATE_FRACTION = 0.20
PIXEL_THRESHOLD = 8 / 255
GATED = "gated-out"


def edit_mask(background, output, pixel_threshold: float = PIXEL_THRESHOLD) -> tuple[np.ndarray, float]:
    """Pixels whose max-channel absolute change exceeds the threshold (in [0, 1] units)."""
    bg = check_image(background).astype(np.int16)
    out = check_image(output).astype(np.int16)
    if bg.shape != out.shape:
        raise ValueError(f"background {bg.shape} and output {out.shape} differ in size")
    diff = np.abs(out - bg).max(axis=-1) / 255.0
    mask = (diff > pixel_threshold).astype(np.uint8)
    return mask, float(mask.mean())


def overall_mean(clip_i_mean: float, csd_mean: float, aes_mean: float) -> float:
    return (clip_i_mean + csd_mean + aes_mean) / 3.0


def reference_crop(I_f) -> np.ndarray:
    """Tight crop of the reference object's support (its neutral margin removed)."""
    I_f = check_image(I_f)
    support = foreground_support(I_f)
    if not support.any():
        return I_f
    top, left, bottom, right = mask_bbox(support)
    return I_f[top:bottom, left:right]


def edited_region(output, mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bounding-box crop of the edit: raw, with unedited pixels set to neutral, and the cropped mask."""
    top, left, bottom, right = mask_bbox(mask)
    raw = output[top:bottom, left:right]
    local = mask[top:bottom, left:right]
    neutral = raw.copy()
    neutral[local == 0] = NEUTRAL
    return raw, neutral, local


@dataclass
class EvalRecord:
    method: str
    sample_id: str
    clip_i: float | str
    csd: float | str
    aes: float | str
    edit_fraction: float
    error: str = ""

    @property
    def gated(self) -> bool:
        return self.csd == GATED


def score_sample(reference, background, output, method: str = "", sample_id: str = "",
                 semantic=CLIP_ROLE, style=CSD_ROLE, aes_scorer=None,
                 pixel_threshold: float = PIXEL_THRESHOLD) -> EvalRecord:
    aes_scorer = aes_scorer or AestheticScorer()
    output = check_image(output)
    background = check_image(background)
    mask, frac = edit_mask(background, output, pixel_threshold)
    if not mask.any():
        return EvalRecord(method, sample_id, GATED, GATED, GATED, 0.0, "failure-to-edit")
    raw, neutral, local = edited_region(output, mask)
    clip_i = semantic.similarity(reference_crop(reference), neutral)
    if frac > GATE_FRACTION:
        csd = style.similarity(raw, background, mask_a=local)
        aes = aes_scorer(output)
    else:
        csd = aes = GATED
    return EvalRecord(method, sample_id, clip_i, csd, aes, frac)


@dataclass
class MethodRow:
    method: str
    clip_i: float
    csd: float
    aes: float
    overall: float
    n: int
    gated: int
    failures: int


@dataclass
class BenchReport:
    rows: list[MethodRow]
    records: list[EvalRecord] = field(default_factory=list)
    pixel_threshold: float = PIXEL_THRESHOLD

    def row(self, method: str) -> MethodRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def table(self) -> str:
        head = f"# edit-mask pixel threshold {self.pixel_threshold:.6f}; gate > {GATE_FRACTION:.2f} of image\n"
        cols = ("Method", "CLIP-I", "CSD", "AES", "Overall", "n", "gated", "failed")
        width = max([len(c) for c in cols[:1]] + [len(r.method) for r in self.rows])
        lines = [head + f"{cols[0]:<{width}}  " + "  ".join(f"{c:>7}" for c in cols[1:])]
        for r in self.rows:
            vals = [f"{v:7.3f}" for v in (r.clip_i, r.csd, r.aes, r.overall)]
            vals += [f"{v:7d}" for v in (r.n, r.gated, r.failures)]
            lines.append(f"{r.method:<{width}}  " + "  ".join(vals))
        return "\n".join(lines) + "\n"

    def jsonl(self) -> str:
        lines = [json.dumps({"type": "row", **asdict(r)}, sort_keys=True) for r in self.rows]
        lines += [json.dumps({"type": "record", **asdict(r)}, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path, fmt: str = "table") -> None:
        Path(path).write_text(self.table() if fmt == "table" else self.jsonl())


def _mean(values) -> float:
    vals = [v for v in values if not isinstance(v, str)]
    return float(np.mean(vals)) if vals else math.nan


def summarize(records: list[EvalRecord], methods: list[str], pixel_threshold=PIXEL_THRESHOLD) -> BenchReport:
    rows = []
    for m in methods:
        rec = [r for r in records if r.method == m]
        clip = _mean(r.clip_i for r in rec)
        csd = _mean(r.csd for r in rec if r.edit_fraction > GATE_FRACTION)
        aes = _mean(r.aes for r in rec if r.edit_fraction > GATE_FRACTION)
        rows.append(MethodRow(m, clip, csd, aes, overall_mean(clip, csd, aes), len(rec),
                              sum(r.gated for r in rec), sum(bool(r.error) for r in rec)))
    ordered = sorted(records, key=lambda r: (r.method, r.sample_id))
    return BenchReport(rows, ordered, pixel_threshold)


class Query(NamedTuple):
    I_f: np.ndarray
    background: np.ndarray
    I_m: np.ndarray
    style_id: str | None = None  # known only to oracles


Method = Callable[[list[Query]], list[np.ndarray]]


def per_query(fn: Callable[[Query], np.ndarray]) -> Method:
    """Lift a single-query compositor to the batch interface."""

    def method(queries):
        return [fn(q) for q in queries]

    return method


def run_benchmark(samples: list[Sample], methods: dict[str, Method],
                  pixel_threshold: float = PIXEL_THRESHOLD) -> BenchReport:
    """Score every method on every sample against its stylized scene.

    A method maps a list of queries to a list of images; if it raises, each
    of its samples is recorded as a failure and counted gated-out.
    """
    samples = sorted(samples, key=lambda s: s.record.id)
    queries = [Query(s.I_f, s.styled_background, s.I_m, s.record.style_id) for s in samples]
    records = []
    for name, fn in methods.items():
        try:
            outs = list(fn(queries))
            if len(outs) != len(queries):
                raise ValueError(f"{len(outs)} outputs for {len(queries)} queries")
        except Exception as exc:  # a failing method costs it the samples, not the run
            outs = [exc] * len(queries)
        for s, q, out in zip(samples, queries, outs):
            if isinstance(out, Exception):
                records.append(EvalRecord(name, s.record.id, GATED, GATED, GATED, 0.0, f"error: {out}"))
            else:
                records.append(score_sample(q.I_f, q.background, out, name, s.record.id,
                                            pixel_threshold=pixel_threshold))
    return summarize(records, list(methods), pixel_threshold)


# ----------------------------------------------------------------- compositors


def paste(I_f, background, I_m) -> np.ndarray:
    """Reference object resized into the mask's box, no harmonisation."""
    I_f, bg = check_image(I_f), check_image(background)
    mask = np.asarray(I_m).astype(bool)
    support = foreground_support(I_f)
    ft, fl, fb, fr = _bbox(support)
    top, left, bottom, right = _bbox(mask)
    obj = resize_nearest(I_f[ft:fb, fl:fr], bottom - top, right - left)
    obj_mask = resize_nearest(support[ft:fb, fl:fr, None].astype(np.uint8), bottom - top, right - left)[..., 0] > 0
    out = bg.copy()
    region = out[top:bottom, left:right]
    keep = obj_mask & mask[top:bottom, left:right]
    region[keep] = obj[keep]
    return out


copy_paste = per_query(lambda q: paste(q.I_f, q.background, q.I_m))


def _oracle(q: Query) -> np.ndarray:
    if q.style_id is None:
        raise ValueError("the stylize oracle needs the scene's style id")
    styled = stylize(paste(q.I_f, np.zeros_like(q.background), q.I_m), q.style_id)
    out = check_image(q.background).copy()
    inside = np.asarray(q.I_m).astype(bool)
    out[inside] = styled[inside]
    return out


# pastes, then applies the scene's known style to the object; an upper
# reference for harmonisation, not a method
uniform_stylize_oracle = per_query(_oracle)
