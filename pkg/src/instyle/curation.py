"""Two-stage curation: identity consistency, then style coherence.

Scores:

* identity: similarity of the masked crops of the stylized and original
  composites under each semantic embedder (one per role),
* style: similarity between the subject crop and the patch-filled
  background crop of the stylized composite.

Thresholds come from a precision-maximising search under a rejection-rate
cap on a labeled calibration set; a sample is kept only if every score is
strictly above its threshold.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_mask, check_image, check_labels, check_scores
from .embedders import CLIP_ROLE, CSD_ROLE, DINO_ROLE
from .synth import SampleRecord, load_sample

SCORE_NAMES = ("clip", "dino", "csd")


# ------------------------------------------------------------------- operators


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask is empty")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def crop_masked(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Tight bounding-box crop of the mask's support."""
    mask = check_binary_mask(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    top, left, bottom, right = mask_bbox(mask)
    return image[top:bottom, left:right]


def identity_scores(I_s, I_c, I_m, embedders=(CLIP_ROLE, DINO_ROLE)) -> tuple[float, ...]:
    """Similarity of the masked subject in the stylized vs. original composite."""
    I_s, I_c = check_image(I_s), check_image(I_c)
    if I_s.shape != I_c.shape:
        raise ValueError("I_s and I_c differ in size")
    a = crop_masked(I_s, I_m)
    b = crop_masked(I_c, I_m)
    return tuple(e.similarity(a, b) for e in embedders)


def patch_fill(image: np.ndarray, fill_mask: np.ndarray, patch: int = 64) -> np.ndarray:
    """Overwrite ``fill_mask`` pixels with patches copied from retained pixels.

    Target cells are the ``patch``-sized grid cells touching the fill region,
    visited in raster order; sources are fully retained windows on a
    half-patch stride, also raster order, used cyclically. When no full
    ``patch`` window is retained the patch shrinks to a quarter of the short
    image side.
    """
    fill = check_binary_mask(fill_mask, allow_empty=True).astype(bool)
    out = np.array(image, copy=True)
    if not fill.any():
        return out
    h, w = fill.shape
    sources = _retained_windows(fill, patch)
    if not sources:
        patch = max(1, min(h, w) // 4)
        sources = _retained_windows(fill, patch)
    if not sources:
        raise ValueError("retained region too small to source a patch")
    k = 0
    for top in range(0, h, patch):
        for left in range(0, w, patch):
            cell = fill[top:top + patch, left:left + patch]
            if not cell.any():
                continue
            sy, sx = sources[k % len(sources)]
            k += 1
            ch, cw = cell.shape
            src = image[sy:sy + ch, sx:sx + cw]
            dst = out[top:top + ch, left:left + cw]
            dst[cell] = src[cell]
    return out


def _retained_windows(fill: np.ndarray, patch: int) -> list[tuple[int, int]]:
    h, w = fill.shape
    if patch > h or patch > w:
        return []
    integral = np.pad(fill.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    stride = max(1, patch // 2)
    out = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            s = integral[y + patch, x + patch] - integral[y, x + patch] - integral[y + patch, x] + integral[y, x]
            if s == 0:
                out.append((y, x))
    return out


def style_score(I_s, I_m, style_embedder=CSD_ROLE, patch: int = 64) -> float:
    """Style similarity between the subject crop and the filled background crop."""
    I_s = check_image(I_s)
    mask = check_binary_mask(I_m)
    outside = 1 - mask
    if not outside.any():
        raise ValueError("mask covers the whole image; no background to compare")
    subject = crop_masked(I_s, mask)
    top, left, bottom, right = mask_bbox(outside)
    background = patch_fill(I_s[top:bottom, left:right], mask[top:bottom, left:right], patch)
    return style_embedder.similarity(subject, background)


def base_pair_score(I_f, I_c, I_m, embedder=CLIP_ROLE) -> float:
    """Reference-vs-composite agreement used to pre-clean base triplets."""
    return embedder.similarity(np.asarray(I_f), crop_masked(np.asarray(I_c), I_m))


# ------------------------------------------------------------------ calibration


def calibrate(scores, labels, rejection_cap: float) -> tuple[float, dict]:
    """Threshold maximising precision of ``{score > T}`` with rejection <= cap.

    Candidate cuts reject the k lowest distinct score values (k = 0..m).
    Ties in precision go to the lower rejection rate. The returned threshold
    is the midpoint of the chosen cut's open interval, or below the minimum
    when nothing is rejected.
    """
    scores = check_scores(scores)
    good = check_labels(labels, len(scores))
    if good.all() or not good.any():
        raise ValueError("calibration needs at least one good and one bad label")
    if not 0.0 <= rejection_cap <= 1.0:
        raise ValueError("rejection_cap must lie in [0, 1]")
    n = len(scores)
    values = np.unique(scores)
    order = np.argsort(scores, kind="stable")
    sorted_scores, sorted_good = scores[order], good[order]
    n_good = int(good.sum())

    best = None
    for k in range(len(values) + 1):
        rejected = 0 if k == 0 else int(np.searchsorted(sorted_scores, values[k - 1], side="right"))
        if Fraction(rejected, n) > Fraction(rejection_cap).limit_denominator(10**9):
            break
        accepted = n - rejected
        accepted_good = n_good - int(sorted_good[:rejected].sum())
        precision = Fraction(accepted_good, accepted) if accepted else Fraction(0)
        if best is None or precision > best[1]:
            best = (k, precision, rejected)
    k, precision, rejected = best
    lo = -np.inf if k == 0 else float(values[k - 1])
    hi = np.inf if k == len(values) else float(values[k])
    if k == 0:
        gap = float(values[1] - values[0]) if len(values) > 1 else 1.0
        threshold = float(values[0] - gap / 2)
    elif k == len(values):
        threshold = float(values[-1])
    else:
        threshold = (lo + hi) / 2
    grid = sorted(set(values.tolist()) | set(((values[:-1] + values[1:]) / 2).tolist()))
    report = {
        "threshold": threshold,
        "interval": [lo, hi],
        "precision": float(precision),
        "precision_fraction": [precision.numerator, precision.denominator],
        "rejection_rate": rejected / n,
        "rejected": rejected,
        "n": n,
        "n_good": n_good,
        "rejection_cap": rejection_cap,
        "grid": grid,
    }
    return threshold, report


@dataclass
class FilterThresholds:
    T_clip: float
    T_dino: float
    T_csd: float
    reports: dict = field(default_factory=dict)
    validation_set: str = ""

    def as_array(self) -> np.ndarray:
        return np.array([self.T_clip, self.T_dino, self.T_csd])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_float) + "\n")

    @classmethod
    def load(cls, path) -> "FilterThresholds":
        d = json.loads(Path(path).read_text())
        return cls(**d)


def _json_float(x):
    return float(x)


class ThresholdCalibrator(BaseEstimator):
    """Fit a single acceptance threshold on labeled scores."""

    def __init__(self, rejection_cap: float = 0.3):
        self.rejection_cap = rejection_cap

    def fit(self, X, y):
        self.threshold_, self.report_ = calibrate(X, y, self.rejection_cap)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "threshold_")
        return check_scores(X) > self.threshold_


# --------------------------------------------------------------- dataset level


class SampleScorer(BaseEstimator, TransformerMixin):
    """Map samples (in-memory or manifest records under ``root``) to ``[clip, dino, csd]`` scores."""

    def __init__(self, root=None, patch: int = 64):
        self.root = root
        self.patch = patch

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        rows = []
        for item in X:
            if isinstance(item, SampleRecord):
                if self.root is None:
                    raise ValueError("root is required to score manifest records")
                item = load_sample(self.root, item)
            clip, dino = identity_scores(item.I_s, item.I_c, item.I_m)
            csd = style_score(item.I_s, item.I_m, patch=self.patch)
            rows.append((clip, dino, csd))
        return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


class CurationFilter(BaseEstimator):
    """Calibrate the three thresholds independently; accept iff all are exceeded."""

    def __init__(self, rejection_cap: float = 0.3):
        self.rejection_cap = rejection_cap

    def fit(self, X, y):
        X = check_scores(X, ncols=3)
        cals = [ThresholdCalibrator(self.rejection_cap).fit(X[:, i], y) for i in range(3)]
        self.thresholds_ = FilterThresholds(
            *(c.threshold_ for c in cals),
            reports={name: c.report_ for name, c in zip(SCORE_NAMES, cals)},
        )
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "thresholds_")
        return cascade(X, self.thresholds_)


def cascade(scores, thresholds: FilterThresholds) -> np.ndarray:
    """Filter 1 (both identity scores) then Filter 2 (style score), all strict."""
    X = check_scores(scores, ncols=3)
    passed_identity = (X[:, 0] > thresholds.T_clip) & (X[:, 1] > thresholds.T_dino)
    return passed_identity & (X[:, 2] > thresholds.T_csd)


def filter_dataset(records, thresholds: FilterThresholds, root, scores=None):
    """Split ``records`` into (accepted, rejected), annotating scores and verdicts."""
    records = list(records)
    root = Path(root)
    for r in records:
        for attr in ("I_c", "I_m", "I_s"):
            p = root / getattr(r, attr)
            if not p.exists():
                raise FileNotFoundError(f"{r.id}: missing {attr} file {p}")
    if scores is None:
        scores = SampleScorer(root=root).transform(records)
    keep = cascade(scores, thresholds)
    accepted, rejected = [], []
    for r, s, k in zip(records, scores, keep):
        r.scores = dict(zip(SCORE_NAMES, (float(v) for v in s)))
        if s[0] <= thresholds.T_clip or s[1] <= thresholds.T_dino:
            r.verdict = "rejected:identity"
        elif s[2] <= thresholds.T_csd:
            r.verdict = "rejected:style"
        else:
            r.verdict = "accepted"
        (accepted if k else rejected).append(r)
    accepted.sort(key=lambda r: r.id)
    rejected.sort(key=lambda r: r.id)
    return accepted, rejected
