"""Input validation shared by the estimators and pipeline functions."""
from __future__ import annotations

import numpy as np

GOOD_LABELS = {"good", 1, True, "1"}
BAD_LABELS = {"bad", 0, False, "0"}


def check_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an RGB image [H, W, 3], got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("float image values must lie in [0, 255]")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


def check_binary_mask(mask, allow_empty: bool = False) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    values = np.unique(arr)
    if not np.isin(values, (0, 1)).all():
        if np.isin(values, (0, 255)).all():
            arr = (arr > 0).astype(np.uint8)
        else:
            raise ValueError("mask must be binary (0/1 or 0/255)")
    if not allow_empty and not arr.any():
        raise ValueError("mask is empty")
    return arr.astype(np.uint8, copy=False)


def check_scores(scores, ncols: int | None = None) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if ncols is None:
        arr = arr.reshape(-1)
    elif arr.ndim != 2 or arr.shape[1] != ncols:
        raise ValueError(f"expected scores of shape [n, {ncols}], got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("scores must be finite")
    return arr


def check_labels(labels, n: int) -> np.ndarray:
    """Labels as a boolean "good" vector."""
    out = []
    for lab in labels:
        key = lab.item() if isinstance(lab, np.generic) else lab
        if key in GOOD_LABELS:
            out.append(True)
        elif key in BAD_LABELS:
            out.append(False)
        else:
            raise ValueError(f"unknown label {lab!r}")
    if len(out) != n:
        raise ValueError(f"{len(out)} labels for {n} scores")
    return np.asarray(out, dtype=bool)
