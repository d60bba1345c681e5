"""Conditioning recipes: how images become token streams for each stage.

Pixel values map linearly to ``[-1, 1]`` and are patchified; this stands in
for the latent interface of a pretrained autoencoder.

* stage 0 (base pretraining): plain generation of synthetic images,
* stage 1: reference object -> full composite, prompt naming "this item",
* stage 2: style-aware inpainting of a token box from the unmasked tokens,
* stage 3: reference + masked stylized scene -> stylized composite, no prompt.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_binary_mask, check_image
from .dit import ModelConfig, grid_positions, patchify, ref_positions, tokenize, unpatchify
from .synth import NEUTRAL, Sample, foreground_support, resize_nearest

PROMPTS = {
    0: "a photo of the scene",
    1: "a photo of this item on a table",
    2: "fill the scene in the style",
    3: "",
}


def encode(image: np.ndarray, config: ModelConfig) -> np.ndarray:
    """uint8 image ``[H, W, 3]`` (or batch) to tokens ``[L, d_patch]`` in ``[-1, 1]``."""
    x = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
    return patchify(x, config.patch_size)


def decode(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    x = unpatchify(np.asarray(tokens), config.patch_size, (config.image_hw, config.image_hw), config.channels)
    return np.clip(np.rint((x.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def token_mask(pixel_mask: np.ndarray, config: ModelConfig) -> np.ndarray:
    """A token is masked when any of its pixels is (dilation to the patch grid)."""
    m = check_binary_mask(pixel_mask, allow_empty=True)
    g, p = config.grid, config.patch_size
    return m.reshape(g, p, g, p).any(axis=(1, 3)).reshape(-1)


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask is empty")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def place_reference(I_f: np.ndarray, I_m: np.ndarray, config: ModelConfig) -> tuple[np.ndarray, tuple[int, int]]:
    """Reference object resized to the placement box on a neutral window.

    Returns the ``ref_window * patch`` square canvas and its origin in token
    units. The window starts at the token containing the box's top-left
    corner; boxes that overflow it are shrunk to fit.
    """
    I_f = check_image(I_f)
    I_m = check_binary_mask(I_m)
    support = foreground_support(I_f)
    if not support.any():
        raise ValueError("reference image has no foreground")
    ft, fl, fb, fr = _bbox(support)
    obj, obj_mask = I_f[ft:fb, fl:fr], support[ft:fb, fl:fr]
    top, left, bottom, right = _bbox(I_m)
    p, w = config.patch_size, config.ref_window
    span = w * p
    row0, col0 = top // p, left // p
    oy, ox = top - row0 * p, left - col0 * p
    h, wd = min(bottom - top, span - oy), min(right - left, span - ox)
    canvas = np.empty((span, span, 3), dtype=np.uint8)
    canvas[:] = NEUTRAL
    obj = resize_nearest(obj, h, wd)
    obj_mask = resize_nearest(obj_mask[..., None].astype(np.uint8), h, wd)[..., 0].astype(bool)
    region = canvas[oy:oy + h, ox:ox + wd]
    region[obj_mask] = obj[obj_mask]
    return canvas, (row0, col0)


@dataclass
class Example:
    """One training or inference example in token space."""

    Z_0: np.ndarray | None
    prompt: np.ndarray
    Z_style: np.ndarray | None = None
    Z_ref: np.ndarray | None = None
    ref_origin: tuple[int, int] = (0, 0)


def reference_example(I_f, I_m, config: ModelConfig) -> tuple[np.ndarray, tuple[int, int]]:
    canvas, origin = place_reference(I_f, I_m, config)
    return encode(canvas, config), origin


def stage0_example(image: np.ndarray, config: ModelConfig) -> Example:
    return Example(encode(check_image(image), config), tokenize(PROMPTS[0], config))


def stage1_example(sample: Sample, config: ModelConfig) -> Example:
    if sample.I_f is None:
        raise ValueError(f"{sample.record.id}: missing reference image")
    Z_ref, origin = reference_example(sample.I_f, sample.I_m, config)
    return Example(encode(sample.I_c, config), tokenize(PROMPTS[1], config), Z_ref=Z_ref, ref_origin=origin)


def random_token_box(rng: np.random.Generator, config: ModelConfig) -> np.ndarray:
    """A rectangular token mask covering neither nothing nor everything."""
    g = config.grid
    while True:
        h, w = rng.integers(2, g, 2)
        top, left = rng.integers(0, g - h + 1), rng.integers(0, g - w + 1)
        m = np.zeros((g, g), dtype=bool)
        m[top:top + h, left:left + w] = True
        if 0 < m.sum() < m.size:
            return m.reshape(-1)


def inpainting_tokens(Z_i: np.ndarray, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(Z_i * M, Z_i * (1 - M))``: noisy-target and style-context tokens."""
    M = np.asarray(M, dtype=bool).reshape(-1)
    if not M.any() or M.all():
        raise ValueError("degenerate inpainting mask (covers 0% or 100% of tokens)")
    keep = M[:, None].astype(Z_i.dtype)
    return Z_i * keep, Z_i * (1 - keep)


def stage2_example(image: np.ndarray, M: np.ndarray, config: ModelConfig) -> Example:
    Z_0, Z_style = inpainting_tokens(encode(check_image(image), config), M)
    return Example(Z_0, tokenize(PROMPTS[2], config), Z_style=Z_style)


def stage3_example(sample: Sample, config: ModelConfig) -> Example:
    missing = [k for k in ("I_f", "I_s", "I_m") if getattr(sample, k) is None]
    if missing:
        raise ValueError(f"{sample.record.id}: missing {', '.join(missing)}")
    Z_ref, origin = reference_example(sample.I_f, sample.I_m, config)
    M = token_mask(sample.I_m, config)
    Z_s = encode(sample.I_s, config)
    Z_style = Z_s * (1 - M[:, None].astype(Z_s.dtype))
    return Example(Z_s, tokenize(PROMPTS[3], config), Z_style=Z_style, Z_ref=Z_ref, ref_origin=origin)


def inference_example(I_f, background, I_m, config: ModelConfig) -> Example:
    """Compose-time conditions: no target, empty prompt, masked scene context."""
    Z_ref, origin = reference_example(I_f, I_m, config)
    M = token_mask(I_m, config)
    Z_bg = encode(check_image(background), config)
    Z_style = Z_bg * (1 - M[:, None].astype(Z_bg.dtype))
    return Example(None, tokenize(PROMPTS[3], config), Z_style=Z_style, Z_ref=Z_ref, ref_origin=origin)


@dataclass
class Batch:
    Z_0: np.ndarray | None
    prompt: np.ndarray
    Z_style: np.ndarray | None
    Z_ref: np.ndarray | None
    positions: dict

    @property
    def size(self) -> int:
        return self.prompt.shape[0]


def collate(examples: list[Example], config: ModelConfig, streams=("c", "t", "style", "ref")) -> Batch:
    """Stack examples, dropping conditional streams not in ``streams``."""
    if not examples:
        raise ValueError("empty batch")

    def stack(attr):
        vals = [getattr(e, attr) for e in examples]
        if any(v is None for v in vals):
            return None
        return np.stack(vals)

    Z_style = stack("Z_style") if "style" in streams else None
    Z_ref = stack("Z_ref") if "ref" in streams else None
    prompt = np.stack([e.prompt for e in examples])
    positions = {"t": grid_positions(config), "style": grid_positions(config)}
    if Z_ref is not None:
        positions["ref"] = np.stack([ref_positions(config, *e.ref_origin) for e in examples])
    return Batch(stack("Z_0"), prompt, Z_style, Z_ref, positions)
