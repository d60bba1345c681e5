"""Deterministic hand-built image embedders.

These play the roles of the pretrained similarity networks at desk scale:

* :class:`SemanticEmbedder` - colour self-similarity over a cell layout plus
  pooled edge orientations. A restyled object stays close to its original
  while a different object does not.
* :class:`StyleEmbedder` - global colour and texture statistics, blind to
  layout.

Similarity between two vectors is cosine mapped to ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import median_filter, uniform_filter


def cosine_similarity01(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.5
    cos = float(np.dot(a, b) / (na * nb))
    return float(np.clip((1.0 + cos) / 2.0, 0.0, 1.0))


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img.astype(np.float64)
    pil = Image.fromarray(np.asarray(img, dtype=np.uint8))
    return np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _centred(hist: np.ndarray) -> np.ndarray:
    """Histogram as a unit deviation from the flat distribution.

    Unstructured input (noise, flat spectra) maps near zero and so carries
    no similarity to anything.
    """
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        return np.zeros_like(hist)
    return _unit(hist / total - 1.0 / hist.size)


def _hue_saturation(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rgb = img / 255.0
    mx, mn = rgb.max(-1), rgb.min(-1)
    chroma = mx - mn
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(chroma > 0, chroma, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    hue = np.where(chroma > 0, hue / 6.0, 0.0)
    return hue, chroma


def _smooth(img: np.ndarray, width: int) -> np.ndarray:
    # box filter over whole texture periods so stripes and checkers average out
    if width <= 1:
        return img.astype(np.float64)
    return uniform_filter(img.astype(np.float64), size=(width, width, 1), mode="nearest")


def _orientation_histograms(img: np.ndarray, grid: int, orientations: int) -> np.ndarray:
    gy, gx = np.gradient(img, axis=(0, 1))
    mag = np.hypot(gx, gy)
    pick = mag.argmax(-1)[..., None]
    gx = np.take_along_axis(gx, pick, -1)[..., 0]
    gy = np.take_along_axis(gy, pick, -1)[..., 0]
    mag = np.take_along_axis(mag, pick, -1)[..., 0]
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / np.pi * orientations).astype(int), orientations - 1)
    cell = img.shape[0] // grid
    feats = []
    for i in range(grid):
        for j in range(grid):
            sl = (slice(i * cell, (i + 1) * cell), slice(j * cell, (j + 1) * cell))
            feats.append(_centred(np.bincount(bins[sl].ravel(), weights=mag[sl].ravel(), minlength=orientations)))
    return np.concatenate(feats) / grid


def _colour_self_similarity(img: np.ndarray, grid: int, sigma: float) -> np.ndarray:
    """Upper triangle of the cell-to-cell colour affinity matrix, centred.

    Any pointwise recolouring keeps equal colours equal, so this captures the
    part layout of an object while ignoring which palette paints it.
    """
    c = img.shape[0] // grid
    ch = img.shape[-1]
    cells = img[:grid * c, :grid * c].reshape(grid, c, grid, c, ch).mean(axis=(1, 3)).reshape(-1, ch)
    dist = np.linalg.norm(cells[:, None] - cells[None], axis=-1)
    scale = sigma * dist.mean() + 1e-6
    aff = np.exp(-(dist / scale) ** 2)[np.triu_indices(len(cells), 1)]
    return _unit(aff - aff.mean())


@dataclass(frozen=True)
class SemanticEmbedder:
    """Palette-robust object descriptor.

    Concatenates a colour self-similarity block on a ``grid`` x ``grid`` cell
    layout with spatially pooled edge-orientation histograms. Texture is
    suppressed first by a box filter ``smooth`` pixels wide. With ``luma``
    the self-similarity uses luminance only, which makes it exactly
    invariant to palettes that are affine in luminance.
    """

    name: str = "semantic"
    grid: int = 8
    orient_grid: int = 2
    orientations: int = 8
    size: int = 32
    smooth: int = 8
    sigma: float = 0.5
    orient_weight: float = 0.3
    luma: bool = False

    @property
    def dim(self) -> int:
        n = self.grid * self.grid
        return n * (n - 1) // 2 + self.orient_grid ** 2 * self.orientations + 1

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        smoothed = np.clip(_smooth(img, self.smooth), 0, 255).astype(np.uint8)
        small = _resize(smoothed, self.size)
        colour = small.mean(axis=-1, keepdims=True) if self.luma else small
        ssm = _colour_self_similarity(colour, self.grid, self.sigma)
        edges = _orientation_histograms(small, self.orient_grid, self.orientations)
        # constant offset keeps flat images away from the zero vector
        return np.concatenate([ssm, self.orient_weight * edges, [0.05]])

    def similarity(self, a: np.ndarray, b: np.ndarray) -> float:
        return cosine_similarity01(self(a), self(b))


_BANDS = (0.0, 0.06, 0.1, 0.15, 0.22, 0.3, 0.51)


@dataclass(frozen=True)
class StyleEmbedder:
    """Layout-blind colour and texture statistics.

    Four unit blocks, each a deviation from what white noise would give:
    directional spectral band densities of the luminance, a chroma-weighted
    hue histogram, per-channel level histograms and a chroma histogram.
    """

    name: str = "style"
    chroma_weight: float = 1.0

    @property
    def dim(self) -> int:
        return 2 * (len(_BANDS) - 1) + 12 + 24 + 8

    def __call__(self, image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Statistics over the whole image, or only over ``mask`` pixels."""
        img = np.asarray(image, dtype=np.float64)
        sel = np.ones(img.shape[:2], bool) if mask is None else np.asarray(mask).astype(bool)
        if not sel.any():
            raise ValueError("style mask selects no pixels")
        hue, chroma = _hue_saturation(img)
        hue, chroma, px = hue[sel], chroma[sel], img[sel]
        hue_hist = np.bincount(np.minimum((hue * 12).astype(int), 11), weights=chroma, minlength=12)
        levels = [_centred(np.bincount(np.minimum((px[:, c] / 32).astype(int), 7), minlength=8)) for c in range(3)]
        chroma_hist = np.bincount(np.minimum((chroma * 8).astype(int), 7), minlength=8)
        lum = img.mean(-1)
        # unselected pixels sit at the selected mean and so add no spectral power
        lum = np.where(sel, lum, lum[sel].mean())
        return np.concatenate([
            _spectral_bands(lum),
            _centred(hue_hist),
            _unit(np.concatenate(levels)),
            self.chroma_weight * _centred(chroma_hist),
        ])

    def similarity(self, a: np.ndarray, b: np.ndarray, mask_a=None, mask_b=None) -> float:
        return cosine_similarity01(self(a, mask_a), self(b, mask_b))


def _spectral_bands(lum: np.ndarray) -> np.ndarray:
    """Log power density per directional band, relative to its mean (white noise -> 0)."""
    lum = lum - lum.mean()
    power = np.abs(np.fft.fft2(lum)) ** 2
    fy = np.abs(np.fft.fftfreq(lum.shape[0]))[:, None]
    fx = np.abs(np.fft.fftfreq(lum.shape[1]))[None, :]
    out = []
    for lo, hi in zip(_BANDS[:-1], _BANDS[1:]):
        for axis in (fy, fx):
            sel = np.broadcast_to((axis >= lo) & (axis < hi), power.shape)
            out.append(power[sel].mean() if sel.any() else 0.0)
    logp = np.log(np.asarray(out) + 1e-3 * (power.mean() + 1e-12))
    return _unit(logp - logp.mean())


CLIP_ROLE = SemanticEmbedder(name="clip", grid=4, orient_grid=4, orient_weight=3.0)
DINO_ROLE = SemanticEmbedder(name="dino", grid=16, orient_grid=4, orient_weight=0.5)
CSD_ROLE = StyleEmbedder(name="csd")


@dataclass(frozen=True)
class AestheticScorer:
    """Sharpness, colourfulness and cleanliness mapped into ``[0, 1]``.

    Sharpness is gradient energy after a 2x2 box average, so edges count and
    pixel noise mostly does not; cleanliness penalises energy that a 3x3
    median removes. A declared proxy, not a learned aesthetic model.
    """

    sharp_scale: float = 12.0
    color_scale: float = 40.0
    noise_scale: float = 6.0
    weights: tuple = (0.35, 0.35, 0.3)

    def __call__(self, image: np.ndarray) -> float:
        img = np.asarray(image, dtype=np.float64)
        lum = img.mean(-1)
        coarse = uniform_filter(lum, size=2, mode="nearest")
        gy, gx = np.gradient(coarse)
        sharp = float(np.hypot(gx, gy).mean())
        noise = float(np.abs(lum - median_filter(lum, size=3, mode="nearest")).mean())
        rg = img[..., 0] - img[..., 1]
        yb = 0.5 * (img[..., 0] + img[..., 1]) - img[..., 2]
        colorful = float(np.hypot(rg.std(), yb.std()) + 0.3 * np.hypot(rg.mean(), yb.mean()))
        terms = (sharp / (sharp + self.sharp_scale),
                 colorful / (colorful + self.color_scale),
                 self.noise_scale / (noise + self.noise_scale))
        return float(np.dot(self.weights, terms))
