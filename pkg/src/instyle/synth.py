"""Procedural composition data: foregrounds, scenes, styles and corruptions.

Everything is a pure function of ``(seed, index)`` so parallel and serial
generation produce the same bytes. Images are ``uint8`` ``[H, W, 3]``;
masks are ``uint8`` ``[H, W]`` with values 0/1 in memory and 0/255 on disk.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

IMAGE_HW = 64
FG_HW = 48
NEUTRAL = np.array([128, 128, 128], dtype=np.uint8)
MIN_OBJECT_AREA = 1300
PART_CONTRAST = 0.2
# placements snap to the model's patch grid so reference tokens align
PLACEMENT_STEP = 8


# ------------------------------------------------------------------- styles


@dataclass(frozen=True)
class StyleSpec:
    """A closed-form global stylization: palette map then texture op.

    palette: ``identity`` | ``invert`` | ``swap`` (channel permutation in
    ``perm``) | ``duotone`` (luminance ramp from ``c0`` to ``c1``).
    texture: ``none`` | ``stripes`` | ``checker`` | ``posterize``.
    """

    style_id: str
    palette: str = "identity"
    texture: str = "none"
    c0: tuple = (0, 0, 0)
    c1: tuple = (255, 255, 255)
    perm: tuple = (0, 1, 2)
    period: int = 4
    amplitude: int = 0
    levels: int = 256

    def to_dict(self) -> dict:
        return asdict(self)


STYLES: dict[str, StyleSpec] = {s.style_id: s for s in (
    StyleSpec("identity"),
    StyleSpec("ocean", palette="duotone", c0=(10, 30, 80), c1=(150, 240, 235)),
    StyleSpec("sepia-stripes", palette="duotone", texture="stripes", c0=(60, 35, 15), c1=(245, 220, 170),
              period=4, amplitude=36),
    StyleSpec("invert-checker", palette="invert", texture="checker", period=4, amplitude=40),
    StyleSpec("swap-poster", palette="swap", texture="posterize", perm=(2, 0, 1), levels=2),
    StyleSpec("ink-stripes", palette="duotone", texture="stripes", c0=(20, 20, 25), c1=(235, 235, 225),
              period=4, amplitude=40),
    StyleSpec("neon-poster", palette="duotone", texture="posterize", c0=(90, 0, 130), c1=(255, 240, 40),
              levels=3),
)}
DEFAULT_STYLES = tuple(s for s in STYLES if s != "identity")


def _luminance(img: np.ndarray) -> np.ndarray:
    return (img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114) / 255.0


def apply_palette(img: np.ndarray, spec: StyleSpec) -> np.ndarray:
    if spec.palette == "identity":
        return img.copy()
    if spec.palette == "invert":
        return 255 - img
    if spec.palette == "swap":
        return img[..., list(spec.perm)].copy()
    if spec.palette == "duotone":
        lum = _luminance(img.astype(np.float64))[..., None]
        out = np.asarray(spec.c0, np.float64) * (1 - lum) + np.asarray(spec.c1, np.float64) * lum
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    raise ValueError(f"unknown palette {spec.palette!r}")


def apply_texture(img: np.ndarray, spec: StyleSpec) -> np.ndarray:
    if spec.texture == "none":
        return img.copy()
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    if spec.texture == "posterize":
        lv = spec.levels
        q = np.rint(img.astype(np.float64) / 255.0 * (lv - 1)) * (255.0 / (lv - 1))
        return np.clip(np.rint(q), 0, 255).astype(np.uint8)
    if spec.texture == "stripes":
        sign = np.where((yy // spec.period) % 2 == 0, 1, -1)
    elif spec.texture == "checker":
        sign = np.where(((yy // spec.period) + (xx // spec.period)) % 2 == 0, 1, -1)
    else:
        raise ValueError(f"unknown texture {spec.texture!r}")
    out = img.astype(np.int32) + (sign * spec.amplitude)[..., None]
    return np.clip(out, 0, 255).astype(np.uint8)


def stylize(image: np.ndarray, spec: StyleSpec | str) -> np.ndarray:
    """Apply one global, pointwise style uniformly to the whole image."""
    spec = STYLES[spec] if isinstance(spec, str) else spec
    return apply_texture(apply_palette(np.asarray(image, dtype=np.uint8), spec), spec)


# -------------------------------------------------------------- foregrounds


@dataclass
class ShapeDescriptor:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    polygons: list = field(default_factory=list)
    colors: list = field(default_factory=list)
    area: int = 0
    bbox: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, left, bottom(excl), right(excl)


def _vivid(rng: np.random.Generator, v_range=(0.7, 1.0)) -> tuple[int, int, int]:
    h = rng.uniform()
    s = rng.uniform(0.65, 1.0)
    v = rng.uniform(*v_range)
    return tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(h, s, v))


def _contrasting(rng: np.random.Generator, other, min_gap: float = PART_CONTRAST) -> tuple[int, int, int]:
    # parts must differ from the body in luminance, or luminance-based
    # palettes would merge them and erase the object's identity
    ref = _luminance(np.asarray(other, np.float64))
    while True:
        color = _vivid(rng, (0.35, 1.0))
        if abs(_luminance(np.asarray(color, np.float64)) - ref) >= min_gap:
            return color


def _polygon_mask(points, hw: int) -> np.ndarray:
    canvas = Image.new("L", (hw, hw), 0)
    ImageDraw.Draw(canvas).polygon([tuple(p) for p in points], fill=1)
    return np.asarray(canvas, dtype=bool)


def gen_foreground(seed) -> tuple[np.ndarray, ShapeDescriptor]:
    """A parametric object (ellipse body + polygon parts) on a neutral background."""
    rng = np.random.default_rng(seed)
    hw = FG_HW
    cy = cx = (hw - 1) / 2.0
    a = rng.uniform(21.0, 23.4)
    b = rng.uniform(21.0, 23.4)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    support = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    img = np.empty((hw, hw, 3), dtype=np.uint8)
    img[:] = NEUTRAL
    body = _vivid(rng)
    img[support] = body
    colors = [body]
    polygons = []
    for _ in range(rng.integers(2, 4)):
        k = int(rng.integers(3, 6))
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = rng.uniform(5, 17, k)
        pcx, pcy = rng.uniform(12, 36, 2)
        pts = np.stack([pcx + rad * np.cos(ang), pcy + rad * np.sin(ang)], axis=-1).round(1)
        part = _polygon_mask(pts, hw) & support
        color = _contrasting(rng, body)
        img[part] = color
        polygons.append(pts.tolist())
        colors.append(color)
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    desc = ShapeDescriptor(center=(cy, cx), axes=(a, b), angle=float(angle), polygons=polygons,
                           colors=colors, area=int(support.sum()),
                           bbox=(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1))
    return img, desc


def foreground_support(fg: np.ndarray) -> np.ndarray:
    return np.any(fg != NEUTRAL, axis=-1)


def gen_background(seed) -> np.ndarray:
    """Gradient sky, ground band and a few flat shapes."""
    rng = np.random.default_rng(seed)
    hw = IMAGE_HW
    top, bottom = np.asarray(_vivid(rng), float), np.asarray(_vivid(rng), float)
    ramp = np.linspace(0, 1, hw)[:, None, None]
    img = top * (1 - ramp) + bottom * ramp
    img = np.broadcast_to(img, (hw, hw, 3)).copy()
    horizon = int(rng.integers(36, 52))
    img[horizon:] = np.asarray(_vivid(rng), float) * 0.8
    canvas = Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(2, 5))):
        x0, y0 = rng.integers(0, hw - 8, 2)
        x1, y1 = x0 + rng.integers(6, 24), y0 + rng.integers(6, 24)
        color = _vivid(rng)
        if rng.uniform() < 0.5:
            draw.rectangle([int(x0), int(y0), int(x1), int(y1)], fill=color)
        else:
            draw.ellipse([int(x0), int(y0), int(x1), int(y1)], fill=color)
    return np.asarray(canvas, dtype=np.uint8).copy()


# ------------------------------------------------------------- composition


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(int)
    return img[rows][:, cols]


def compose(fg: np.ndarray, background: np.ndarray, placement) -> tuple[np.ndarray, np.ndarray]:
    """Paste the foreground object at ``placement = (top, left[, scale])``.

    Returns the composite and the exact object-support mask (0/1).
    """
    top, left = int(placement[0]), int(placement[1])
    scale = float(placement[2]) if len(placement) > 2 else 1.0
    fh, fw = fg.shape[:2]
    sh, sw = int(round(fh * scale)), int(round(fw * scale))
    obj = fg if (sh, sw) == (fh, fw) else resize_nearest(fg, sh, sw)
    H, W = background.shape[:2]
    if top < 0 or left < 0 or top + sh > H or left + sw > W:
        raise ValueError(f"placement {placement} puts the object out of frame")
    support = foreground_support(obj)
    composite = background.copy()
    mask = np.zeros((H, W), dtype=np.uint8)
    region = composite[top:top + sh, left:left + sw]
    region[support] = obj[support]
    mask[top:top + sh, left:left + sw] = support
    return composite, mask


def gen_corrupted(I_c: np.ndarray, I_m: np.ndarray, spec: StyleSpec | str, mode: str,
                  background: np.ndarray | None = None, other_fg: np.ndarray | None = None,
                  placement=None) -> np.ndarray:
    """Negative stylized sample.

    ``identity_drift``: inside the mask, a different object (stylized); outside,
    the correctly stylized scene. ``style_incoherence``: background stylized,
    subject left as in ``I_c``.
    """
    styled = stylize(I_c, spec)
    inside = I_m.astype(bool)
    if mode == "style_incoherence":
        out = styled.copy()
        out[inside] = I_c[inside]
        return out
    if mode == "identity_drift":
        if background is None or other_fg is None or placement is None:
            raise ValueError("identity_drift needs background, other_fg and placement")
        other, _ = compose(other_fg, background, placement)
        drifted = stylize(other, spec)
        out = styled.copy()
        out[inside] = drifted[inside]
        return out
    raise ValueError(f"unknown corruption mode {mode!r}")


# ------------------------------------------------------------------ samples


@dataclass
class SampleRecord:
    id: str
    I_f: str
    I_c: str
    I_m: str
    I_s: str
    background: str
    styled_background: str
    style_id: str
    split: str
    placement: list
    label: str = "good"
    mode: str | None = None
    scores: dict | None = None
    verdict: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class DatasetConfig:
    n: int = 100
    seed: int = 0
    styles: tuple = DEFAULT_STYLES
    corruption_rate: float = 0.0
    heldout_fraction: float = 0.1
    prefix: str = "s"


@dataclass
class Sample:
    """In-memory images of one generated sample."""

    record: SampleRecord
    I_f: np.ndarray
    I_c: np.ndarray
    I_m: np.ndarray
    I_s: np.ndarray
    background: np.ndarray
    styled_background: np.ndarray


def split_of(sample_id: str, heldout_fraction: float) -> str:
    h = int(hashlib.sha256(sample_id.encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
    return "heldout" if h < heldout_fraction else "train"


def corruption_plan(cfg: DatasetConfig) -> list[str | None]:
    """Per-index corruption mode; exact counts, seeded positions."""
    n_bad = int(round(cfg.n * cfg.corruption_rate))
    modes: list[str | None] = [None] * cfg.n
    order = np.random.default_rng([cfg.seed, 7]).permutation(cfg.n)
    for j, idx in enumerate(order[:n_bad]):
        modes[idx] = "identity_drift" if j < (n_bad + 1) // 2 else "style_incoherence"
    return modes


def make_sample(cfg: DatasetConfig, index: int, mode: str | None = None) -> Sample:
    """Generate sample ``index`` of a dataset; pure in ``(cfg.seed, index)``."""
    sid = f"{cfg.prefix}{index:05d}"
    rng = np.random.default_rng([cfg.seed, index, 0])
    fg, desc = gen_foreground([cfg.seed, index, 1])
    while desc.area < MIN_OBJECT_AREA:  # pragma: no cover - axes bounds make this rare
        fg, desc = gen_foreground([cfg.seed, index, 1, desc.area])
    bg = gen_background([cfg.seed, index, 2])
    top, left = (int(v) * PLACEMENT_STEP for v in rng.integers(0, (IMAGE_HW - FG_HW) // PLACEMENT_STEP + 1, 2))
    placement = [top, left, 1.0]
    style_id = cfg.styles[int(rng.integers(len(cfg.styles)))]
    spec = STYLES[style_id]
    I_c, I_m = compose(fg, bg, placement)
    styled_bg = stylize(bg, spec)
    if mode is None:
        I_s = stylize(I_c, spec)
    elif mode == "identity_drift":
        other, _ = gen_foreground([cfg.seed, index, 3])
        I_s = gen_corrupted(I_c, I_m, spec, mode, background=bg, other_fg=other, placement=placement)
    else:
        I_s = gen_corrupted(I_c, I_m, spec, mode)
    record = SampleRecord(
        id=sid, I_f=f"{sid}_f.png", I_c=f"{sid}_c.png", I_m=f"{sid}_m.png", I_s=f"{sid}_s.png",
        background=f"{sid}_bg.png", styled_background=f"{sid}_bgs.png", style_id=style_id,
        split=split_of(sid, cfg.heldout_fraction), placement=placement,
        label="good" if mode is None else "bad", mode=mode)
    return Sample(record, fg, I_c, I_m, I_s, bg, styled_bg)


def generate(cfg: DatasetConfig) -> list[Sample]:
    modes = corruption_plan(cfg)
    return [make_sample(cfg, i, modes[i]) for i in range(cfg.n)]


# ---------------------------------------------------------------------- I/O


def save_png(path, array: np.ndarray, mask: bool = False) -> None:
    arr = (np.asarray(array, dtype=np.uint8) * 255) if mask else np.asarray(array, dtype=np.uint8)
    Image.fromarray(arr, mode="L" if mask else "RGB").save(path, format="PNG", optimize=False)


def load_png(path, mask: bool = False) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if mask else "RGB"), dtype=np.uint8)
    return (arr > 127).astype(np.uint8) if mask else arr.copy()


def write_manifest(path, records) -> None:
    lines = [r.to_json() if isinstance(r, SampleRecord) else json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list[SampleRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(SampleRecord.from_dict(json.loads(line)))
    return out


def build_dataset(cfg: DatasetConfig, out_dir) -> Path:
    """Write every sample's PNGs and ``manifest.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in generate(cfg):
        r = sample.record
        save_png(out / r.I_f, sample.I_f)
        save_png(out / r.I_c, sample.I_c)
        save_png(out / r.I_m, sample.I_m, mask=True)
        save_png(out / r.I_s, sample.I_s)
        save_png(out / r.background, sample.background)
        save_png(out / r.styled_background, sample.styled_background)
        records.append(r)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    log.info("wrote %d samples to %s", len(records), out)
    return manifest


def load_sample(root, record: SampleRecord) -> Sample:
    root = Path(root)
    return Sample(
        record,
        I_f=load_png(root / record.I_f),
        I_c=load_png(root / record.I_c),
        I_m=load_png(root / record.I_m, mask=True),
        I_s=load_png(root / record.I_s),
        background=load_png(root / record.background),
        styled_background=load_png(root / record.styled_background),
    )


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
