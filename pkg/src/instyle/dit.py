"""Four-stream diffusion transformer with branch-specific LoRA adapters.

Every block processes the text (c), noisy image (t), style-context (style)
and reference (ref) streams jointly. All streams share one frozen set of
base projections; the image, style and reference streams each add their own
low-rank delta. Joint attention runs over the concatenation ``[c; t; style;
ref]`` with an additive structural mask that cuts the ref<->style paths.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

STREAMS = ("c", "t", "style", "ref")
BRANCHES = ("ref", "style", "main")
# which adapter branch each stream uses; the text stream runs on the base only
STREAM_BRANCH = {"c": None, "t": "main", "style": "style", "ref": "ref"}
LORA_PROJECTIONS = ("wq", "wk", "wv", "wo", "mlp1", "mlp2")

TEXT_VOCAB = ("<pad>", "a", "photo", "of", "this", "item", "on", "table",
              "fill", "the", "in", "style", "scene", "insert", "object", "<unk>")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    mlp_mult: int = 2
    lora_rank: int = 16
    patch_size: int = 8
    image_hw: int = 64
    channels: int = 3
    text_vocab: int = len(TEXT_VOCAB)
    max_text_len: int = 8
    ref_window: int = 6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_hw % self.patch_size:
            raise ValueError("image_hw must be divisible by patch_size")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 (2-D sinusoidal positions)")
        if not 1 <= self.ref_window <= self.grid:
            raise ValueError("ref_window must fit in the patch grid")

    @property
    def grid(self) -> int:
        return self.image_hw // self.patch_size

    @property
    def d_patch(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def tokenize(prompt: str, config: ModelConfig) -> np.ndarray:
    """Toy-vocabulary lookup, padded/truncated to ``max_text_len``."""
    index = {w: i for i, w in enumerate(TEXT_VOCAB)}
    ids = [index.get(w, index["<unk>"]) for w in prompt.lower().split()][: config.max_text_len]
    ids += [0] * (config.max_text_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


# ------------------------------------------------------------------ parameters


def _lora_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    d, h = config.d_model, config.d_model * config.mlp_mult
    return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "mlp1": (d, h), "mlp2": (h, d)}


class BranchParams:
    """One frozen base plus per-branch LoRA pairs.

    ``base`` holds exactly one tensor per shared weight; every stream reads
    the same objects. ``adapters`` maps ``lora.<branch>.<layer>.<proj>.A|B``
    to branch-exclusive tensors.
    """

    def __init__(self, config: ModelConfig, base: dict[str, Tensor], adapters: dict[str, Tensor]):
        self.config = config
        self.base = base
        self.adapters = adapters

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "BranchParams":
        rng = np.random.default_rng(seed)
        d, dp = config.d_model, config.d_patch
        hid = d * config.mlp_mult

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype))

        def ones(shape):
            return Tensor(np.ones(shape, dtype=dtype))

        base = {
            "patch.W": normal((dp, d), dp ** -0.5),
            "patch.b": zeros((d,)),
            "text.table": normal((config.text_vocab, d), 1.0),
            "time.W1": normal((d, d), d ** -0.5),
            "time.b1": zeros((d,)),
            "time.W2": normal((d, d), d ** -0.5),
            "time.b2": zeros((d,)),
        }
        for i in range(config.n_layers):
            p = f"blocks.{i}."
            base[p + "norm1"] = ones((d,))
            base[p + "norm2"] = ones((d,))
            base[p + "mod.W"] = zeros((d, 6 * d))
            base[p + "mod.b"] = zeros((6 * d,))
            for name in ("wq", "wk", "wv", "wo"):
                base[p + name] = normal((d, d), d ** -0.5)
            base[p + "mlp1"] = normal((d, hid), d ** -0.5)
            base[p + "mlp2"] = normal((hid, d), hid ** -0.5)
        base["final.norm"] = ones((d,))
        base["final.mod.W"] = zeros((d, 2 * d))
        base["final.mod.b"] = zeros((2 * d,))
        base["final.W"] = zeros((d, dp))
        base["final.b"] = zeros((dp,))
        for name, t in base.items():
            t.name = name
        params = cls(config, base, {})
        for branch in BRANCHES:
            params.reset_branch(branch, seed=seed)
        return params

    def reset_branch(self, branch: str, seed: int = 0) -> None:
        """Fresh adapters for ``branch``: small-uniform A, zero B (zero delta)."""
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}")
        dtype = self.base["patch.W"].dtype
        rng = np.random.default_rng([seed, BRANCHES.index(branch)])
        r = self.config.lora_rank
        for i in range(self.config.n_layers):
            for proj, (din, dout) in _lora_shapes(self.config).items():
                key = f"lora.{branch}.{i}.{proj}"
                bound = din ** -0.5
                self.adapters[key + ".A"] = Tensor(rng.uniform(-bound, bound, (din, r)).astype(dtype), name=key + ".A")
                self.adapters[key + ".B"] = Tensor(np.zeros((r, dout), dtype=dtype), name=key + ".B")

    @property
    def lora_scale(self) -> float:
        return 1.0 / self.config.lora_rank

    def lora(self, branch: str | None, layer: int, proj: str, active) -> tuple[Tensor | None, Tensor | None]:
        if branch is None or branch not in active:
            return None, None
        key = f"lora.{branch}.{layer}.{proj}"
        return self.adapters[key + ".A"], self.adapters[key + ".B"]

    def branch_names(self, branch: str) -> list[str]:
        return sorted(k for k in self.adapters if k.startswith(f"lora.{branch}."))

    def named(self) -> dict[str, Tensor]:
        return {**self.base, **self.adapters}

    def tensors(self, names) -> list[Tensor]:
        allp = self.named()
        return [allp[n] for n in names]

    def set_trainable(self, trainable_branches=(), train_base: bool = False) -> list[Tensor]:
        """Mark exactly the given branches (and optionally the base) trainable."""
        out = []
        for name, t in self.base.items():
            t.requires_grad = train_base
            t.grad = None
            if train_base:
                out.append(t)
        for name, t in self.adapters.items():
            branch = name.split(".")[1]
            t.requires_grad = branch in trainable_branches
            t.grad = None
            if t.requires_grad:
                out.append(t)
        return out

    def group_hash(self, group: str) -> str:
        """sha256 over one parameter group: ``base`` or an adapter branch name."""
        if group == "base":
            items = sorted(self.base.items())
        else:
            items = [(n, self.adapters[n]) for n in self.branch_names(group)]
        h = hashlib.sha256()
        for name, t in items:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "BranchParams":
        def dup(d):
            return {k: Tensor(v.data.copy(), name=k) for k, v in d.items()}

        return BranchParams(self.config, dup(self.base), dup(self.adapters))

    def astype(self, dtype) -> "BranchParams":
        def cast(d):
            return {k: Tensor(v.data.astype(dtype), name=k) for k, v in d.items()}

        return BranchParams(self.config, cast(self.base), cast(self.adapters))

    def state_dict(self, meta: dict | None = None) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key, value in self.config.to_dict().items():
            out[f"meta.config.{key}"] = np.asarray(float(value))
        for key, value in sorted((meta or {}).items()):
            out[f"meta.{key}"] = np.asarray(float(value))
        for name in sorted(self.base):
            out[name] = self.base[name].data
        for name in sorted(self.adapters):
            out[name] = self.adapters[name].data
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> tuple["BranchParams", dict[str, float]]:
        cfg = {k[len("meta.config."):]: int(v) for k, v in state.items() if k.startswith("meta.config.")}
        config = ModelConfig(**cfg)
        meta = {k[len("meta."):]: float(v) for k, v in state.items()
                if k.startswith("meta.") and not k.startswith("meta.config.")}
        base = {k: Tensor(v.copy(), name=k) for k, v in state.items() if not k.startswith(("meta.", "lora."))}
        adapters = {k: Tensor(v.copy(), name=k) for k, v in state.items() if k.startswith("lora.")}
        return cls(config, base, adapters), meta

    def save(self, path, meta: dict | None = None) -> None:
        ad.save_checkpoint(path, self.state_dict(meta))

    @classmethod
    def load(cls, path) -> tuple["BranchParams", dict[str, float]]:
        return cls.from_state_dict(ad.load_checkpoint(path))


# ---------------------------------------------------------------- token streams


@dataclass
class TokenStreams:
    """Hidden states of the four streams, each ``[B, L, d]`` or absent."""

    c: Tensor | None = None
    t: Tensor | None = None
    style: Tensor | None = None
    ref: Tensor | None = None

    def segments(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in STREAMS if getattr(self, name) is not None]

    def lengths(self) -> tuple[int, int, int, int]:
        return tuple(0 if getattr(self, n) is None else getattr(self, n).shape[1] for n in STREAMS)

    def replace(self, **kw) -> "TokenStreams":
        vals = {n: getattr(self, n) for n in STREAMS}
        vals.update(kw)
        return TokenStreams(**vals)


@dataclass(frozen=True)
class StructuralMask:
    """Additive 0/-inf attention bias over the concatenated streams."""

    lengths: tuple[int, int, int, int]
    blocked: np.ndarray = field(repr=False)

    def bias(self, dtype=np.float64) -> np.ndarray:
        dtype = np.dtype(dtype)
        cache = self.__dict__.setdefault("_bias_cache", {})
        if dtype not in cache:
            cache[dtype] = np.where(self.blocked, ad.NEG_SENTINEL[dtype], 0.0).astype(dtype)
            cache[dtype].setflags(write=False)
        return cache[dtype]

    @property
    def size(self) -> int:
        return int(np.sum(self.lengths))


def build_structural_mask(L_c: int, L_t: int, L_s: int, L_r: int) -> StructuralMask:
    """Block ref<->style attention in both directions; everything else open."""
    lengths = (int(L_c), int(L_t), int(L_s), int(L_r))
    if min(lengths) < 0:
        raise ValueError("segment lengths must be >= 0")
    n = sum(lengths)
    seg = np.repeat(np.arange(4), lengths)
    is_style = seg == 2
    is_ref = seg == 3
    blocked = (is_ref[:, None] & is_style[None, :]) | (is_style[:, None] & is_ref[None, :])
    return StructuralMask(lengths, blocked.reshape(n, n))


def open_mask(L_c: int, L_t: int, L_s: int, L_r: int) -> StructuralMask:
    n = L_c + L_t + L_s + L_r
    return StructuralMask((L_c, L_t, L_s, L_r), np.zeros((n, n), dtype=bool))


# ------------------------------------------------------------------- attention


def joint_attention(streams: TokenStreams, params: BranchParams, mask: StructuralMask | None,
                    active_adapters=frozenset(), layer: int = 0) -> TokenStreams:
    """Masked joint self-attention over ``[c; t; style; ref]``.

    Each stream projects Q/K/V (and the output) with the shared base weight
    plus its own adapter when that branch is active. Returns per-stream
    outputs with the input lengths.
    """
    cfg = params.config
    active = frozenset(active_adapters)
    unknown = active - set(BRANCHES)
    if unknown:
        raise ValueError(f"unknown adapter branches {sorted(unknown)}")
    segs = streams.segments()
    for name, x in segs:
        if x.shape[-1] != cfg.d_model:
            raise DimensionError(f"stream {name} width {x.shape[-1]} != d_model {cfg.d_model}")
    lengths = streams.lengths()
    if mask is None:
        mask = open_mask(*lengths)
    if tuple(mask.lengths) != lengths:
        raise DimensionError(f"mask lengths {mask.lengths} != stream lengths {lengths}")

    pre = f"blocks.{layer}."
    qs, ks, vs = [], [], []
    for name, x in segs:
        branch = STREAM_BRANCH[name]
        for proj, bucket in (("wq", qs), ("wk", ks), ("wv", vs)):
            A, B = params.lora(branch, layer, proj, active)
            bucket.append(ad.linear_lora(x, params.base[pre + proj], A, B, params.lora_scale))
    q, k, v = (ad.concat(b, axis=1) for b in (qs, ks, vs))
    batch, total = q.shape[0], q.shape[1]
    h, dh = cfg.n_heads, cfg.head_dim

    def heads(z):
        return ad.transpose(ad.reshape(z, (batch, total, h, dh)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = ad.masked_softmax(logits, mask.bias(logits.dtype))
    mixed = ad.reshape(ad.transpose(ad.matmul(probs, vh), (0, 2, 1, 3)), (batch, total, cfg.d_model))

    out = {}
    start = 0
    for name, x in segs:
        n = x.shape[1]
        piece = ad.take(mixed, start, start + n, axis=1)
        A, B = params.lora(STREAM_BRANCH[name], layer, "wo", active)
        out[name] = ad.linear_lora(piece, params.base[pre + "wo"], A, B, params.lora_scale)
        start += n
    return TokenStreams(**out)


# ---------------------------------------------------------------------- blocks


def _modulation(temb: Tensor, W: Tensor, b: Tensor, parts: int) -> list[Tensor]:
    m = ad.add(ad.linear_lora(ad.silu(temb), W), b)
    m = ad.reshape(m, (m.shape[0], 1, m.shape[1]))
    d = m.shape[-1] // parts
    return [ad.take(m, i * d, (i + 1) * d, axis=-1) for i in range(parts)]


def _modulate(x: Tensor, gain: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.rms_norm(x, gain), ad.add(scale, 1.0)), shift)


def forward_block(streams: TokenStreams, params: BranchParams, mask: StructuralMask | None,
                  t_embed: Tensor, active_adapters=frozenset(), layer: int = 0,
                  cond_embed: Tensor | None = None) -> TokenStreams:
    """Pre-norm attention + MLP residual block with timestep modulation.

    ``t_embed`` conditions the text and image streams; ``cond_embed`` (the
    t=0 embedding) conditions the style and reference streams.
    """
    pre = f"blocks.{layer}."
    base = params.base
    mods = {"t": _modulation(t_embed, base[pre + "mod.W"], base[pre + "mod.b"], 6)}
    if cond_embed is None:
        cond_embed = t_embed
    mods["cond"] = _modulation(cond_embed, base[pre + "mod.W"], base[pre + "mod.b"], 6)

    def mod_of(name):
        return mods["cond"] if name in ("style", "ref") else mods["t"]

    normed = {}
    for name, x in streams.segments():
        shift1, scale1 = mod_of(name)[0], mod_of(name)[1]
        normed[name] = _modulate(x, base[pre + "norm1"], shift1, scale1)
    attn = joint_attention(TokenStreams(**normed), params, mask, active_adapters, layer)

    active = frozenset(active_adapters)
    out = {}
    for name, x in streams.segments():
        shift1, scale1, gate1, shift2, scale2, gate2 = mod_of(name)
        x = ad.add(x, ad.mul(gate1, getattr(attn, name)))
        h = _modulate(x, base[pre + "norm2"], shift2, scale2)
        branch = STREAM_BRANCH[name]
        A1, B1 = params.lora(branch, layer, "mlp1", active)
        A2, B2 = params.lora(branch, layer, "mlp2", active)
        h = ad.silu(ad.linear_lora(h, base[pre + "mlp1"], A1, B1, params.lora_scale))
        h = ad.linear_lora(h, base[pre + "mlp2"], A2, B2, params.lora_scale)
        out[name] = ad.add(x, ad.mul(gate2, h))
    return TokenStreams(**out)


# ------------------------------------------------------------- patches, inputs


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``[H, W, C]`` (or ``[B, H, W, C]``) image to ``[(H/p)(W/p), p*p*C]`` tokens, raster order."""
    image = np.asarray(image)
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    b, hgt, wid, ch = image.shape
    p = patch_size
    if hgt % p or wid % p:
        raise ValueError(f"image {hgt}x{wid} not divisible by patch size {p}")
    x = image.reshape(b, hgt // p, p, wid // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, (hgt // p) * (wid // p), p * p * ch)
    return x[0] if squeeze else x


def unpatchify(tokens: np.ndarray, patch_size: int, hw: tuple[int, int], channels: int = 3) -> np.ndarray:
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    hgt, wid = hw
    p = patch_size
    if hgt % p or wid % p:
        raise ValueError(f"image {hgt}x{wid} not divisible by patch size {p}")
    b = tokens.shape[0]
    x = tokens.reshape(b, hgt // p, wid // p, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, hgt, wid, channels)
    return x[0] if squeeze else x


def sincos_2d(positions: np.ndarray, d_model: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding of integer ``(row, col)`` pairs ``[..., 2]``."""
    quarter = d_model // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    rows = positions[..., 0:1] * freqs
    cols = positions[..., 1:2] * freqs
    return np.concatenate([np.sin(rows), np.cos(rows), np.sin(cols), np.cos(cols)], axis=-1)


def grid_positions(config: ModelConfig, row0: int = 0, col0: int = 0, size: int | None = None) -> np.ndarray:
    size = config.grid if size is None else size
    r, c = np.meshgrid(np.arange(size) + row0, np.arange(size) + col0, indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=-1)


def text_positions(config: ModelConfig) -> np.ndarray:
    # sequence positions on a row of their own, left of the image grid
    idx = np.arange(config.max_text_len)
    return np.stack([idx, np.full_like(idx, -2)], axis=-1)


def ref_positions(config: ModelConfig, row0: int, col0: int) -> np.ndarray:
    """Reference window tokens: aligned to placement, shifted below the image grid."""
    return grid_positions(config, row0 + config.grid, col0, size=config.ref_window)


def timestep_embedding(t, params: BranchParams) -> Tensor:
    d = params.config.d_model
    t = np.asarray(t, dtype=params.base["time.W1"].dtype).reshape(-1)
    half = d // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = (t[:, None] * 1000.0) * freqs[None, :]
    feats = Tensor(np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(t.dtype))
    h = ad.silu(ad.add(ad.linear_lora(feats, params.base["time.W1"]), params.base["time.b1"]))
    return ad.add(ad.linear_lora(h, params.base["time.W2"]), params.base["time.b2"])


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return ad._result(table.data[ids], (table,), backward, "embedding")


def _patch_embed(z, params: BranchParams, positions: np.ndarray) -> Tensor:
    z = ad.as_tensor(z, params.base["patch.W"])
    if z.ndim == 2:
        z = ad.reshape(z, (1,) + z.shape)
    pos = sincos_2d(np.broadcast_to(positions, z.shape[:2] + (2,)), params.config.d_model).astype(z.dtype)
    h = ad.add(ad.linear_lora(z, params.base["patch.W"]), params.base["patch.b"])
    return ad.add(h, pos)


def embed_streams(Z_t, Z_c, Z_style, Z_ref, params: BranchParams, positions: dict | None = None) -> TokenStreams:
    cfg = params.config
    positions = dict(positions or {})
    positions.setdefault("t", grid_positions(cfg))
    positions.setdefault("style", grid_positions(cfg))
    positions.setdefault("ref", ref_positions(cfg, 0, 0))
    t_tok = _patch_embed(Z_t, params, positions["t"])
    batch = t_tok.shape[0]
    c_tok = None
    if Z_c is not None:
        ids = np.asarray(Z_c, dtype=np.int64)
        if ids.ndim == 1:
            ids = np.broadcast_to(ids, (batch, ids.shape[0]))
        pos = sincos_2d(text_positions(cfg)[: ids.shape[1]], cfg.d_model).astype(t_tok.dtype)
        c_tok = ad.add(embedding(params.base["text.table"], ids), pos)
    style_tok = None if Z_style is None else _patch_embed(Z_style, params, positions["style"])
    ref_tok = None if Z_ref is None else _patch_embed(Z_ref, params, positions["ref"])
    return TokenStreams(c=c_tok, t=t_tok, style=style_tok, ref=ref_tok)


def model_forward(Z_t, Z_c, Z_style, Z_ref, t, config: ModelConfig, params: BranchParams,
                  mask: StructuralMask | str | None = "structural", active_adapters=None,
                  positions: dict | None = None) -> Tensor:
    """Velocity prediction for the image stream, ``[B, L_t, d_patch]``.

    ``mask`` may be a prebuilt :class:`StructuralMask`, ``"structural"``,
    or ``None`` / ``"none"`` for unmasked joint attention. By default every
    adapter branch whose stream is present is active.
    """
    if config != params.config:
        raise ValueError("config does not match the parameters' config")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    streams = embed_streams(Z_t, Z_c, Z_style, Z_ref, params, positions)
    batch = streams.t.shape[0]
    if t.size == 1 and batch > 1:
        t = np.full(batch, t[0])
    if active_adapters is None:
        active_adapters = {"main"} | ({"style"} if Z_style is not None else set()) | ({"ref"} if Z_ref is not None else set())
    lengths = streams.lengths()
    if isinstance(mask, str):
        mask = build_structural_mask(*lengths) if mask == "structural" else None
    temb = timestep_embedding(t, params)
    cond = timestep_embedding(np.zeros(batch), params)
    for layer in range(config.n_layers):
        streams = forward_block(streams, params, mask, temb, active_adapters, layer, cond)
    shift, scale = _modulation(temb, params.base["final.mod.W"], params.base["final.mod.b"], 2)
    h = _modulate(streams.t, params.base["final.norm"], shift, scale)
    return ad.add(ad.linear_lora(h, params.base["final.W"]), params.base["final.b"])
