import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instyle import autodiff as ad
from instyle.autodiff import DimensionError, Tensor
from instyle.dit import (BRANCHES, BranchParams, ModelConfig, TokenStreams, build_structural_mask, embed_streams,
                         forward_block, grid_positions, joint_attention, model_forward, patchify, ref_positions,
                         sincos_2d, text_positions, timestep_embedding, tokenize, unpatchify)

SMALL = ModelConfig(d_model=16, n_heads=2, n_layers=2, mlp_mult=2, lora_rank=4, patch_size=4, image_hw=8,
                    max_text_len=3, ref_window=2)
# finite differences visit every scalar, so the gradient checks use a tiny model
TINY = ModelConfig(d_model=4, n_heads=2, n_layers=2, mlp_mult=2, lora_rank=2, patch_size=2, image_hw=4,
                   max_text_len=2, ref_window=1)


def mask_oracle(L_c, L_t, L_s, L_r):
    """Rule enumeration: only ref<->style pairs are forbidden."""
    seg = ["c"] * L_c + ["t"] * L_t + ["style"] * L_s + ["ref"] * L_r
    n = len(seg)
    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            out[q, k] = {seg[q], seg[k]} == {"ref", "style"}
    return out


def randomize_adapters(params, rng, scale=0.3):
    for k, t in params.adapters.items():
        t.data = (rng.standard_normal(t.shape) * scale).astype(t.dtype)


def random_inputs(cfg, rng, batch=2, dtype=np.float64):
    L = cfg.grid ** 2
    Z_t = rng.standard_normal((batch, L, cfg.d_patch)).astype(dtype)
    Z_s = rng.standard_normal((batch, L, cfg.d_patch)).astype(dtype)
    Z_r = rng.standard_normal((batch, cfg.ref_window ** 2, cfg.d_patch)).astype(dtype)
    Z_c = rng.integers(0, cfg.text_vocab, (batch, cfg.max_text_len))
    return Z_t, Z_c, Z_s, Z_r


# -------------------------------------------------------------------- mask


def test_mask_small_example():
    m = build_structural_mask(2, 3, 2, 2)
    assert m.blocked.sum() == 8
    assert np.array_equal(m.blocked, mask_oracle(2, 3, 2, 2))


def test_mask_without_style_is_open():
    assert not build_structural_mask(3, 4, 0, 5).blocked.any()


def test_mask_matches_oracle_on_random_lengths():
    rng = np.random.default_rng(0)
    for _ in range(100):
        lengths = tuple(int(v) for v in rng.integers(0, 7, 4))
        m = build_structural_mask(*lengths)
        assert np.array_equal(m.blocked, mask_oracle(*lengths))
        assert np.array_equal(m.blocked, m.blocked.T)


def test_mask_rejects_negative_lengths():
    with pytest.raises(ValueError):
        build_structural_mask(1, -1, 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(0, 9)] * 4))
def test_mask_depends_only_on_lengths(lengths):
    a, b = build_structural_mask(*lengths), build_structural_mask(*lengths)
    assert np.array_equal(a.blocked, b.blocked)
    bias = a.bias(np.float32)
    assert set(np.unique(bias)) <= {0.0, np.float32(-1e9)}
    assert np.array_equal(bias, bias.T)


# --------------------------------------------------------------- attention


def _streams(cfg, rng, L=(2, 3, 2, 2), batch=1, dtype=np.float64):
    return TokenStreams(*(Tensor(rng.standard_normal((batch, n, cfg.d_model)).astype(dtype)) for n in L))


def test_ref_output_invariant_to_style_values_and_vice_versa():
    rng = np.random.default_rng(1)
    params = BranchParams.init(SMALL, seed=0, dtype=np.float64)
    randomize_adapters(params, rng)
    s = _streams(SMALL, rng)
    mask = build_structural_mask(*s.lengths())
    base = joint_attention(s, params, mask, BRANCHES)
    poked_style = joint_attention(s.replace(style=Tensor(rng.standard_normal(s.style.shape) * 10)),
                                  params, mask, BRANCHES)
    poked_ref = joint_attention(s.replace(ref=Tensor(rng.standard_normal(s.ref.shape) * 10)),
                                params, mask, BRANCHES)
    assert np.array_equal(base.ref.data, poked_style.ref.data)
    assert np.array_equal(base.style.data, poked_ref.style.data)
    # without the mask the isolation is gone
    open_a = joint_attention(s, params, None, BRANCHES)
    open_b = joint_attention(s.replace(style=poked_style.style), params, None, BRANCHES)
    assert not np.array_equal(open_a.ref.data, open_b.ref.data)


def test_joint_attention_single_head_hand_case():
    cfg = ModelConfig(d_model=4, n_heads=1, n_layers=1, lora_rank=1, patch_size=2, image_hw=2, ref_window=1)
    params = BranchParams.init(cfg, seed=0, dtype=np.float64)
    for name in ("wq", "wk", "wv", "wo"):
        params.base[f"blocks.0.{name}"].data = np.eye(4)
    x = np.array([[[1.0, 0, 0, 0], [0, 2.0, 0, 0]]])
    out = joint_attention(TokenStreams(t=Tensor(x)), params, None).t.data[0]
    logits = x[0] @ x[0].T / 2.0
    for i in range(2):
        w = np.exp(logits[i]) / np.exp(logits[i]).sum()
        assert np.allclose(out[i], w @ x[0], atol=1e-12)


def test_joint_attention_checks_widths_and_branches():
    params = BranchParams.init(SMALL, seed=0)
    bad = TokenStreams(t=Tensor(np.zeros((1, 2, 5), dtype=np.float32)))
    with pytest.raises(DimensionError):
        joint_attention(bad, params, None)
    good = TokenStreams(t=Tensor(np.zeros((1, 2, 16), dtype=np.float32)))
    with pytest.raises(ValueError):
        joint_attention(good, params, None, {"nope"})


# ------------------------------------------------------------------ blocks


def test_block_passes_streams_through_when_residuals_are_zero():
    rng = np.random.default_rng(2)
    params = BranchParams.init(SMALL, seed=0, dtype=np.float64)
    s = _streams(SMALL, rng)
    temb = Tensor(rng.standard_normal((1, SMALL.d_model)))
    # mod weights start at zero, so every gate is zero
    out = forward_block(s, params, build_structural_mask(*s.lengths()), temb, BRANCHES)
    for name, x in s.segments():
        assert np.array_equal(getattr(out, name).data, x.data)
        assert getattr(out, name).shape == x.shape


def _nonzero_model(seed=0, cfg=SMALL):
    rng = np.random.default_rng(seed)
    params = BranchParams.init(cfg, seed=seed, dtype=np.float64)
    for k, t in params.base.items():
        if "mod" in k or k.startswith("final"):
            t.data = rng.standard_normal(t.shape) * 0.3
    randomize_adapters(params, rng)
    return params


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    params = _nonzero_model(3, TINY)
    s = _streams(TINY, rng)
    temb = Tensor(rng.standard_normal((1, TINY.d_model)))
    cond = Tensor(rng.standard_normal((1, TINY.d_model)))
    mask = build_structural_mask(*s.lengths())
    w = {n: rng.standard_normal(x.shape) for n, x in s.segments()}
    trainable = params.set_trainable(BRANCHES)

    def loss():
        out = forward_block(s, params, mask, temb, BRANCHES, 0, cond)
        return ad.add(ad.add(ad.sum(ad.mul(out.t, w["t"])), ad.sum(ad.mul(out.ref, w["ref"]))),
                      ad.sum(ad.mul(out.style, w["style"])))

    block0 = [t for t in trainable if ".0." in t.name]
    assert ad.check_gradients(loss, block0) < 1e-4


def test_end_to_end_two_layer_gradient_check():
    rng = np.random.default_rng(4)
    params = _nonzero_model(4, TINY)
    Z_t, Z_c, Z_s, Z_r = random_inputs(TINY, rng, batch=1)
    target = rng.standard_normal(Z_t.shape)
    trainable = params.set_trainable(BRANCHES, train_base=True)

    def loss():
        v = model_forward(Z_t, Z_c, Z_s, Z_r, np.array([0.3]), TINY, params, mask="structural")
        return ad.mse(v, target)

    assert ad.check_gradients(loss, trainable) < 1e-4


# ----------------------------------------------------- zero-adapter equivalence


def _np_rms(x, g, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, -1, keepdims=True) + eps) * g


def _np_silu(x):
    return x / (1 + np.exp(-x))


def unified_reference(params, Z_t, Z_c, Z_s, Z_r, t):
    """Independent single-sequence transformer over the concatenated streams."""
    cfg = params.config
    P = {k: v.data.astype(np.float64) for k, v in params.base.items()}
    batch = Z_t.shape[0]

    def patch(z, pos):
        return z.astype(np.float64) @ P["patch.W"] + P["patch.b"] + sincos_2d(pos, cfg.d_model)

    def temb(tv):
        half = cfg.d_model // 2
        freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
        ang = np.asarray(tv, float)[:, None] * 1000.0 * freqs
        f = np.concatenate([np.sin(ang), np.cos(ang)], -1)
        return _np_silu(f @ P["time.W1"] + P["time.b1"]) @ P["time.W2"] + P["time.b2"]

    seq = [P["text.table"][Z_c] + sincos_2d(text_positions(cfg), cfg.d_model),
           patch(Z_t, grid_positions(cfg)), patch(Z_s, grid_positions(cfg)),
           patch(Z_r, ref_positions(cfg, 0, 0))]
    lens = [s.shape[1] for s in seq]
    x = np.concatenate(seq, axis=1)
    e_t, e_0 = temb(np.full(batch, t)), temb(np.zeros(batch))
    # per-token conditioning: text and image get t, the two condition streams t=0
    cond_tok = np.repeat(np.array([0, 0, 1, 1]), lens)
    h, dh = cfg.n_heads, cfg.head_dim
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        m = np.where(cond_tok[None, :, None] == 0,
                     (_np_silu(e_t) @ P[pre + "mod.W"] + P[pre + "mod.b"])[:, None, :],
                     (_np_silu(e_0) @ P[pre + "mod.W"] + P[pre + "mod.b"])[:, None, :])
        sh1, sc1, g1, sh2, sc2, g2 = np.split(m, 6, axis=-1)
        y = _np_rms(x, P[pre + "norm1"]) * (1 + sc1) + sh1
        q, k, v = (y @ P[pre + n] for n in ("wq", "wk", "wv"))
        n = x.shape[1]
        q, k, v = (z.reshape(batch, n, h, dh).transpose(0, 2, 1, 3) for z in (q, k, v))
        a = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        a = np.exp(a - a.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        att = (a @ v).transpose(0, 2, 1, 3).reshape(batch, n, cfg.d_model) @ P[pre + "wo"]
        x = x + g1 * att
        y = _np_rms(x, P[pre + "norm2"]) * (1 + sc2) + sh2
        x = x + g2 * (_np_silu(y @ P[pre + "mlp1"]) @ P[pre + "mlp2"])
    img = x[:, lens[0]:lens[0] + lens[1]]
    sh, sc = np.split(_np_silu(e_t) @ P["final.mod.W"] + P["final.mod.b"], 2, axis=-1)
    y = _np_rms(img, P["final.norm"]) * (1 + sc[:, None]) + sh[:, None]
    return y @ P["final.W"] + P["final.b"]


def test_zero_adapters_equal_unified_attention_f32():
    rng = np.random.default_rng(5)
    params = BranchParams.init(SMALL, seed=5)  # float32, all B zero
    for k, t in params.base.items():
        if "mod" in k or k.startswith("final"):
            t.data = (rng.standard_normal(t.shape) * 0.3).astype(np.float32)
    Z_t, Z_c, Z_s, Z_r = random_inputs(SMALL, rng, dtype=np.float32)
    got = model_forward(Z_t, Z_c, Z_s, Z_r, 0.4, SMALL, params, mask=None).data
    want = unified_reference(params, Z_t, Z_c, Z_s, Z_r, 0.4)
    assert got.dtype == np.float32
    assert np.abs(got - want).max() < 1e-6 * max(1.0, np.abs(want).max())


# ------------------------------------------------------------ model forward


def test_forward_shape_and_determinism():
    rng = np.random.default_rng(6)
    params = _nonzero_model(6)
    Z_t, Z_c, Z_s, Z_r = random_inputs(SMALL, rng)
    a = model_forward(Z_t, Z_c, Z_s, Z_r, [0.1, 0.9], SMALL, params).data
    b = model_forward(Z_t, Z_c, Z_s, Z_r, [0.1, 0.9], SMALL, params).data
    assert a.shape == Z_t.shape
    assert a.tobytes() == b.tobytes()


def test_style_stream_conditions_the_image():
    rng = np.random.default_rng(7)
    params = _nonzero_model(7)
    Z_t, Z_c, Z_s, _ = random_inputs(SMALL, rng)
    absent = model_forward(Z_t, Z_c, None, None, 0.5, SMALL, params, mask=None).data
    present = model_forward(Z_t, Z_c, Z_s, None, 0.5, SMALL, params, mask="structural").data
    assert not np.allclose(absent, present)


def test_forward_rejects_bad_t_and_config():
    params = BranchParams.init(SMALL)
    Z_t = np.zeros((1, 4, SMALL.d_patch), dtype=np.float32)
    with pytest.raises(ValueError):
        model_forward(Z_t, None, None, None, 1.5, SMALL, params)
    with pytest.raises(ValueError):
        model_forward(Z_t, None, None, None, 0.5, ModelConfig(), params)


def test_shared_base_is_one_object_per_weight():
    params = BranchParams.init(SMALL)
    names = params.branch_names("ref") + params.branch_names("style") + params.branch_names("main")
    assert len(set(names)) == len(names)
    assert all(not k.startswith("lora.") for k in params.base)
    assert all(np.all(params.adapters[k].data == 0) for k in names if k.endswith(".B"))


def test_checkpoint_round_trip_with_meta(tmp_path):
    params = _nonzero_model(8)
    params.save(tmp_path / "p.mckp", {"stage": 3, "segment.L_t": 4})
    back, meta = BranchParams.load(tmp_path / "p.mckp")
    assert back.config == params.config
    assert meta == {"stage": 3.0, "segment.L_t": 4.0}
    for g in ("base",) + BRANCHES:
        assert back.group_hash(g) == params.group_hash(g)


# ----------------------------------------------------------------- patches


def test_patchify_cases():
    img = np.arange(16.0).reshape(4, 4, 1)
    tok = patchify(img, 2)
    assert tok.shape == (4, 4)
    assert np.array_equal(unpatchify(tok, 2, (4, 4), 1), img)
    const = patchify(np.full((8, 8, 3), 7.0), 4)
    assert np.all(const == const[0])
    rng = np.random.default_rng(9)
    x = rng.standard_normal((16, 16, 3))
    assert unpatchify(patchify(x, 4), 4, (16, 16)).tobytes() == x.tobytes()
    with pytest.raises(ValueError):
        patchify(np.zeros((5, 4, 3)), 2)


@settings(max_examples=25, deadline=None)
@given(p=st.sampled_from([1, 2, 4]), g=st.integers(1, 4), c=st.integers(1, 3), seed=st.integers(0, 999))
def test_patchify_round_trip_property(p, g, c, seed):
    x = np.random.default_rng(seed).integers(0, 255, (p * g, p * g, c))
    assert np.array_equal(unpatchify(patchify(x, p), p, (p * g, p * g), c), x)


# -------------------------------------------------------------- positions


def test_reference_positions_never_collide_with_image():
    cfg = ModelConfig()
    img = {tuple(p) for p in grid_positions(cfg)}
    for r in range(cfg.grid):
        for c in range(cfg.grid):
            assert not img & {tuple(p) for p in ref_positions(cfg, r, c)}


def test_tokenize_pads_and_maps_unknown():
    ids = tokenize("a photo of zebra", SMALL)
    assert ids.shape == (3,)
    ids8 = tokenize("a zebra", ModelConfig())
    assert ids8[1] == 15 and ids8[2:].tolist() == [0] * 6


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(image_hw=30, patch_size=8)
    with pytest.raises(ValueError):
        ModelConfig(lora_rank=0)


def test_timestep_embedding_depends_on_t():
    params = BranchParams.init(SMALL, seed=1)
    a = timestep_embedding(np.array([0.0]), params).data
    b = timestep_embedding(np.array([1.0]), params).data
    assert a.shape == (1, SMALL.d_model) and not np.allclose(a, b)


def test_embed_streams_lengths():
    rng = np.random.default_rng(10)
    params = BranchParams.init(SMALL)
    Z_t, Z_c, Z_s, Z_r = random_inputs(SMALL, rng, dtype=np.float32)
    s = embed_streams(Z_t, Z_c, Z_s, Z_r, params)
    assert s.lengths() == (3, 4, 4, 4)
