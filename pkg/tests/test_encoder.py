import warnings

import numpy as np
import pytest

from plainpose.config import AttentionMode, EncoderConfig
from plainpose.core import Tensor, bilinear_resize, finite_difference_check, layer_norm
from plainpose.core.params import ParamStore
from plainpose.encoder import (
    TokenMap,
    add_pos_embed,
    encode,
    init_encoder_params,
    interpolate_pos_embed,
    mhsa,
    patch_embed,
    pooled_window_kv,
    transformer_block,
    window_layout,
    window_partition,
    window_unpartition,
)


def small_cfg(**kw):
    base = dict(depth=1, embed_dim=8, num_heads=2, input_hw=(32, 32))
    base.update(kw)
    return EncoderConfig(**base)


def f64_params(cfg, seed=0):
    return init_encoder_params(cfg, np.random.default_rng(seed), dtype=np.float64)


def randomize_biases(params, seed=1):
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if name.endswith("bias") or "norm" in name:
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)


# -- configuration ----------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, num_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(drop_path_rate=1.0)


def test_interleaved_layers():
    cfg = EncoderConfig(depth=12, attention="interleaved")
    full = [i + 1 for i in range(12) if cfg.layer_attention(i) is AttentionMode.FULL]
    assert full == [3, 6, 9, 12]


# -- patch embedding --------------------------------------------------------


@pytest.mark.parametrize(
    "stride,grid", [(16, (16, 12)), (8, (32, 24))]
)
def test_patch_embed_grid(stride, grid):
    cfg = small_cfg(input_hw=(256, 192), patch_stride=stride, embed_dim=4, num_heads=1)
    params = f64_params(cfg)
    tm = patch_embed(Tensor(np.zeros((1, 256, 192, 3))), cfg, params)
    assert tm.grid_hw == grid
    assert tm.tokens.shape == (1, grid[0] * grid[1], 4)
    np.testing.assert_array_equal(tm.tokens.data, 0.0)


def test_patch_embed_rejects_non_rgb():
    cfg = small_cfg()
    with pytest.raises(ValueError):
        patch_embed(Tensor(np.zeros((1, 32, 32, 1))), cfg, f64_params(cfg))


def test_patch_embed_pads_non_divisible():
    cfg = small_cfg(input_hw=(30, 20))
    tm = patch_embed(Tensor(np.ones((1, 30, 20, 3))), cfg, f64_params(cfg))
    assert tm.grid_hw == (2, 2)


# -- position embeddings ----------------------------------------------------


def test_add_pos_embed_cases():
    rng = np.random.default_rng(0)
    tokens = Tensor(rng.standard_normal((2, 4, 8)))
    tm = TokenMap(tokens, (2, 2))
    assert np.array_equal(add_pos_embed(tm, Tensor(np.zeros((4, 8)))).tokens.data, tokens.data)
    neg = Tensor(-tokens.data[0])
    out = add_pos_embed(TokenMap(Tensor(tokens.data[:1]), (2, 2)), neg).tokens.data
    np.testing.assert_array_equal(out, 0.0)


def test_pos_embed_gradient():
    rng = np.random.default_rng(1)
    pos = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    tokens = Tensor(rng.standard_normal((2, 6, 3)))
    w = Tensor(rng.standard_normal((2, 6, 3)))
    f = lambda: (add_pos_embed(TokenMap(tokens, (2, 3)), pos).tokens * w).sum()
    assert finite_difference_check(f, [pos]) < 1e-6


def test_interpolate_pos_embed():
    rng = np.random.default_rng(2)
    pos = Tensor(rng.standard_normal((4, 3)))
    assert interpolate_pos_embed(pos, (2, 2), (2, 2)) is pos
    const = interpolate_pos_embed(Tensor(np.full((6, 3), 0.7)), (2, 3), (5, 7))
    np.testing.assert_allclose(const.data, 0.7)
    up = interpolate_pos_embed(pos, (2, 2), (4, 4)).data.reshape(4, 4, 3)
    # hand evaluation of the half-pixel rule: 4 outputs from 2 inputs use weights
    # (1,0), (.75,.25), (.25,.75), (0,1)
    wts = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    grid = pos.data.reshape(2, 2, 3)
    expected = np.einsum("ah,bw,hwc->abc", wts, wts, grid)
    np.testing.assert_allclose(up, expected, atol=1e-12)
    np.testing.assert_allclose(up, bilinear_resize(Tensor(grid[None]), 2).data[0], atol=1e-12)


# -- attention --------------------------------------------------------------


def test_uniform_attention_limit():
    cfg = small_cfg(embed_dim=4, num_heads=1)
    params = f64_params(cfg)
    c = 4
    params["blocks.0.attn.qkv.weight"].data = np.concatenate([np.zeros((c, 2 * c)), np.eye(c)], axis=1)
    params["blocks.0.attn.qkv.bias"].data = np.zeros(3 * c)
    params["blocks.0.attn.proj.weight"].data = np.eye(c)
    params["blocks.0.attn.proj.bias"].data = np.zeros(c)
    x = np.random.default_rng(3).standard_normal((1, 4, c))
    out = mhsa(TokenMap(Tensor(x), (2, 2)), params, cfg, 0).tokens.data
    np.testing.assert_allclose(out, np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape), atol=1e-12)


def _attn_out(mode, grid, window, x, seed=0, c=8):
    cfg = small_cfg(embed_dim=c, num_heads=2, attention=mode, window_hw=window)
    params = f64_params(cfg, seed)
    randomize_biases(params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return mhsa(TokenMap(Tensor(x), grid), params, cfg, 0).tokens.data


@pytest.mark.parametrize("mode", ["window", "window_shift"])
@pytest.mark.parametrize("window", [(4, 3), (6, 5)])
def test_window_covering_grid_equals_full(mode, window):
    x = np.random.default_rng(4).standard_normal((2, 12, 8))
    full = _attn_out("full", (4, 3), window, x)
    win = _attn_out(mode, (4, 3), window, x)
    assert np.abs(full - win).max() < 1e-6


def test_window_clamp_warns():
    cfg = small_cfg(attention="window", window_hw=(9, 9))
    params = f64_params(cfg)
    with pytest.warns(UserWarning, match="clamped"):
        mhsa(TokenMap(Tensor(np.zeros((1, 4, 8))), (2, 2)), params, cfg, 0)


def _perturbed_pair(mode, token_rc, grid=(32, 24), window=(8, 8)):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, grid[0] * grid[1], 8))
    y = x.copy()
    r, c = token_rc
    y[0, r * grid[1] + c] += 3.0
    a = _attn_out(mode, grid, window, x).reshape(grid[0], grid[1], 8)
    b = _attn_out(mode, grid, window, y).reshape(grid[0], grid[1], 8)
    return a, b


def test_plain_window_is_local():
    # perturb a token in window (row 1, col 0); outputs of window (0, 0) stay put
    a, b = _perturbed_pair("window", (9, 2))
    np.testing.assert_array_equal(a[:8, :8], b[:8, :8])
    assert np.abs(a[8:16, :8] - b[8:16, :8]).max() > 1e-6


@pytest.mark.parametrize("mode", ["window_shift", "window_pool"])
def test_shift_and_pool_break_locality(mode):
    a, b = _perturbed_pair(mode, (9, 2))
    assert np.abs(a[:8, :8] - b[:8, :8]).max() > 1e-9


def test_partition_roundtrip_and_counting():
    grid = np.arange(16.0).reshape(1, 4, 4, 1)
    layout = window_layout((4, 4), (2, 2), shift=False)
    wins = window_partition(Tensor(grid), layout)
    assert wins.shape == (1, 4, 4, 1)
    assert sorted(wins.data.reshape(-1).tolist()) == list(range(16))
    np.testing.assert_array_equal(window_unpartition(wins, layout).data, grid)
    shifted = window_layout((4, 4), (2, 2), shift=True)
    assert shifted.shift == (1, 1)
    np.testing.assert_array_equal(window_unpartition(window_partition(Tensor(grid), shifted), shifted).data, grid)
    # padded, shifted, non-divisible grid still roundtrips exactly
    g2 = np.random.default_rng(0).standard_normal((2, 5, 7, 3))
    lay = window_layout((5, 7), (2, 3), shift=True)
    np.testing.assert_array_equal(window_unpartition(window_partition(Tensor(g2), lay), lay).data, g2)


def test_zero_shift_is_plain_partition():
    grid = np.random.default_rng(1).standard_normal((1, 4, 4, 2))
    plain = window_layout((4, 4), (4, 4), shift=False)
    shift = window_layout((4, 4), (4, 4), shift=True)
    assert shift.shift == (0, 0)
    np.testing.assert_array_equal(
        window_partition(Tensor(grid), plain).data, window_partition(Tensor(grid), shift).data
    )


def test_window_order_permutation():
    rng = np.random.default_rng(2)
    grid = rng.standard_normal((1, 6, 6, 2))
    layout = window_layout((6, 6), (3, 2), shift=False)
    wins = window_partition(Tensor(grid), layout).data
    per_window = lambda w: w - w.mean(axis=2, keepdims=True)
    perm = rng.permutation(wins.shape[1])
    inv = np.argsort(perm)
    direct = window_unpartition(Tensor(per_window(wins)), layout).data
    permuted = window_unpartition(Tensor(per_window(wins[:, perm])[:, inv]), layout).data
    np.testing.assert_array_equal(direct, permuted)


def test_pooled_tokens():
    layout = window_layout((2, 4), (2, 2), shift=False)
    same = np.tile(np.arange(4.0).reshape(1, 1, 1, 4, 1), (1, 2, 1, 1, 3))  # N x nW x heads x w2 x hd
    pooled, bias = pooled_window_kv(Tensor(same), layout)
    np.testing.assert_array_equal(pooled.data[:, :, 0], pooled.data[:, :, 1])
    np.testing.assert_array_equal(bias, 0.0)
    one = window_layout((2, 2), (2, 2), shift=False)
    x = np.random.default_rng(0).standard_normal((1, 1, 2, 4, 3))
    p1, _ = pooled_window_kv(Tensor(x), one)
    np.testing.assert_allclose(p1.data[:, :, 0], x.mean(axis=3)[:, 0])


# -- blocks and full encoder ------------------------------------------------


def test_zeroed_branches_give_identity():
    cfg = small_cfg()
    params = f64_params(cfg)
    params["blocks.0.attn.proj.weight"].data[:] = 0
    params["blocks.0.attn.proj.bias"].data[:] = 0
    params["blocks.0.mlp.fc2.weight"].data[:] = 0
    params["blocks.0.mlp.fc2.bias"].data[:] = 0
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 8)))
    out = transformer_block(TokenMap(x, (2, 2)), params, cfg, 0)
    np.testing.assert_array_equal(out.tokens.data, x.data)


def test_drop_path_zero_train_equals_eval():
    cfg = small_cfg(drop_path_rate=0.0, depth=2)
    params = f64_params(cfg)
    img = Tensor(np.random.default_rng(0).standard_normal((2, 32, 32, 3)))
    a = encode(img, cfg, params, train=True, rng=np.random.default_rng(1)).data
    b = encode(img, cfg, params, train=False).data
    np.testing.assert_array_equal(a, b)


def test_drop_path_active_in_train_only():
    cfg = small_cfg(drop_path_rate=0.5, depth=2)
    params = f64_params(cfg)
    img = Tensor(np.random.default_rng(0).standard_normal((8, 32, 32, 3)))
    a = encode(img, cfg, params, train=True, rng=np.random.default_rng(1)).data
    b = encode(img, cfg, params, train=False).data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("mode", ["full", "window_shift_pool"])
def test_block_gradcheck(mode):
    cfg = small_cfg(attention=mode, window_hw=(1, 2))
    params = f64_params(cfg)
    randomize_biases(params)
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 4, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 4, 8)))
    names = ["blocks.0.attn.qkv.weight", "blocks.0.attn.proj.weight", "blocks.0.mlp.fc1.weight", "blocks.0.norm1.weight"]
    f = lambda: (transformer_block(TokenMap(x, (2, 2)), params, cfg, 0).tokens * w).sum()
    assert finite_difference_check(f, [x] + [params[n] for n in names]) < 1e-4


def test_shape_preserved_per_block():
    cfg = small_cfg(depth=3, attention="interleaved", window_hw=(1, 1), input_hw=(48, 32))
    params = f64_params(cfg)
    tm = patch_embed(Tensor(np.random.default_rng(0).standard_normal((1, 48, 32, 3))), cfg, params)
    for i in range(cfg.depth):
        nxt = transformer_block(tm, params, cfg, i)
        assert nxt.tokens.shape == tm.tokens.shape
        tm = nxt


def test_encode_toy_shape_and_determinism():
    cfg = small_cfg(depth=2, embed_dim=16, num_heads=2)
    img = np.random.default_rng(0).standard_normal((1, 32, 32, 3))
    outs = [encode(Tensor(img), cfg, f64_params(cfg, seed=7)).data for _ in range(2)]
    assert outs[0].shape == (1, 2, 2, 16)
    assert np.array_equal(outs[0], outs[1])


def test_encode_vit_b_shape():
    cfg = EncoderConfig(depth=12, embed_dim=768, num_heads=12, input_hw=(256, 192))
    params = init_encoder_params(cfg, np.random.default_rng(0))
    out = encode(Tensor(np.zeros((1, 256, 192, 3), np.float32)), cfg, params)
    assert out.shape == (1, 16, 12, 768)


def test_encode_drops_extra_tokens():
    cfg = small_cfg(depth=2)
    params = f64_params(cfg)
    img = Tensor(np.random.default_rng(0).standard_normal((2, 32, 32, 3)))
    tok = Tensor(np.random.default_rng(1).standard_normal((1, 8)))
    with_tok = encode(img, cfg, params, extra_tokens=tok)
    assert with_tok.shape == (2, 2, 2, 8)
    masked = encode(img, cfg, params, extra_tokens=tok, ignore_extra=True).data
    np.testing.assert_allclose(masked, encode(img, cfg, params).data, atol=1e-12)


def test_extra_tokens_rejected_on_window_layers():
    cfg = small_cfg(attention="window", window_hw=(1, 1))
    with pytest.raises(ValueError):
        encode(Tensor(np.zeros((1, 32, 32, 3))), cfg, f64_params(cfg), extra_tokens=Tensor(np.zeros((1, 8))))
