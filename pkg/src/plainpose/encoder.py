"""Plain ViT backbone: patch embedding, position embedding, pre-norm blocks.

Attention runs in one of four flavours per layer: full, windowed, windowed
with a cyclic half-window shift, and windowed with mean-pooled per-window
tokens appended to every window's keys/values. Interleaved mode puts full
attention on every ``depth // 4``-th layer and plain windows elsewhere.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .config import AttentionMode, EncoderConfig
from .core import ops
from .core.params import ParamStore
from .core.tensor import Tensor, concat, pad, roll

_MASKED = -1e9


@dataclass
class TokenMap:
    tokens: Tensor  # N x (extra + gh*gw) x C
    grid_hw: tuple[int, int]
    extra_count: int = 0

    def __post_init__(self):
        gh, gw = self.grid_hw
        if self.tokens.shape[1] != gh * gw + self.extra_count:
            raise ValueError(
                f"token count {self.tokens.shape[1]} != grid {gh}x{gw} + {self.extra_count} extra"
            )

    def with_tokens(self, tokens: Tensor) -> TokenMap:
        return TokenMap(tokens, self.grid_hw, self.extra_count)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


def init_encoder_params(
    cfg: EncoderConfig, rng: np.random.Generator, store: ParamStore | None = None, dtype=np.float32
) -> ParamStore:
    store = ParamStore() if store is None else store
    c, p, hid = cfg.embed_dim, cfg.patch_size, cfg.hidden_dim
    gh, gw = cfg.grid_hw()
    fan_in = p * p * 3
    store.add("patch_embed.weight", _xavier(rng, fan_in, c, (p, p, 3, c)).astype(dtype), "embed")
    store.add("patch_embed.bias", np.zeros(c, dtype), "embed")
    store.add("pos_embed", (0.02 * rng.standard_normal((gh * gw, c))).astype(dtype), "embed")
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        store.add(b + "norm1.weight", np.ones(c, dtype), "norm")
        store.add(b + "norm1.bias", np.zeros(c, dtype), "norm")
        store.add(b + "attn.qkv.weight", _xavier(rng, c, 3 * c).astype(dtype), "mhsa")
        if cfg.qkv_bias:
            store.add(b + "attn.qkv.bias", np.zeros(3 * c, dtype), "mhsa")
        store.add(b + "attn.proj.weight", _xavier(rng, c, c).astype(dtype), "mhsa")
        store.add(b + "attn.proj.bias", np.zeros(c, dtype), "mhsa")
        store.add(b + "norm2.weight", np.ones(c, dtype), "norm")
        store.add(b + "norm2.bias", np.zeros(c, dtype), "norm")
        store.add(b + "mlp.fc1.weight", _xavier(rng, c, hid).astype(dtype), "ffn")
        store.add(b + "mlp.fc1.bias", np.zeros(hid, dtype), "ffn")
        store.add(b + "mlp.fc2.weight", _xavier(rng, hid, c).astype(dtype), "ffn")
        store.add(b + "mlp.fc2.bias", np.zeros(c, dtype), "ffn")
    store.add("norm.weight", np.ones(c, dtype), "norm")
    store.add("norm.bias", np.zeros(c, dtype), "norm")
    return store


# --------------------------------------------------------------------------
# embedding
# --------------------------------------------------------------------------


def patch_embed(image: Tensor, cfg: EncoderConfig, params: ParamStore) -> TokenMap:
    """N x H x W x 3 image -> token grid of stride ``cfg.patch_stride``.

    Inputs not divisible by the stride are zero-padded bottom/right. With a
    stride below the patch size the patches overlap and the image is padded
    symmetrically by half the overlap, so the grid stays H/d x W/d.
    """
    if image.ndim != 4 or image.shape[-1] != 3:
        raise ValueError(f"patch_embed expects N x H x W x 3, got {image.shape}")
    h, w = image.shape[1:3]
    hp, wp = cfg.padded_hw((h, w))
    if (hp, wp) != (h, w):
        image = pad(image, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    out = ops.conv2d(
        image,
        params["patch_embed.weight"],
        params["patch_embed.bias"],
        stride=cfg.patch_stride,
        pad=cfg.patch_pad,
    )
    n, gh, gw, c = out.shape
    return TokenMap(out.reshape(n, gh * gw, c), (gh, gw))


def interpolate_pos_embed(pos: Tensor, from_grid: tuple[int, int], to_grid: tuple[int, int]) -> Tensor:
    """Bilinearly resize a (gh*gw) x C embedding between grids (identity if equal)."""
    if tuple(from_grid) == tuple(to_grid):
        return pos
    c = pos.shape[-1]
    grid = pos.reshape(1, from_grid[0], from_grid[1], c)
    out = ops.bilinear_resize(grid, size=tuple(to_grid))
    return out.reshape(to_grid[0] * to_grid[1], c)


def add_pos_embed(tm: TokenMap, pos: Tensor, pos_grid: tuple[int, int] | None = None) -> TokenMap:
    """Add position embeddings to the grid tokens only; extra tokens pass through."""
    pos_grid = pos_grid or tm.grid_hw
    pos = interpolate_pos_embed(pos, pos_grid, tm.grid_hw)
    if tm.extra_count:
        raise ValueError("add position embeddings before prepending extra tokens")
    return tm.with_tokens(tm.tokens + pos)


def prepend_tokens(tm: TokenMap, extra: Tensor) -> TokenMap:
    """Prepend ``extra`` (k x C, shared across the batch) in front of the grid tokens."""
    n = tm.tokens.shape[0]
    k, c = extra.shape
    tiled = extra.reshape(1, k, c) + Tensor(np.zeros((n, 1, 1), dtype=tm.tokens.dtype))
    return TokenMap(concat([tiled, tm.tokens], axis=1), tm.grid_hw, tm.extra_count + k)


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------


def _heads(x: Tensor, n: int, t: int, heads: int, hd: int) -> Tensor:
    # N x T x 3C -> 3 x N x heads x T x hd
    return x.reshape(n, t, 3, heads, hd).transpose(2, 0, 3, 1, 4)


def _attend(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ops.matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * scale
    if bias is not None:
        scores = scores + Tensor(bias.astype(scores.dtype))
    return ops.matmul(ops.softmax(scores, axis=-1), v)


def effective_window(cfg: EncoderConfig, grid_hw: tuple[int, int], warn: bool = True) -> tuple[int, int]:
    wh = min(cfg.window_hw[0], grid_hw[0])
    ww = min(cfg.window_hw[1], grid_hw[1])
    if warn and (wh, ww) != tuple(cfg.window_hw):
        warnings.warn(f"window {cfg.window_hw} larger than grid {grid_hw}; clamped to {(wh, ww)}", stacklevel=3)
    return wh, ww


def shift_sizes(window: tuple[int, int], grid_hw: tuple[int, int], shift: bool) -> tuple[int, int]:
    """Half-window cyclic shift per axis; zero on an axis the window already covers."""
    if not shift:
        return 0, 0
    return tuple(w // 2 if w < g else 0 for w, g in zip(window, grid_hw))


@dataclass
class WindowLayout:
    """Geometry of one windowed-attention call.

    ``valid`` marks real (non-padding) tokens of the padded, shifted grid.
    ``region`` labels each padded position by which side of the cyclic wrap
    it came from; tokens only attend within their own label.
    """

    grid_hw: tuple[int, int]
    window: tuple[int, int]
    shift: tuple[int, int]
    padded_hw: tuple[int, int]
    valid: np.ndarray  # Hp x Wp bool, in shifted coordinates
    region: np.ndarray  # Hp x Wp int

    @property
    def counts(self) -> tuple[int, int]:
        return self.padded_hw[0] // self.window[0], self.padded_hw[1] // self.window[1]

    @property
    def num_windows(self) -> int:
        a, b = self.counts
        return a * b

    def partition_np(self, arr: np.ndarray) -> np.ndarray:
        """Hp x Wp [x ...] -> nW x (wh*ww) [x ...]."""
        (nh, nw), (wh, ww) = self.counts, self.window
        rest = arr.shape[2:]
        out = arr.reshape(nh, wh, nw, ww, *rest).transpose(0, 2, 1, 3, *range(4, 4 + len(rest)))
        return out.reshape(nh * nw, wh * ww, *rest)


def window_layout(grid_hw, window, shift: bool) -> WindowLayout:
    gh, gw = grid_hw
    wh, ww = window
    hp, wp = -(-gh // wh) * wh, -(-gw // ww) * ww
    sh, sw = shift_sizes((wh, ww), (gh, gw), shift)
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:gh, :gw] = True
    valid = np.roll(valid, (-sh, -sw), axis=(0, 1))
    region = np.zeros((hp, wp), dtype=np.int64)
    if sh or sw:
        label = 0
        hs = (slice(0, hp - wh), slice(hp - wh, hp - sh), slice(hp - sh, hp)) if sh else (slice(None),)
        ws = (slice(0, wp - ww), slice(wp - ww, wp - sw), slice(wp - sw, wp)) if sw else (slice(None),)
        for a in hs:
            for b in ws:
                region[a, b] = label
                label += 1
    return WindowLayout((gh, gw), (wh, ww), (sh, sw), (hp, wp), valid, region)


def window_partition(x: Tensor, layout: WindowLayout) -> Tensor:
    """N x gh x gw x C grid -> N x nW x (wh*ww) x C windows (pad, shift, split)."""
    n, gh, gw, c = x.shape
    hp, wp = layout.padded_hw
    if (hp, wp) != (gh, gw):
        x = pad(x, ((0, 0), (0, hp - gh), (0, wp - gw), (0, 0)))
    sh, sw = layout.shift
    if sh or sw:
        x = roll(x, (-sh, -sw), (1, 2))
    (nh, nw), (wh, ww) = layout.counts, layout.window
    x = x.reshape(n, nh, wh, nw, ww, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, nh * nw, wh * ww, c)


def window_unpartition(x: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`window_partition`: windows -> N x gh x gw x C."""
    n, _, _, c = x.shape
    (nh, nw), (wh, ww) = layout.counts, layout.window
    x = x.reshape(n, nh, nw, wh, ww, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(n, nh * wh, nw * ww, c)
    sh, sw = layout.shift
    if sh or sw:
        x = roll(x, (sh, sw), (1, 2))
    gh, gw = layout.grid_hw
    if (nh * wh, nw * ww) != (gh, gw):
        x = x[:, :gh, :gw]
    return x


def window_mask(layout: WindowLayout) -> np.ndarray:
    """nW x w2 x w2 additive bias: blocks cross-region pairs and padded keys."""
    region = layout.partition_np(layout.region)
    valid = layout.partition_np(layout.valid)
    allowed = (region[:, :, None] == region[:, None, :]) & valid[:, None, :]
    return np.where(allowed, 0.0, _MASKED)


def pooled_window_kv(kv: Tensor, layout: WindowLayout) -> tuple[Tensor, np.ndarray]:
    """Mean of each window's real tokens.

    ``kv`` is N x nW x heads x w2 x hd; returns N x heads x nW x hd pooled
    tokens plus an nW bias row that masks windows holding no real token.
    """
    valid = layout.partition_np(layout.valid).astype(kv.dtype)  # nW x w2
    counts = valid.sum(axis=1)
    weights = valid / np.maximum(counts, 1.0)[:, None]
    w = Tensor(weights[None, :, None, :, None])
    pooled = (kv * w).sum(axis=3)  # N x nW x heads x hd
    bias = np.where(counts > 0, 0.0, _MASKED)
    return pooled.transpose(0, 2, 1, 3), bias


def _full_attention(qkv: Tensor, cfg: EncoderConfig, extra: int, ignore_extra: bool) -> Tensor:
    n, t, _ = qkv.shape
    q, k, v = (p for p in _split3(_heads(qkv, n, t, cfg.num_heads, cfg.head_dim)))
    bias = None
    if ignore_extra and extra:
        bias = np.zeros((1, 1, t, t))
        bias[..., extra:, :extra] = _MASKED
    out = _attend(q, k, v, bias)  # N x heads x T x hd
    return out.transpose(0, 2, 1, 3).reshape(n, t, cfg.embed_dim)


def _split3(x: Tensor):
    return x[0], x[1], x[2]


def _window_attention(qkv: Tensor, tm: TokenMap, cfg: EncoderConfig, mode: AttentionMode) -> Tensor:
    n = qkv.shape[0]
    gh, gw = tm.grid_hw
    heads, hd, c = cfg.num_heads, cfg.head_dim, cfg.embed_dim
    layout = window_layout(tm.grid_hw, effective_window(cfg, tm.grid_hw), mode.shift)
    wins = window_partition(qkv.reshape(n, gh, gw, 3 * c), layout)  # N x nW x w2 x 3C
    n_win, w2 = wins.shape[1], wins.shape[2]
    parts = wins.reshape(n, n_win, w2, 3, heads, hd).transpose(3, 0, 1, 4, 2, 5)
    q, k, v = _split3(parts)  # N x nW x heads x w2 x hd
    bias = window_mask(layout)[:, None]  # nW x 1 x w2 x w2
    if mode.pool:
        pk, pool_bias = pooled_window_kv(k, layout)
        pv, _ = pooled_window_kv(v, layout)
        zeros = Tensor(np.zeros((1, n_win, 1, 1, 1), dtype=qkv.dtype))
        k = concat([k, pk.reshape(n, 1, heads, n_win, hd) + zeros], axis=3)
        v = concat([v, pv.reshape(n, 1, heads, n_win, hd) + zeros], axis=3)
        extra_bias = np.broadcast_to(pool_bias[None, None, None, :], (n_win, 1, w2, n_win))
        bias = np.concatenate([bias, extra_bias], axis=-1)
    out = _attend(q, k, v, bias)  # N x nW x heads x w2 x hd
    out = out.transpose(0, 1, 3, 2, 4).reshape(n, n_win, w2, c)
    return window_unpartition(out, layout).reshape(n, gh * gw, c)


def mhsa(
    tm: TokenMap,
    params: ParamStore,
    cfg: EncoderConfig,
    layer_idx: int,
    ignore_extra: bool = False,
) -> TokenMap:
    """Attention branch of block ``layer_idx`` applied to already-normalised tokens.

    ``ignore_extra`` stops grid tokens from attending to extra (knowledge)
    tokens, which makes the grid output independent of them.
    """
    pre = f"blocks.{layer_idx}.attn."
    bias = params[pre + "qkv.bias"] if pre + "qkv.bias" in params else None
    qkv = ops.linear(tm.tokens, params[pre + "qkv.weight"], bias)
    mode = cfg.layer_attention(layer_idx)
    if mode is AttentionMode.FULL:
        out = _full_attention(qkv, cfg, tm.extra_count, ignore_extra)
    else:
        if tm.extra_count:
            raise ValueError("extra tokens are only supported on full-attention layers")
        out = _window_attention(qkv, tm, cfg, mode)
    out = ops.linear(out, params[pre + "proj.weight"], params[pre + "proj.bias"])
    return tm.with_tokens(out)


def ffn(x: Tensor, params: ParamStore, layer_idx: int) -> Tensor:
    pre = f"blocks.{layer_idx}.mlp."
    h = ops.gelu(ops.linear(x, params[pre + "fc1.weight"], params[pre + "fc1.bias"]))
    return ops.linear(h, params[pre + "fc2.weight"], params[pre + "fc2.bias"])


def drop_path_rate(cfg: EncoderConfig, layer_idx: int) -> float:
    """Linearly increasing with depth, reaching ``cfg.drop_path_rate`` at the last block."""
    if cfg.depth == 1:
        return cfg.drop_path_rate
    return cfg.drop_path_rate * layer_idx / (cfg.depth - 1)


def transformer_block(
    tm: TokenMap,
    params: ParamStore,
    cfg: EncoderConfig,
    layer_idx: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
    ignore_extra: bool = False,
) -> TokenMap:
    b = f"blocks.{layer_idx}."
    rate = drop_path_rate(cfg, layer_idx)
    x = tm.tokens
    h = ops.layer_norm(x, params[b + "norm1.weight"], params[b + "norm1.bias"])
    attn = mhsa(tm.with_tokens(h), params, cfg, layer_idx, ignore_extra).tokens
    x = x + ops.drop_path(attn, rate, rng, train)
    h = ops.layer_norm(x, params[b + "norm2.weight"], params[b + "norm2.bias"])
    x = x + ops.drop_path(ffn(h, params, layer_idx), rate, rng, train)
    return tm.with_tokens(x)


def encode(
    image: Tensor,
    cfg: EncoderConfig,
    params: ParamStore,
    extra_tokens: Tensor | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    ignore_extra: bool = False,
    mask: np.ndarray | None = None,
    mask_token: Tensor | None = None,
) -> Tensor:
    """Image -> N x gh x gw x C feature map.

    ``mask`` (N x gh*gw bool) swaps the selected patch tokens for
    ``mask_token`` before position embedding, for masked-image pre-training.
    """
    tm = patch_embed(image, cfg, params)
    if mask is not None:
        keep = Tensor((~mask)[..., None].astype(tm.tokens.dtype))
        swap = Tensor(mask[..., None].astype(tm.tokens.dtype))
        tm = tm.with_tokens(tm.tokens * keep + swap * mask_token)
    tm = add_pos_embed(tm, params["pos_embed"], cfg.grid_hw())
    if extra_tokens is not None:
        tm = prepend_tokens(tm, extra_tokens)
    if train and rng is None:
        rng = np.random.default_rng()
    for i in range(cfg.depth):
        tm = transformer_block(tm, params, cfg, i, train, rng, ignore_extra)
    x = ops.layer_norm(tm.tokens, params["norm.weight"], params["norm.bias"])
    if tm.extra_count:
        x = x[:, tm.extra_count :]
    n = x.shape[0]
    gh, gw = tm.grid_hw
    return x.reshape(n, gh, gw, cfg.embed_dim)
