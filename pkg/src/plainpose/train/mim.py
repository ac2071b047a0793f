"""Masked-image-modelling pretext: mask patches, reconstruct their pixels linearly."""

from __future__ import annotations

import math

import numpy as np

from ..config import EncoderConfig
from ..core import ops
from ..core.params import ParamStore
from ..core.tensor import Tensor
from ..encoder import encode


def init_mim_params(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> None:
    c, d = cfg.embed_dim, cfg.patch_stride
    out = d * d * 3
    store.add("mask_token", (0.02 * rng.standard_normal(c)).astype(dtype), "mim")
    bound = math.sqrt(6.0 / (c + out))
    store.add("mim_head.weight", rng.uniform(-bound, bound, (c, out)).astype(dtype), "mim")
    store.add("mim_head.bias", np.zeros(out, dtype), "mim")


def random_patch_mask(rng: np.random.Generator, n_images: int, n_patches: int, ratio: float) -> np.ndarray:
    """Bool mask with exactly ``ceil(ratio * n_patches)`` True entries per row."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    k = math.ceil(ratio * n_patches)
    mask = np.zeros((n_images, n_patches), dtype=bool)
    for i in range(n_images):
        mask[i, rng.permutation(n_patches)[:k]] = True
    return mask


def patchify(images: np.ndarray, cell: int) -> np.ndarray:
    """N x H x W x 3 -> N x (H/cell * W/cell) x (cell*cell*3), row-major cells."""
    n, h, w, c = images.shape
    gh, gw = h // cell, w // cell
    x = images[:, : gh * cell, : gw * cell].reshape(n, gh, cell, gw, cell, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * gw, cell * cell * c)


def mim_pretrain_step(
    images: np.ndarray,
    cfg: EncoderConfig,
    params: ParamStore,
    rng: np.random.Generator,
    mask_ratio: float = 0.75,
    train: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """Reconstruction loss on masked patches only, plus the mask used.

    Targets are the ``stride x stride`` input cells behind each token.
    With nothing masked the loss is 0 by convention.
    """
    x = np.asarray(images, dtype=params["patch_embed.weight"].dtype)
    if x.shape[1] % cfg.patch_stride or x.shape[2] % cfg.patch_stride:
        raise ValueError("MIM needs image sides divisible by the patch stride")
    gh, gw = cfg.grid_hw(x.shape[1:3])
    mask = random_patch_mask(rng, x.shape[0], gh * gw, mask_ratio)
    if not mask.any():
        return Tensor(np.zeros((), x.dtype)), mask
    feats = encode(Tensor(x), cfg, params, train=train, rng=rng, mask=mask, mask_token=params["mask_token"])
    n, c = x.shape[0], cfg.embed_dim
    tokens = feats.reshape(n, gh * gw, c)
    recon = ops.linear(tokens, params["mim_head.weight"], params["mim_head.bias"])
    target = patchify(x, cfg.patch_stride)
    weight = mask[:, :, None].astype(x.dtype)
    # mean over masked entries: scale the all-cell mean by total / masked
    loss = ops.weighted_mse(recon, target, weight) * (mask.size / mask.sum())
    return loss, mask
