"""Heatmap heads on top of the backbone feature map.

Classic head: two (deconv 4/2/1 -> batch norm -> ReLU) blocks then a 1x1
conv. Simple head: ReLU -> bilinear x4 -> 3x3 conv. Both upsample by 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.params import ParamStore
from .core.tensor import Tensor
from .schemas import load_schema, schema_names


class UnknownDatasetError(KeyError):
    pass


@dataclass(frozen=True)
class HeadSpec:
    kind: str  # "classic" | "simple"
    num_keypoints: int


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_head_params(
    store: ParamStore,
    dataset_id: str,
    spec: HeadSpec,
    in_channels: int,
    rng: np.random.Generator,
    deconv_channels: int = 256,
    norm: str = "batch",
    dtype=np.float32,
) -> None:
    pre = f"heads.{dataset_id}."
    nk = spec.num_keypoints
    if spec.kind == "classic":
        cin = in_channels
        for i in (1, 2):
            std = math.sqrt(2.0 / (16 * cin))
            store.add(f"{pre}deconv{i}.weight", (std * rng.standard_normal((4, 4, cin, deconv_channels))).astype(dtype), "head")
            store.add(f"{pre}bn{i}.weight", np.ones(deconv_channels, dtype), "head")
            store.add(f"{pre}bn{i}.bias", np.zeros(deconv_channels, dtype), "head")
            if norm == "batch":
                store.add(f"{pre}bn{i}.running_mean", np.zeros(deconv_channels, dtype), "head", buffer=True)
                store.add(f"{pre}bn{i}.running_var", np.ones(deconv_channels, dtype), "head", buffer=True)
            cin = deconv_channels
        store.add(pre + "final.weight", (0.001 * rng.standard_normal((1, 1, cin, nk))).astype(dtype), "head")
        store.add(pre + "final.bias", np.zeros(nk, dtype), "head")
    elif spec.kind == "simple":
        store.add(pre + "final.weight", _uniform(rng, 9 * in_channels, (3, 3, in_channels, nk)).astype(dtype), "head")
        store.add(pre + "final.bias", np.zeros(nk, dtype), "head")
    else:
        raise ValueError(f"unknown decoder kind {spec.kind!r}")


def _norm(x: Tensor, params: ParamStore, name: str, train: bool) -> Tensor:
    gamma, beta = params[name + ".weight"], params[name + ".bias"]
    if name + ".running_mean" not in params:
        return ops.affine_channel(x, gamma, beta)
    running = ops.RunningStats(params[name + ".running_mean"].data, params[name + ".running_var"].data)
    return ops.batch_norm(x, gamma, beta, running, mode="train" if train else "eval")


def classic_head(f_out: Tensor, params: ParamStore, dataset_id: str, train: bool = False) -> Tensor:
    """N x h x w x C -> N x 4h x 4w x N_k."""
    pre = f"heads.{dataset_id}."
    w1 = params[pre + "deconv1.weight"]
    if f_out.shape[-1] != w1.shape[2]:
        raise ValueError(f"classic head expects {w1.shape[2]} channels, got {f_out.shape[-1]}")
    x = f_out
    for i in (1, 2):
        x = ops.transposed_conv2d(x, params[f"{pre}deconv{i}.weight"], stride=2, pad=1)
        x = ops.relu(_norm(x, params, f"{pre}bn{i}", train))
    return ops.conv2d(x, params[pre + "final.weight"], params[pre + "final.bias"])


def simple_head(f_out: Tensor, params: ParamStore, dataset_id: str, train: bool = False) -> Tensor:
    """ReLU, then bilinear x4, then a 3x3 conv."""
    pre = f"heads.{dataset_id}."
    w = params[pre + "final.weight"]
    if f_out.shape[-1] != w.shape[2]:
        raise ValueError(f"simple head expects {w.shape[2]} channels, got {f_out.shape[-1]}")
    x = ops.bilinear_resize(ops.relu(f_out), scale=4)
    return ops.conv2d(x, w, params[pre + "final.bias"], stride=1, pad=1)


def head_param_count(kind: str, in_channels: int, num_keypoints: int, deconv_channels: int = 256) -> int:
    """Closed-form learnable parameter count of one head (buffers excluded)."""
    if kind == "classic":
        c, d = in_channels, deconv_channels
        return 16 * c * d + 2 * d + 16 * d * d + 2 * d + d * num_keypoints + num_keypoints
    if kind == "simple":
        return 9 * in_channels * num_keypoints + num_keypoints
    raise ValueError(f"unknown decoder kind {kind!r}")


class HeadRegistry:
    """Dataset id -> head spec, all heads sharing one backbone."""

    def __init__(self):
        self._specs: dict[str, HeadSpec] = {}

    def register(self, dataset_id: str, kind: str, num_keypoints: int) -> HeadSpec:
        if dataset_id in self._specs:
            raise ValueError(f"dataset {dataset_id!r} already registered")
        if dataset_id in schema_names():
            expected = load_schema(dataset_id).num_keypoints
            if expected != num_keypoints:
                raise ValueError(f"{dataset_id} schema has {expected} keypoints, head asks for {num_keypoints}")
        spec = HeadSpec(kind, num_keypoints)
        self._specs[dataset_id] = spec
        return spec

    def __contains__(self, dataset_id) -> bool:
        return dataset_id in self._specs

    def __getitem__(self, dataset_id: str) -> HeadSpec:
        try:
            return self._specs[dataset_id]
        except KeyError:
            raise UnknownDatasetError(f"no head registered for dataset {dataset_id!r}") from None

    def __iter__(self):
        return iter(self._specs)

    def items(self):
        return self._specs.items()


def multi_head_forward(
    f_out: Tensor, registry: HeadRegistry, params: ParamStore, dataset_id: str, train: bool = False
) -> Tensor:
    spec = registry[dataset_id]
    head = classic_head if spec.kind == "classic" else simple_head
    return head(f_out, params, dataset_id, train)
