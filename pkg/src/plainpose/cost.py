"""Closed-form parameter, FLOP and activation-memory model.

FLOPs are multiply-accumulates (1 MAC = 1 FLOP). Norms, activations,
softmax, pooling and resizing are tallied on a separate "minor ops" line and
excluded from the totals.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .config import AttentionMode, EncoderConfig, ModelConfig
from .decoders import head_param_count


@dataclass
class CostItem:
    name: str
    params: int = 0
    flops: int = 0
    minor: int = 0
    activations: int = 0  # stored values per image


@dataclass
class CostReport:
    items: list[CostItem] = field(default_factory=list)
    input_hw: tuple[int, int] = (0, 0)
    batch: int = 1
    bytes_per_value: int = 4

    def _sum(self, attr, prefix=None):
        return sum(getattr(i, attr) for i in self.items if prefix is None or i.name.startswith(prefix))

    @property
    def params(self) -> int:
        return self._sum("params")

    @property
    def params_backbone(self) -> int:
        return self.params - self.params_heads

    @property
    def params_heads(self) -> int:
        return self._sum("params", "head.")

    @property
    def flops(self) -> int:
        return self._sum("flops")

    @property
    def flops_decoder(self) -> int:
        return self._sum("flops", "head.")

    @property
    def flops_encoder(self) -> int:
        return self.flops - self.flops_decoder

    @property
    def minor_ops(self) -> int:
        return self._sum("minor")

    @property
    def activation_bytes(self) -> int:
        return self._sum("activations") * self.batch * self.bytes_per_value

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "batch": self.batch,
            "params": self.params,
            "params_backbone": self.params_backbone,
            "params_heads": self.params_heads,
            "flops": self.flops,
            "flops_encoder": self.flops_encoder,
            "flops_decoder": self.flops_decoder,
            "minor_ops": self.minor_ops,
            "activation_bytes": self.activation_bytes,
            "breakdown": [asdict(i) for i in self.items],
        }

    def text(self) -> str:
        rows = [
            ("params (backbone)", f"{self.params_backbone / 1e6:.2f} M"),
            ("params (heads)", f"{self.params_heads / 1e6:.2f} M"),
            ("params (total)", f"{self.params / 1e6:.2f} M"),
            ("GFLOPs (encoder, MACs)", f"{self.flops_encoder / 1e9:.2f}"),
            ("GFLOPs (decoder, MACs)", f"{self.flops_decoder / 1e9:.2f}"),
            ("GFLOPs (total, MACs)", f"{self.flops / 1e9:.2f}"),
            ("minor ops (G, excluded)", f"{self.minor_ops / 1e9:.3f}"),
            (f"activations (MB, batch {self.batch})", f"{self.activation_bytes / 2**20:.1f}"),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v:>12}" for k, v in rows)


# --------------------------------------------------------------------------
# per-layer attention geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttnGeometry:
    queries: int  # query rows incl. window padding
    kv: int  # keys per query
    windows: int


def attention_geometry(enc: EncoderConfig, layer: int, grid_hw) -> AttnGeometry:
    mode = enc.layer_attention(layer)
    gh, gw = grid_hw
    if mode is AttentionMode.FULL:
        n = gh * gw
        return AttnGeometry(n, n, 1)
    wh, ww = min(enc.window_hw[0], gh), min(enc.window_hw[1], gw)
    nw = math.ceil(gh / wh) * math.ceil(gw / ww)
    area = wh * ww
    return AttnGeometry(nw * area, area + (nw if mode.pool else 0), nw)


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------


def _encoder_items(enc: EncoderConfig, input_hw) -> list[CostItem]:
    c, hid, p = enc.embed_dim, enc.hidden_dim, enc.patch_size
    gh, gw = enc.grid_hw(input_hw)
    n = gh * gw
    pos_gh, pos_gw = enc.grid_hw()
    items = [
        CostItem("patch_embed", p * p * 3 * c + c, n * p * p * 3 * c, 0, enc.padded_hw(input_hw)[0] * enc.padded_hw(input_hw)[1] * 3),
        CostItem("pos_embed", pos_gh * pos_gw * c, 0, n * c),
    ]
    qkv_b = 3 * c if enc.qkv_bias else 0
    for i in range(enc.depth):
        g = attention_geometry(enc, i, (gh, gw))
        heads = enc.num_heads
        flops = 3 * n * c * c + n * c * c + 2 * n * c * hid + 2 * g.queries * g.kv * c
        minor = 2 * 5 * n * c + heads * g.queries * g.kv * 3 + n * hid * 8
        if g.kv > g.queries // g.windows:  # pooled keys: one mean over each window's k and v
            minor += 2 * n * c
        # stored for backward: LN inputs, matmul inputs (LN outputs, q/k/v,
        # attention output, FFN hidden pre/post activation) and the
        # attention maps before and after softmax
        acts = 2 * n * c + n * c + 3 * g.queries * c + g.queries * c + n * c + 2 * n * hid
        acts += 2 * heads * g.queries * g.kv
        if g.kv > g.queries // g.windows:
            acts += 2 * g.windows * c
        items.append(
            CostItem(
                f"block.{i}",
                4 * c + 3 * c * c + qkv_b + c * c + c + c * hid + hid + hid * c + c,
                flops,
                minor,
                acts,
            )
        )
    items.append(CostItem("norm", 2 * c, 0, 5 * n * c, n * c))
    return items


def _head_items(cfg: ModelConfig, dataset_id: str, nk: int, grid_hw) -> list[CostItem]:
    c, d = cfg.encoder.embed_dim, cfg.deconv_channels
    h, w = grid_hw
    pre = f"head.{dataset_id}"
    if cfg.decoder == "classic":
        return [
            CostItem(pre + ".deconv1", 16 * c * d + 2 * d, h * w * 16 * c * d, 4 * h * w * d * 6, h * w * c + 4 * h * w * d * 2),
            CostItem(pre + ".deconv2", 16 * d * d + 2 * d, 4 * h * w * 16 * d * d, 16 * h * w * d * 6, 4 * h * w * d + 16 * h * w * d * 2),
            CostItem(pre + ".final", d * nk + nk, 16 * h * w * d * nk, 0, 16 * h * w * d),
        ]
    return [
        CostItem(pre + ".final", 9 * c * nk + nk, 16 * h * w * 9 * c * nk, h * w * c + 16 * h * w * c * 4, 16 * h * w * c),
    ]


def cost_report(cfg: ModelConfig, input_hw=None, batch: int = 1, include_heads: bool = True) -> CostReport:
    enc = cfg.encoder
    input_hw = tuple(input_hw or enc.input_hw)
    items = _encoder_items(enc, input_hw)
    if include_heads:
        grid = enc.grid_hw(input_hw)
        for ds, nk in cfg.heads.items():
            items += _head_items(cfg, ds, nk, grid)
    return CostReport(items, input_hw, batch)


def count_params(cfg: ModelConfig, include_heads: bool = True) -> int:
    return cost_report(cfg, include_heads=include_heads).params


def count_flops(cfg: ModelConfig, input_hw=None) -> CostReport:
    return cost_report(cfg, input_hw)


def estimate_activation_memory(cfg: ModelConfig, input_hw=None, batch: int = 1, bytes_per_value: int = 4) -> int:
    r = cost_report(cfg, input_hw, batch)
    r.bytes_per_value = bytes_per_value
    return r.activation_bytes


def training_flops(cfg: ModelConfig, freeze: str = "none", input_hw=None) -> dict:
    """Per-image MACs of one training step (forward plus backward) under a freeze mode.

    Backward costs one input-gradient product per forward product (two for the
    activation-activation attention products) plus one weight-gradient
    product per trainable weight. Frozen layers still pass gradients through.
    """
    if freeze not in ("none", "mhsa", "ffn"):
        raise ValueError(f"unknown freeze mode {freeze!r}")
    enc = cfg.encoder
    input_hw = tuple(input_hw or enc.input_hw)
    c, hid = enc.embed_dim, enc.hidden_dim
    gh, gw = enc.grid_hw(input_hw)
    n = gh * gw
    rep = cost_report(cfg, input_hw)
    embed = rep.items[0].flops
    forward = rep.flops
    backward = embed + 2 * rep.flops_decoder  # patch-embed weight grad; head input and weight grads
    for i in range(enc.depth):
        g = attention_geometry(enc, i, (gh, gw))
        mhsa, ffn, attn = 4 * n * c * c, 2 * n * c * hid, 2 * g.queries * g.kv * c
        backward += mhsa + ffn + 2 * attn
        backward += (mhsa if freeze != "mhsa" else 0) + (ffn if freeze != "ffn" else 0)
    frozen = {"none": 0, "mhsa": 4 * c * c + 4 * c, "ffn": 2 * c * hid + hid + c}[freeze] * enc.depth
    return {
        "forward": forward,
        "backward": backward,
        "total": forward + backward,
        "trainable_params": rep.params - frozen,
        "trainable_fraction": (rep.params - frozen) / rep.params,
    }


def check_head_formula(cfg: ModelConfig) -> bool:
    """The per-item head params agree with the decoder module's own closed form."""
    r = cost_report(cfg)
    return r.params_heads == sum(
        head_param_count(cfg.decoder, cfg.encoder.embed_dim, nk, cfg.deconv_channels) for nk in cfg.heads.values()
    )


# attention study rows: (label, attention mode, window)
ATTENTION_STUDY = (
    ("full", "full", (8, 8)),
    ("window", "window", (8, 8)),
    ("window+shift", "window_shift", (8, 8)),
    ("window+pool", "window_pool", (8, 8)),
    ("window+shift+pool", "window_shift_pool", (8, 8)),
    ("full+window", "interleaved", (8, 8)),
    ("window+shift+pool 16x12", "window_shift_pool", (16, 12)),
)
