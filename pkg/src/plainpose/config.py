"""Architecture configs, named presets and their TOML text form."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli


class AttentionMode(str, enum.Enum):
    FULL = "full"
    WINDOW = "window"
    WINDOW_SHIFT = "window_shift"
    WINDOW_POOL = "window_pool"
    WINDOW_SHIFT_POOL = "window_shift_pool"
    INTERLEAVED = "interleaved"

    @property
    def shift(self) -> bool:
        return self in (AttentionMode.WINDOW_SHIFT, AttentionMode.WINDOW_SHIFT_POOL)

    @property
    def pool(self) -> bool:
        return self in (AttentionMode.WINDOW_POOL, AttentionMode.WINDOW_SHIFT_POOL)

    @property
    def windowed(self) -> bool:
        return self is not AttentionMode.FULL


@dataclass
class EncoderConfig:
    depth: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: int = 16
    patch_stride: int = 16
    input_hw: tuple[int, int] = (256, 192)
    drop_path_rate: float = 0.0
    attention: AttentionMode = AttentionMode.FULL
    window_hw: tuple[int, int] = (8, 8)
    interleave_period: int = 4
    qkv_bias: bool = True

    def __post_init__(self):
        self.attention = AttentionMode(self.attention)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.window_hw = tuple(int(v) for v in self.window_hw)
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")
        if self.patch_stride > self.patch_size or (self.patch_size - self.patch_stride) % 2:
            raise ValueError("patch_stride must be <= patch_size with an even overlap")
        if self.depth < 1 or min(self.window_hw) < 1:
            raise ValueError("depth and window sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def patch_pad(self) -> int:
        return (self.patch_size - self.patch_stride) // 2

    def padded_hw(self, hw: tuple[int, int] | None = None) -> tuple[int, int]:
        h, w = hw or self.input_hw
        d = self.patch_stride
        return -(-h // d) * d, -(-w // d) * d

    def grid_hw(self, hw: tuple[int, int] | None = None) -> tuple[int, int]:
        h, w = self.padded_hw(hw)
        return h // self.patch_stride, w // self.patch_stride

    def layer_attention(self, layer_idx: int) -> AttentionMode:
        """Resolved mode of a 0-based layer; interleaved alternates window and full."""
        if self.attention is not AttentionMode.INTERLEAVED:
            return self.attention
        step = max(self.depth // self.interleave_period, 1)
        return AttentionMode.FULL if (layer_idx + 1) % step == 0 else AttentionMode.WINDOW


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: str = "classic"
    deconv_channels: int = 256
    norm: str = "batch"
    heads: dict[str, int] = field(default_factory=lambda: {"coco": 17})

    def __post_init__(self):
        if self.decoder not in ("classic", "simple"):
            raise ValueError(f"decoder must be 'classic' or 'simple', got {self.decoder!r}")
        if self.norm not in ("batch", "affine"):
            raise ValueError(f"norm must be 'batch' or 'affine', got {self.norm!r}")


# --------------------------------------------------------------------------
# TOML text form
# --------------------------------------------------------------------------

_ENCODER_KEYS = {f.name for f in dataclasses.fields(EncoderConfig)}
_ALIASES = {"input": "input_hw", "window": "window_hw"}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return json.dumps(v.value)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + " }"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def model_config_to_dict(cfg: ModelConfig) -> dict:
    enc = cfg.encoder
    return {
        "depth": enc.depth,
        "embed_dim": enc.embed_dim,
        "num_heads": enc.num_heads,
        "mlp_ratio": enc.mlp_ratio,
        "patch_size": enc.patch_size,
        "patch_stride": enc.patch_stride,
        "input": list(enc.input_hw),
        "drop_path_rate": enc.drop_path_rate,
        "attention": enc.attention.value,
        "window": list(enc.window_hw),
        "interleave_period": enc.interleave_period,
        "qkv_bias": enc.qkv_bias,
        "decoder": cfg.decoder,
        "deconv_channels": cfg.deconv_channels,
        "norm": cfg.norm,
        "heads": dict(cfg.heads),
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    enc_kwargs, model_kwargs = {}, {}
    for key, value in d.items():
        key = _ALIASES.get(key, key)
        if key in _ENCODER_KEYS:
            enc_kwargs[key] = value
        elif key in ("decoder", "deconv_channels", "norm", "heads"):
            model_kwargs[key] = dict(value) if key == "heads" else value
        else:
            raise KeyError(f"unknown model config key {key!r}")
    return ModelConfig(encoder=EncoderConfig(**enc_kwargs), **model_kwargs)


def dumps_model_config(cfg: ModelConfig, name: str | None = None) -> str:
    lines = [f"[{json.dumps(name)}]"] if name else []
    lines += [f"{k} = {_toml_value(v)}" for k, v in model_config_to_dict(cfg).items()]
    return "\n".join(lines) + "\n"


def loads_model_config(text: str) -> ModelConfig:
    d = tomli.loads(text)
    if len(d) == 1:  # a single named table, as written by dumps_model_config(name=...)
        (only,) = d.values()
        if isinstance(only, dict) and "heads" in only:
            d = only
    return model_config_from_dict(d)


def save_model_config(path, cfg: ModelConfig) -> None:
    Path(path).write_text(dumps_model_config(cfg))


def load_model_config(path) -> ModelConfig:
    return loads_model_config(Path(path).read_text())


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------


def _data_text(name: str) -> str:
    return resources.files("plainpose").joinpath("data", name).read_text()


def preset_table() -> dict[str, dict]:
    return tomli.loads(_data_text("presets.toml"))


def preset_names() -> list[str]:
    return list(preset_table())


def preset(name: str, **overrides) -> ModelConfig:
    table = preset_table()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(table)}")
    d = dict(table[name])
    d.update(overrides)
    return model_config_from_dict(d)


def recipe_table() -> dict[str, dict]:
    """Reference training recipes (batch size, lr, decay schedule) per model size."""
    return tomli.loads(_data_text("recipes.toml"))
