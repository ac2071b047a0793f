from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ModelConfig, load_model_config, save_model_config
from .core import serialize
from .core.params import ParamStore
from .core.tensor import Tensor
from .decoders import HeadRegistry, init_head_params, multi_head_forward
from .encoder import encode, init_encoder_params

META_PREFIX = "meta."


class CheckpointMismatchError(ValueError):
    pass


class ViTPose:
    """Backbone plus one heatmap head per registered dataset."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = init_encoder_params(cfg.encoder, rng, dtype=dtype)
        self.registry = HeadRegistry()
        for dataset_id, nk in cfg.heads.items():
            spec = self.registry.register(dataset_id, cfg.decoder, nk)
            init_head_params(
                self.params,
                dataset_id,
                spec,
                cfg.encoder.embed_dim,
                rng,
                deconv_channels=cfg.deconv_channels,
                norm=cfg.norm,
                dtype=dtype,
            )

    @property
    def default_dataset(self) -> str:
        return next(iter(self.cfg.heads))

    def features(self, images, train=False, rng=None, extra_tokens=None, ignore_extra=False, **kw) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        return encode(x, self.cfg.encoder, self.params, extra_tokens, train, rng, ignore_extra, **kw)

    def head(self, f_out: Tensor, dataset_id: str | None = None, train: bool = False) -> Tensor:
        return multi_head_forward(f_out, self.registry, self.params, dataset_id or self.default_dataset, train)

    def __call__(self, images, dataset_id=None, train=False, rng=None, extra_tokens=None, ignore_extra=False):
        f_out = self.features(images, train, rng, extra_tokens, ignore_extra)
        return self.head(f_out, dataset_id, train)

    # -- persistence ------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out[META_PREFIX + "affine_norm"] = np.array([1.0 if self.cfg.norm == "affine" else 0.0])
        return out

    def load_state_dict(self, entries: dict[str, np.ndarray]) -> None:
        names = [k for k in entries if not k.startswith(META_PREFIX)]
        missing = [k for k in self.params if k not in entries]
        unexpected = [k for k in names if k not in self.params]
        if missing or unexpected:
            raise CheckpointMismatchError(f"missing {missing[:5]}, unexpected {unexpected[:5]}")
        for k in names:
            t = self.params[k]
            if entries[k].shape != t.shape:
                raise CheckpointMismatchError(f"{k}: checkpoint {entries[k].shape} vs model {t.shape}")
            t.data = np.array(entries[k], dtype=t.dtype)
        flag = entries.get(META_PREFIX + "affine_norm")
        if flag is not None and bool(flag.reshape(-1)[0]) != (self.cfg.norm == "affine"):
            raise CheckpointMismatchError("checkpoint norm mode differs from config")

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        path = Path(path)
        entries = self.state_dict()
        if extra:
            entries.update(extra)
        serialize.save_checkpoint(path, entries)
        save_model_config(config_path_for(path), self.cfg)

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> tuple[ViTPose, dict[str, np.ndarray]]:
        """Load a checkpoint; returns the model and any non-model entries."""
        path = Path(path)
        cfg = cfg or load_model_config(config_path_for(path))
        entries = serialize.load_checkpoint(path)
        first = next((v for k, v in entries.items() if k.startswith("patch_embed")), None)
        model = cls(cfg, dtype=first.dtype if first is not None else np.float32)
        own = {k: v for k, v in entries.items() if k in model.params or k.startswith(META_PREFIX)}
        model.load_state_dict(own)
        rest = {k: v for k, v in entries.items() if k not in own}
        return model, rest


def config_path_for(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".toml")
