"""AdamW with decoupled weight decay, layer-wise lr decay and step schedules."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ..core.params import ParamStore
from ..core.tensor import NonFiniteError

FREEZE_MODES = ("none", "mhsa", "ffn")


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    weight_decay: float = 0.1
    layer_decay: float = 0.75
    drop_path_rate: float = 0.0
    epochs: int = 210
    decay_epochs: list[int] = field(default_factory=lambda: [170, 200])
    batch_size: int = 512
    freeze: str = "none"
    seed: int = 0
    steps_per_epoch: int = 1
    warmup_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.decay_epochs = [int(e) for e in self.decay_epochs]
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 0 for e in d):
            raise ValueError(f"decay_epochs {d} must be strictly increasing and below epochs={self.epochs}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ValueError("layer_decay must lie in (0, 1]")
        if self.freeze not in FREEZE_MODES:
            raise ValueError(f"freeze must be one of {FREEZE_MODES}")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 1:
            raise ValueError("batch_size, steps_per_epoch and epochs must be positive")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# learning rates
# --------------------------------------------------------------------------


def layer_lr(base_lr: float, decay: float, layer: int, depth: int) -> float:
    """``base_lr * decay**(depth + 1 - layer)``; embedding is layer 0, head is depth + 1."""
    return base_lr * decay ** (depth + 1 - layer)


_BLOCK = re.compile(r"^blocks\.(\d+)\.")
_EMBED_PREFIXES = ("patch_embed.", "pos_embed", "mask_token", "distill.token", "distill.proj")
_TOP_PREFIXES = ("norm.", "heads.", "mim_head.")


def param_layer(name: str, depth: int) -> int:
    m = _BLOCK.match(name)
    if m:
        return int(m.group(1)) + 1
    if name.startswith(_EMBED_PREFIXES):
        return 0
    if name.startswith(_TOP_PREFIXES):
        return depth + 1
    raise ValueError(f"cannot assign a layer index to parameter {name!r}")


def step_schedule(epoch: float, milestones, gamma: float = 0.1) -> float:
    """Multiplier ``gamma**k`` where k counts milestones already reached."""
    return gamma ** sum(1 for m in milestones if epoch >= m)


def warmup_factor(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0 or step >= warmup_steps:
        return 1.0
    return (step + 1) / warmup_steps


def lr_table(store: ParamStore, cfg: TrainConfig, depth: int) -> dict[str, float]:
    """Per-parameter base lr after layer-wise decay (schedule not applied)."""
    return {
        name: layer_lr(cfg.base_lr, cfg.layer_decay, param_layer(name, depth), depth)
        for name, _ in store.trainable()
    }


def lr_multiplier(step: int, cfg: TrainConfig) -> float:
    epoch = step // cfg.steps_per_epoch
    return step_schedule(epoch, cfg.decay_epochs) * warmup_factor(step, cfg.warmup_steps)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices and kernels, not to biases, norms or embeddings."""
    if name.startswith(("pos_embed", "mask_token", "distill.token")):
        return False
    return value.ndim >= 2


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_entries(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        out = {prefix + "step": np.array([self.step], dtype=np.float64)}
        for k in self.m:
            out[f"{prefix}m.{k}"] = self.m[k]
            out[f"{prefix}v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray], prefix: str = "optim.") -> AdamState:
        state = cls(step=int(entries[prefix + "step"].reshape(-1)[0]))
        for k, val in entries.items():
            if k.startswith(prefix + "m."):
                state.m[k[len(prefix) + 2 :]] = np.array(val)
            elif k.startswith(prefix + "v."):
                state.v[k[len(prefix) + 2 :]] = np.array(val)
        return state


def adamw_step(
    params: Mapping[str, "np.ndarray | object"],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr_per_param: Mapping[str, float] | float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    wd: Mapping[str, float] | float = 0.1,
) -> AdamState:
    """One AdamW update in place.

    ``params`` maps names to tensors (anything with a ``.data`` array) or raw
    arrays. Names missing from ``grads`` are skipped. Weight decay is
    decoupled: ``p -= lr * wd * p`` before the adaptive step. Any non-finite
    gradient aborts the whole step before a single value changes.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}; step {state.step + 1} aborted")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        lr = lr_per_param if isinstance(lr_per_param, (int, float)) else lr_per_param[name]
        decay = wd if isinstance(wd, (int, float)) else wd.get(name, 0.0)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        g = g.astype(arr.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if decay:
            arr *= 1 - lr * decay
        arr -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(arr.dtype)
    return state


class AdamW:
    """Thin stateful wrapper over ``adamw_step`` for a ParamStore."""

    def __init__(self, store: ParamStore, cfg: TrainConfig, depth: int):
        self.store = store
        self.cfg = cfg
        self.depth = depth
        self.state = AdamState()

    def lrs(self, step: int) -> dict[str, float]:
        mult = lr_multiplier(step, self.cfg)
        return {k: v * mult for k, v in lr_table(self.store, self.cfg, self.depth).items()}

    def step(self, step: int) -> dict[str, float]:
        grads = {}
        for name, t in self.store.trainable():
            if t.grad is not None:
                grads[name] = t.grad
        lrs = self.lrs(step)
        wd = {k: self.cfg.weight_decay for k in grads if decays(k, self.store[k].data)}
        adamw_step(
            {k: self.store[k] for k in grads}, grads, self.state, lrs, self.cfg.betas, self.cfg.eps, wd
        )
        return lrs
