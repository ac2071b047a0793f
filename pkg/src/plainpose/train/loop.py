"""Supervised heatmap training with JSONL logging and exact resume."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..codec import decode_heatmaps, encode_targets
from ..core import ops
from ..core.tensor import NonFiniteError, Tensor, no_grad
from ..evaluation import pck_bbox
from ..model import ViTPose
from .freeze import apply_freeze
from .optim import AdamState, AdamW, TrainConfig, layer_lr, lr_multiplier
from .sampler import MultiDatasetSampler

HEATMAP_STRIDE = 4  # input px per heatmap cell at the usual 1/16 feature stride
IMAGE_MEAN, IMAGE_STD = 0.5, 0.25
STEP_KEY = "train.step"


class TrainingDivergedError(RuntimeError):
    pass


def normalize_image(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float32) - IMAGE_MEAN) / IMAGE_STD


def heatmap_hw(input_hw) -> tuple[int, int]:
    return input_hw[0] // HEATMAP_STRIDE, input_hw[1] // HEATMAP_STRIDE


def heatmap_geometry(enc) -> tuple[tuple[int, int], float]:
    """Heatmap size and its stride in input pixels; heads upsample the token grid by 4."""
    gh, gw = enc.grid_hw()
    return (4 * gh, 4 * gw), enc.patch_stride / 4


def collate(dataset, indices: Sequence[int], input_hw, sigma: float = 2.0, geometry=None):
    """Images, target heatmaps and N x 1 x 1 x K weights for one dataset's slice of a batch.

    ``geometry`` is ``(heatmap_hw, stride)``; the default is the 1/4-resolution map.
    """
    hw, stride = geometry or (heatmap_hw(input_hw), HEATMAP_STRIDE)
    imgs, tgts, wts = [], [], []
    for i in indices:
        s = dataset[i]
        if s.image.shape[:2] != tuple(input_hw):
            raise ValueError(f"sample {i} is {s.image.shape[:2]}, model expects {tuple(input_hw)}")
        hm, w = encode_targets(s.kps, hw, stride, sigma)
        imgs.append(normalize_image(s.image))
        tgts.append(hm)
        wts.append(w)
    return np.stack(imgs), np.stack(tgts), np.stack(wts)[:, None, None, :]


@dataclass
class TrainResult:
    step: int
    losses: list[float] = field(default_factory=list)
    state: AdamState | None = None
    checkpoint: Path | None = None


class MetricLog:
    """Line-delimited JSON metric log (one object per line, flushed per write)."""

    def __init__(self, path=None, append: bool = False):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metric_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def layer_lrs(cfg: TrainConfig, depth: int, step: int) -> list[float]:
    mult = lr_multiplier(step, cfg)
    return [layer_lr(cfg.base_lr, cfg.layer_decay, l, depth) * mult for l in range(depth + 2)]


def save_training_checkpoint(path, model: ViTPose, state: AdamState, step: int) -> None:
    extra = state.to_entries()
    extra[STEP_KEY] = np.array([step], dtype=np.float64)  # VTPT carries floats only; exact below 2**53
    model.save(path, extra=extra)


def load_training_checkpoint(path) -> tuple[ViTPose, AdamState | None, int]:
    model, rest = ViTPose.load(path)
    state = AdamState.from_entries(rest) if "optim.step" in rest else None
    step = int(rest[STEP_KEY][0]) if STEP_KEY in rest else 0
    return model, state, step


def train_step(model: ViTPose, datasets: Mapping, batch, rng: np.random.Generator, sigma: float = 2.0):
    """Forward + backward for one batch; loss is the unweighted sum over dataset slices."""
    input_hw = model.cfg.encoder.input_hw
    total, parts = None, {}
    for ds_id, idx in batch.by_dataset().items():
        imgs, tgts, wts = collate(datasets[ds_id], idx, input_hw, sigma, heatmap_geometry(model.cfg.encoder))
        pred = model(Tensor(imgs), ds_id, train=True, rng=rng)
        loss = ops.weighted_mse(pred, tgts.astype(pred.dtype), wts.astype(pred.dtype))
        parts[ds_id] = float(loss.data)
        total = loss if total is None else total + loss
    total.backward()
    return float(total.data), parts


def train_loop(
    model: ViTPose,
    datasets: Mapping,
    cfg: TrainConfig,
    steps: int | None = None,
    out=None,
    log=None,
    state: AdamState | None = None,
    start_step: int = 0,
    eval_fn: Callable[[ViTPose], dict] | None = None,
    eval_every: int = 0,
    sigma: float = 2.0,
) -> TrainResult:
    """Train ``model`` in place.

    Step ``s`` draws its batch and its dropout/drop-path randomness from
    ``(cfg.seed, s)`` alone, so a run resumed from a checkpoint at step ``k``
    matches the uninterrupted run bit for bit.
    """
    unknown = [d for d in datasets if d not in model.registry]
    if unknown:
        raise KeyError(f"datasets without a head: {unknown}")
    steps = cfg.total_steps if steps is None else steps
    apply_freeze(model.params, cfg.freeze)
    depth = model.cfg.encoder.depth
    opt = AdamW(model.params, cfg, depth)
    if state is not None:
        opt.state = state
    sampler = MultiDatasetSampler(datasets, cfg.batch_size, cfg.seed)
    metric_log = MetricLog(log, append=start_step > 0)
    out = Path(out) if out else None
    result = TrainResult(step=start_step, state=opt.state)
    epoch_losses: list[float] = []
    t0 = time.perf_counter()
    for step in range(start_step, steps):
        rng = np.random.default_rng([cfg.seed, step, 0xD7])
        batch = sampler.batch(step)
        model.params.zero_grad()
        try:
            loss, parts = train_step(model, datasets, batch, rng, sigma)
            if not np.isfinite(loss):
                raise NonFiniteError(f"loss is {loss}")
            opt.step(step)
        except NonFiniteError as exc:
            diag = {"event": "diverged", "step": step, "error": str(exc), "datasets": sorted(batch.by_dataset())}
            metric_log.write(diag)
            raise TrainingDivergedError(f"training halted at step {step}: {exc}") from exc
        result.losses.append(loss)
        epoch_losses.append(loss)
        if cfg.log_every and (step % cfg.log_every == 0 or step == steps - 1):
            metric_log.write(
                {
                    "event": "step",
                    "step": step,
                    "epoch": step // cfg.steps_per_epoch,
                    "loss": loss,
                    "losses": parts,
                    "lr": layer_lrs(cfg, depth, step),
                    "elapsed_s": round(time.perf_counter() - t0, 3),
                }
            )
        if (step + 1) % cfg.steps_per_epoch == 0:
            metric_log.write(
                {"event": "epoch", "epoch": step // cfg.steps_per_epoch, "loss": float(np.mean(epoch_losses))}
            )
            epoch_losses = []
        if eval_fn and eval_every and (step + 1) % eval_every == 0:
            metric_log.write({"event": "eval", "step": step, **eval_fn(model)})
        if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_checkpoint(out, model, opt.state, step + 1)
        result.step = step + 1
    if out:
        save_training_checkpoint(out, model, opt.state, result.step)
        result.checkpoint = out
        metric_log.write({"event": "checkpoint", "step": result.step, "path": str(out)})
    return result


def predict(model: ViTPose, images: np.ndarray, dataset_id: str | None = None, batch_size: int = 64):
    """Decoded pixel coordinates (N x K x 2) and confidences (N x K) for raw [0, 1] images."""
    coords, confs = [], []
    _, stride = heatmap_geometry(model.cfg.encoder)
    with no_grad():
        for i in range(0, len(images), batch_size):
            hm = model(Tensor(normalize_image(images[i : i + batch_size])), dataset_id).data
            c, s = decode_heatmaps(hm, stride)
            coords.append(c)
            confs.append(s)
    return np.concatenate(coords), np.concatenate(confs)


def evaluate_pck(model: ViTPose, dataset, indices=None, alpha: float = 0.1, dataset_id: str | None = None) -> dict:
    indices = range(len(dataset)) if indices is None else indices
    samples = [dataset[i] for i in indices]
    coords, _ = predict(model, np.stack([s.image for s in samples]), dataset_id)
    gt = np.stack([s.kps.points for s in samples])
    sizes = np.array([max(s.kps.bbox[2], s.kps.bbox[3]) for s in samples])
    return pck_bbox(coords, gt, sizes, alpha)
