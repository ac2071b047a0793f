"""Heatmap output distillation and knowledge-token transfer.

A knowledge token is a single learnable vector prepended to the patch tokens
of a frozen teacher and tuned so the teacher's heatmaps fit the ground truth.
It is then frozen and prepended (projected, if widths differ) to a student's
tokens while the student trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import ops
from .core.params import ParamStore
from .core.tensor import Tensor, no_grad
from .model import ViTPose
from .train.optim import AdamState, adamw_step

TOKEN_KEY = "distill.token"
PROJ_KEY = "distill.proj.weight"
MODES = ("td", "tod")


class TeacherNotFrozenError(RuntimeError):
    pass


@dataclass
class KnowledgeToken:
    t: np.ndarray  # C_teacher
    learned: bool = False
    teacher_id: str = ""
    history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.t.shape[0]

    def to_entries(self) -> dict[str, np.ndarray]:
        return {TOKEN_KEY: self.t.astype(np.float32)}

    @classmethod
    def from_entries(cls, entries, teacher_id: str = "") -> KnowledgeToken:
        return cls(np.asarray(entries[TOKEN_KEY], dtype=np.float32), True, teacher_id)


def output_distill_loss(k_s: Tensor, k_t) -> Tensor:
    """Plain MSE between student and teacher heatmaps (teacher side is constant)."""
    k_t = k_t.data if isinstance(k_t, Tensor) else np.asarray(k_t)
    if tuple(k_s.shape) != tuple(k_t.shape):
        raise ValueError(f"heatmap shapes differ: student {k_s.shape} vs teacher {k_t.shape}")
    return ops.mse(k_s, Tensor(k_t.astype(k_s.dtype)))


def init_token(dim: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return (0.02 * rng.standard_normal(dim)).astype(dtype)


def assert_frozen(model: ViTPose) -> None:
    live = [k for k, e in model.params.entries() if e.trainable]
    if live:
        raise TeacherNotFrozenError(f"teacher has {len(live)} trainable tensors (e.g. {live[0]!r}); freeze it first")


def teacher_heatmaps(teacher: ViTPose, images, dataset_id=None, token: np.ndarray | None = None) -> np.ndarray:
    with no_grad():
        extra = None if token is None else Tensor(token[None, :])
        return teacher(images, dataset_id, extra_tokens=extra).data


def learn_token(
    teacher: ViTPose,
    t0: np.ndarray,
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    steps: int,
    lr: float = 1e-3,
    optimizer: str = "adam",
    dataset_id: str | None = None,
    ignore_extra: bool = False,
    teacher_id: str = "",
) -> KnowledgeToken:
    """Tune only the token so the frozen teacher's heatmaps match the targets.

    ``batches`` yields (images, target heatmaps); it is cycled if shorter than
    ``steps``. The returned token is the best one seen (lowest batch loss,
    earliest on ties), so a token that never helps comes back as ``t0``.
    """
    assert_frozen(teacher)
    if optimizer not in ("adam", "sgd"):
        raise ValueError("optimizer must be 'adam' or 'sgd'")
    batches = list(batches)
    if not batches:
        raise ValueError("no data to learn the token from")
    t = Tensor(np.array(t0, dtype=teacher.dtype), requires_grad=True)
    best_t, best_loss = t.data.copy(), math.inf
    state = AdamState()
    history = []
    for step in range(steps + 1):
        images, target = batches[step % len(batches)]
        t.grad = None
        pred = teacher(images, dataset_id, extra_tokens=t.reshape(1, -1), ignore_extra=ignore_extra)
        loss = ops.mse(pred, Tensor(np.asarray(target, dtype=pred.dtype)))
        value = float(loss.data)
        history.append(value)
        if value < best_loss:
            best_loss, best_t = value, t.data.copy()
        if step == steps:
            break
        loss.backward()
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        if optimizer == "sgd":
            t.data = t.data - lr * grad
        else:
            adamw_step({"t": t}, {"t": grad}, state, lr, wd=0.0)
    return KnowledgeToken(best_t, True, teacher_id, history)


# --------------------------------------------------------------------------
# student side
# --------------------------------------------------------------------------


def attach_token(student: ViTPose, token: KnowledgeToken, rng: np.random.Generator | None = None) -> None:
    """Register the frozen token on the student, plus a trainable projection when widths differ."""
    c_s = student.cfg.encoder.embed_dim
    student.params.add(TOKEN_KEY, token.t.astype(student.dtype), "token", trainable=False)
    if token.dim != c_s:
        rng = rng or np.random.default_rng(0)
        bound = math.sqrt(6.0 / (token.dim + c_s))
        student.params.add(PROJ_KEY, rng.uniform(-bound, bound, (token.dim, c_s)).astype(student.dtype), "distill")


def student_token(student: ViTPose) -> Tensor | None:
    if TOKEN_KEY not in student.params:
        return None
    t = student.params[TOKEN_KEY].reshape(1, -1)
    if PROJ_KEY in student.params:
        t = t @ student.params[PROJ_KEY]
    return t


def student_losses(
    student: ViTPose,
    images,
    k_gt,
    k_t=None,
    mode: str = "td",
    dataset_id: str | None = None,
    train: bool = True,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``td``: MSE(S, K_gt). ``tod``: MSE(S, K_t) + MSE(S, K_gt), unit weights.

    The student runs with its attached token (if any) prepended; the token
    itself never receives a gradient.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "tod" and k_t is None:
        raise ValueError("tod mode needs teacher heatmaps")
    pred = student(images, dataset_id, train=train, rng=rng, extra_tokens=student_token(student))
    loss = ops.mse(pred, Tensor(np.asarray(k_gt, dtype=pred.dtype)))
    if mode == "tod":
        loss = loss + output_distill_loss(pred, k_t)
    return loss


# --------------------------------------------------------------------------
# paired-seed experiment
# --------------------------------------------------------------------------


@dataclass
class PairedRun:
    seed: int
    baseline_loss: float
    token_loss: float

    @property
    def token_wins(self) -> bool:
        return self.token_loss <= self.baseline_loss


def train_student(
    student: ViTPose,
    batches: Sequence[tuple[np.ndarray, np.ndarray]],
    steps: int,
    lr: float,
    seed: int,
    mode: str = "td",
    teacher: ViTPose | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Plain AdamW loop (no layer decay) over a fixed batch list; returns the loss trace."""
    state = AdamState()
    losses = []
    for step in range(steps):
        images, k_gt = batches[step % len(batches)]
        k_t = None
        if mode == "tod":
            k_t = teacher_heatmaps(teacher, images, token=None)
        student.params.zero_grad()
        rng = np.random.default_rng([seed, step])
        loss = student_losses(student, images, k_gt, k_t, mode, train=True, rng=rng)
        loss.backward()
        grads = {k: t.grad for k, t in student.params.trainable() if t.grad is not None}
        adamw_step(dict(student.params.trainable()), grads, state, lr, wd=0.0)
        losses.append(float(loss.data))
        if on_step:
            on_step(step, losses[-1])
    return losses


def heldout_loss(student: ViTPose, batches: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    with no_grad():
        vals = [
            float(ops.mse(student(x, extra_tokens=student_token(student)), Tensor(y.astype(student.dtype))).data)
            for x, y in batches
        ]
    return float(np.mean(vals))


def paired_seed_experiment(
    student_cfg,
    token: KnowledgeToken,
    train_batches: Sequence[tuple[np.ndarray, np.ndarray]],
    heldout_batches: Sequence[tuple[np.ndarray, np.ndarray]],
    seeds: Iterable[int],
    steps: int,
    lr: float = 1e-3,
    mode: str = "td",
    teacher: ViTPose | None = None,
) -> list[PairedRun]:
    """Train a plain student and a token student from the same init and data per seed."""
    runs = []
    for seed in seeds:
        base = ViTPose(student_cfg, seed=seed)
        tok = ViTPose(student_cfg, seed=seed)
        attach_token(tok, token, np.random.default_rng([seed, 1]))
        train_student(base, train_batches, steps, lr, seed, "td")
        train_student(tok, train_batches, steps, lr, seed, mode, teacher)
        runs.append(PairedRun(seed, heldout_loss(base, heldout_batches), heldout_loss(tok, heldout_batches)))
    return runs
