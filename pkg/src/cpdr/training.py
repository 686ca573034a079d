"""Losses, deep supervision, Adam, the poly+warmup schedule, and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SamplePair, augment_hflip
from .tensor import ParamSet, ShapeError, Tensor, UsageError, backward, bilinear_resize, sigmoid

log = logging.getLogger(__name__)

PAPER_VERBATIM = "paper_verbatim"
STANDARD_2X = "standard_2x"


@dataclass
class LossConfig:
    epsilon: float = 1.0
    dice_variant: str = STANDARD_2X
    stage_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dice_variant = self.dice_variant.lower()
        self.stage_weights = tuple(float(w) for w in self.stage_weights)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.dice_variant not in (PAPER_VERBATIM, STANDARD_2X):
            raise ValueError(f"unknown dice variant {self.dice_variant!r}")
        if len(self.stage_weights) != 3 or min(self.stage_weights) <= 0:
            raise ValueError("stage_weights needs three positive values")


def _overlap_sums(p: Tensor, y: Tensor):
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and target {y.shape} differ")
    axes = tuple(range(1, p.data.ndim))
    return (p * y).sum(axes), p.sum(axes), y.sum(axes)


def dice_loss(p: Tensor, y: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-sample dice on probabilities ``p``, averaged over the batch.

    The ``paper_verbatim`` variant drops the factor 2 from the numerator, so a
    perfect prediction bottoms out at 0.5 rather than 0.
    """
    inter, sp, sy = _overlap_sums(p, y)
    k = 2.0 if cfg.dice_variant == STANDARD_2X else 1.0
    per_sample = 1.0 - (inter * k + cfg.epsilon) / (sp + sy + cfg.epsilon)
    return per_sample.mean()


def iou_loss(p: Tensor, y: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    inter, sp, sy = _overlap_sums(p, y)
    per_sample = 1.0 - (inter + cfg.epsilon) / (sp + sy - inter + cfg.epsilon)
    return per_sample.mean()


def total_loss(p: Tensor, y: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    return dice_loss(p, y, cfg) + iou_loss(p, y, cfg)


@dataclass
class LossBundle:
    dice: list[float]
    iou: list[float]
    stage_totals: list[float]
    total: Tensor
    targets: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def value(self) -> float:
        return self.total.item()


def resize_target(y_full: Tensor, h: int, w: int) -> Tensor:
    # raw bilinear values, no re-binarization
    return bilinear_resize(y_full, h, w)


def deep_supervised_loss(logits: Sequence[Tensor], y_full: Tensor, cfg: LossConfig = LossConfig()) -> LossBundle:
    if len(logits) != 3:
        raise UsageError(f"expected 3 stage predictions, got {len(logits)}")
    dice, iou, totals, targets = [], [], [], []
    total = None
    for weight, lg in zip(cfg.stage_weights, logits):
        y = resize_target(y_full, lg.shape[2], lg.shape[3])
        p = sigmoid(lg)
        d, i = dice_loss(p, y, cfg), iou_loss(p, y, cfg)
        stage = d + i
        dice.append(d.item())
        iou.append(i.item())
        totals.append(stage.item())
        targets.append(y.data)
        term = stage * weight
        total = term if total is None else total + term
    return LossBundle(dice, iou, totals, total, targets)


# ----------------------------------------------------------------------------- schedule


@dataclass
class Schedule:
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    total_epochs: int = 40
    gamma: float = 3.0
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup must be shorter than training")
        if self.base_lr < 0 or self.steps_per_epoch < 1:
            raise ValueError("invalid schedule")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def poly_warmup_lr(sched: Schedule, step: int) -> float:
    """Linear warmup to ``base_lr`` then polynomial decay to zero at the last step."""
    t, w = sched.total_steps, sched.warmup_steps
    if not 0 <= step <= t:
        raise UsageError(f"step {step} outside [0, {t}]")
    if step < w:
        return sched.base_lr * (step + 1) / w
    return sched.base_lr * (1.0 - (step - w) / (t - w)) ** sched.gamma


# ----------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState, lr: float) -> None:
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        if p.grad is None:
            raise UsageError(f"parameter {name} has no gradient; run backward first")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# ----------------------------------------------------------------------------- loop


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    dice: float
    iou: float
    total: float
    train_mae: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)

    def epoch_means(self) -> list[tuple[int, float, float]]:
        out = []
        for e in sorted({r.epoch for r in self.steps}):
            rows = [r for r in self.steps if r.epoch == e]
            out.append((e, float(np.mean([r.total for r in rows])), float(np.mean([r.train_mae for r in rows]))))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "lr", "dice", "iou", "total", "train_mae"])
            for r in self.steps:
                writer.writerow([r.epoch, r.step, repr(r.lr), repr(r.dice), repr(r.iou), repr(r.total),
                                 repr(r.train_mae)])


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded permutation split into full batches; the trailing partial batch is dropped."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def train(model, dataset: Sequence[SamplePair], sched: Schedule, cfg: LossConfig = LossConfig(),
          epochs: int | None = None, batch_size: int = 16, seed: int = 0, max_steps: int | None = None,
          augment: bool = True) -> TrainLog:
    """Forward, deep-supervised loss, backward, Adam; one row logged per optimizer step."""
    if not dataset:
        raise ValueError("dataset is empty")
    batch_size = min(batch_size, len(dataset))
    if len(dataset) // batch_size != sched.steps_per_epoch:
        raise ValueError(f"schedule expects {sched.steps_per_epoch} steps/epoch, "
                         f"dataset gives {len(dataset) // batch_size}")
    epochs = sched.total_epochs if epochs is None else epochs
    limit = sched.total_steps if max_steps is None else min(max_steps, sched.total_steps)
    rng = np.random.default_rng(seed)
    params = model.parameters
    params.zero_grad()
    state = AdamState()
    record = TrainLog()
    step = 0
    for epoch in range(epochs):
        for idx in make_batches(len(dataset), batch_size, rng):
            if step >= limit:
                return record
            samples = [augment_hflip(dataset[i], int(rng.integers(2))) if augment else dataset[i] for i in idx]
            x = Tensor(np.concatenate([s.image.data for s in samples]))
            y = Tensor(np.concatenate([s.mask.data for s in samples]))
            logits = model(x)
            bundle = deep_supervised_loss(logits, y, cfg)
            backward(bundle.total)
            lr = poly_warmup_lr(sched, step)
            adam_step(params, state, lr)
            prob = sigmoid(logits[-1]).data
            mae = float(np.abs(prob - bundle.targets[-1]).mean())
            w = cfg.stage_weights
            record.steps.append(StepRecord(
                epoch, step, lr,
                float(np.dot(w, bundle.dice)), float(np.dot(w, bundle.iou)), bundle.value, mae))
            step += 1
        if record.steps:
            _, loss_mean, mae_mean = record.epoch_means()[-1]
            log.info("epoch %d  loss %.4f  train_mae %.4f", epoch, loss_mean, mae_mean)
    return record
