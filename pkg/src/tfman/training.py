"""L1 objective, ADAM, learning-rate schedules and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .image import DegradationSpec, ImageRGB, SamplingError, degrade, mod_crop, sample_patch_pair
from .layers import Module
from .tensor import Param, Tensor

log = logging.getLogger(__name__)

BI_MILESTONES = (5000, 8500, 10500, 11500, 12500, 13500)
BD_DN_MILESTONES = (2000, 3500, 4500, 5500, 6500, 7500)
TASK_MILESTONES = {"BI": BI_MILESTONES, "BD_DN": BD_DN_MILESTONES}
TASK_EPOCHS = {"BI": 15000, "BD_DN": 8500}

# seed domains; each reproducibility domain gets its own stream
PATCH_STREAM = 1
NOISE_STREAM = 2


def normalize_task(task: str) -> str:
    t = task.upper().replace("-", "_")
    if t in ("BD", "DN", "BDDN"):
        t = "BD_DN"
    if t not in TASK_MILESTONES:
        raise ValueError(f"unknown schedule task {task!r}")
    return t


def l1_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    tshape = target.shape
    if pred.shape != tshape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {tshape}")
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    return T.mean(T.tabs(pred - target))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 5e-7

    @classmethod
    def fresh(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected ADAM update in place; parameters without a gradient see a zero gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)


@dataclass
class ScheduleSpec:
    task: str = "BI"
    base_lr: float = 1e-4
    milestones: tuple[int, ...] = BI_MILESTONES
    epochs: int = 15000
    iters_per_epoch: int = 50
    batch: int = 16
    patch: int = 48

    def __post_init__(self):
        self.task = normalize_task(self.task)
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        self.milestones = ms

    @classmethod
    def for_task(cls, task: str, **kw) -> "ScheduleSpec":
        task = normalize_task(task)
        kw.setdefault("milestones", TASK_MILESTONES[task])
        kw.setdefault("epochs", TASK_EPOCHS[task])
        return cls(task=task, **kw)

    def lr(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.base_lr / 2**passed


def lr_at(epoch: int, task: str = "BI", base_lr: float = 1e-4) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return ScheduleSpec.for_task(task, base_lr=base_lr).lr(epoch)


@dataclass
class TraceRow:
    epoch: int
    iteration: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    model: Module
    trace: list[TraceRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def write_trace(trace: Sequence[TraceRow], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "iteration", "lr", "loss"])
        for r in trace:
            w.writerow([r.epoch, r.iteration, repr(r.lr), repr(r.loss)])


def read_trace(path: str | Path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["epoch"]), int(r["iteration"]), float(r["lr"]), float(r["loss"]))
                for r in csv.DictReader(fh)]


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def train(
    model: Module,
    images: Sequence[tuple[str, ImageRGB]],
    spec: DegradationSpec,
    schedule: ScheduleSpec,
    seed: int = 0,
    iterations: int | None = None,
    on_epoch_end: Callable[[int, Module], None] | None = None,
    state: AdamState | None = None,
) -> TrainResult:
    """Run the patch-sampling / L1 / ADAM loop.

    ``iterations`` defaults to ``schedule.epochs * schedule.iters_per_epoch``.
    ``on_epoch_end`` is called after each completed epoch (used for checkpoints).
    """
    usable: list[tuple[str, ImageRGB, ImageRGB]] = []
    skipped: list[str] = []
    for k, (name, hr) in enumerate(images):
        hr = mod_crop(hr, spec.scale)
        if hr.height // spec.scale < schedule.patch or hr.width // spec.scale < schedule.patch:
            log.warning("skipping %s: smaller than a %d-pixel LR patch", name, schedule.patch)
            skipped.append(name)
            continue
        noise_seed = int(stream(seed, NOISE_STREAM, k).integers(2**63))
        lr_img = degrade(hr, DegradationSpec(spec.kind, spec.scale, noise_seed))
        usable.append((name, hr, lr_img))
    if not usable:
        raise SamplingError("no training image is large enough for the patch size")

    params = model.parameters()
    state = state or AdamState.fresh(params)
    total = iterations if iterations is not None else schedule.epochs * schedule.iters_per_epoch
    result = TrainResult(model, skipped=skipped)
    dtype = params[0].dtype
    for it in range(total):
        epoch = it // schedule.iters_per_epoch
        lr = schedule.lr(epoch)
        pick = stream(seed, PATCH_STREAM, it).integers(0, len(usable), size=schedule.batch)
        lrs, hrs = [], []
        for j, k in enumerate(pick):
            name, hr, lr_img = usable[int(k)]
            pair = sample_patch_pair(hr, spec, schedule.patch, stream(seed, PATCH_STREAM, it, j, int(k)),
                                     lr=lr_img, image_id=name)
            lrs.append(pair.lr)
            hrs.append(pair.hr)
        x = Tensor(np.stack(lrs).astype(dtype))
        y = np.stack(hrs).astype(dtype)
        model.zero_grad()
        loss = l1_loss(model(x), y)
        loss.backward()
        adam_step(params, state, lr)
        result.trace.append(TraceRow(epoch, it, lr, float(loss.data)))
        if on_epoch_end is not None and (it + 1) % schedule.iters_per_epoch == 0:
            on_epoch_end(epoch, model)
    return result
