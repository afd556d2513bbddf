"""Three-stage progressive training with adaptive task sampling.

Stage I trains on every enabled task with the current sampling weights.
Stage II periodically re-derives the weights from per-task validation loss,
favouring the tasks that lag furthest behind the best one.  Stage III keeps
the weights and trains only on samples whose quality tag clears a threshold.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .attention import TASK_ORDER, TaskKind
from .optim import Adam
from .tasks import MediaBatch, draw_flows, task_loss

log = logging.getLogger(__name__)

STAGE_NAMES = {1: "I", 2: "II", 3: "III"}
CSV_HEADER = ["step", "stage", "task", "loss", "w_t2v", "w_t2a", "w_t2av", "w_i2v", "w_i2av"]


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage_steps: tuple[int, int, int] = (2000, 1000, 500)
    rebalance_period: int = 100
    quality_threshold: float = 0.5
    learning_rates: tuple[float, float, float] = (1e-3, 1e-3, 3e-4)
    tau: float = 1.0
    weight_floor: float = 0.02
    batch_size: int = 8
    log_period: int = 10
    val_period: int = 250
    val_size: int = 32
    tasks: tuple[TaskKind, ...] = TASK_ORDER
    grad_clip: float | None = 1.0

    def __post_init__(self):
        self.stage_steps = tuple(int(s) for s in self.stage_steps)
        self.learning_rates = tuple(float(x) for x in self.learning_rates)
        self.tasks = tuple(TaskKind.parse(t) for t in self.tasks)
        if len(self.stage_steps) != 3 or min(self.stage_steps) < 0:
            raise ValueError("stage_steps must be three non-negative counts")
        if len(self.learning_rates) != 3 or min(self.learning_rates) < 0:
            raise ValueError("learning_rates must be three non-negative values")
        if self.rebalance_period < 1:
            raise ValueError("rebalance_period must be >= 1")
        if not 0 <= self.quality_threshold <= 1:
            raise ValueError("quality_threshold must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ValueError("tasks must be a non-empty list without repeats")
        if not 0 <= self.weight_floor * len(self.tasks) <= 1:
            raise ValueError("weight_floor too large for the number of tasks")
        for name in ("batch_size", "log_period", "val_period", "val_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def total_steps(self) -> int:
        return sum(self.stage_steps)

    def stage_end(self, stage: int) -> int:
        return sum(self.stage_steps[:stage])

    def enabled(self) -> np.ndarray:
        return np.array([k in self.tasks for k in TASK_ORDER])


def apply_floor(weights, floor: float, enabled=None) -> np.ndarray:
    """Project onto the simplex with every enabled entry >= floor.

    Entries below the floor are raised to it and the remaining mass is
    rescaled proportionally, repeating until no entry is below the floor.
    """
    w = np.asarray(weights, dtype=np.float64).copy()
    enabled = np.ones(len(w), bool) if enabled is None else np.asarray(enabled, bool)
    w[~enabled] = 0.0
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    n = int(enabled.sum())
    if n == 0:
        raise ValueError("no enabled task")
    if w.sum() == 0:
        w[enabled] = 1.0
    w /= w.sum()
    pinned = np.zeros(len(w), bool)
    for _ in range(len(w) + 1):
        low = enabled & ~pinned & (w < floor)
        if not low.any():
            break
        pinned |= low
        free = enabled & ~pinned
        w[pinned] = floor
        rest = 1.0 - floor * pinned.sum()
        if free.any() and w[free].sum() > 0:
            w[free] *= rest / w[free].sum()
        elif free.any():
            w[free] = rest / free.sum()
    return w


def deficit_weights(losses, tau: float = 1.0, floor: float = 0.0, enabled=None) -> np.ndarray:
    """Softmax of (loss - min loss) / tau over enabled tasks, then floored."""
    losses = np.asarray(losses, dtype=np.float64)
    enabled = np.ones(len(losses), bool) if enabled is None else np.asarray(enabled, bool)
    if not np.all(np.isfinite(losses[enabled])):
        raise ValueError(f"non-finite validation metric: {losses}")
    deficit = np.zeros_like(losses)
    deficit[enabled] = losses[enabled] - losses[enabled].min()
    # shifting by the largest deficit leaves the softmax unchanged and keeps exp finite
    raw = np.where(enabled, np.exp((deficit - deficit[enabled].max()) / tau), 0.0)
    return apply_floor(raw / raw.sum(), floor, enabled)


@dataclass
class CurriculumState:
    stage: int = 1
    task_weights: np.ndarray = field(default_factory=lambda: np.full(len(TASK_ORDER), 1.0 / len(TASK_ORDER)))
    metric_history: dict = field(default_factory=lambda: {k: [] for k in TASK_ORDER})
    step: int = 0

    @classmethod
    def initial(cls, cfg: StageConfig) -> "CurriculumState":
        enabled = cfg.enabled()
        return cls(task_weights=apply_floor(enabled.astype(float), cfg.weight_floor, enabled))

    def check(self, floor: float, enabled=None) -> None:
        w = self.task_weights
        enabled = np.ones(len(w), bool) if enabled is None else enabled
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w[enabled] < floor - 1e-12):
            raise AssertionError(f"task weights left the floored simplex: {w}")


def next_task(state: CurriculumState, rng: np.random.Generator) -> TaskKind:
    return TASK_ORDER[int(rng.choice(len(TASK_ORDER), p=state.task_weights))]


def rebalance(state: CurriculumState, metrics: dict, tau: float = 1.0, floor: float = 0.02,
              enabled=None) -> np.ndarray:
    """New sampling weights from per-task validation losses (only enabled tasks need one)."""
    enabled = np.ones(len(TASK_ORDER), bool) if enabled is None else np.asarray(enabled, bool)
    losses = np.zeros(len(TASK_ORDER))
    for i, kind in enumerate(TASK_ORDER):
        if enabled[i]:
            if kind not in metrics:
                raise ValueError(f"missing validation metric for {kind.value}")
            losses[i] = float(metrics[kind])
    state.task_weights = deficit_weights(losses, tau, floor, enabled)
    return state.task_weights


def advance_stage(state: CurriculumState, cfg: StageConfig) -> CurriculumState:
    if state.stage >= 3:
        raise ValueError("stage III is terminal")
    if state.step < cfg.stage_end(state.stage):
        raise ValueError(f"stage {STAGE_NAMES[state.stage]} budget not reached "
                         f"({state.step} < {cfg.stage_end(state.stage)})")
    state.stage += 1
    return state


def filter_quality(samples, threshold: float) -> list:
    return [s for s in samples if s.quality >= threshold]


@dataclass
class LogRow:
    step: int
    stage: int
    task: TaskKind
    loss: float
    weights: np.ndarray

    def fields(self) -> list[str]:
        return [str(self.step), STAGE_NAMES[self.stage], self.task.value, f"{self.loss:.8g}",
                *(f"{w:.6f}" for w in self.weights)]


def metrics_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.fields())
    return buf.getvalue()


def write_metrics_csv(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(rows))


@dataclass
class ValidationSet:
    """Fixed clean batch plus one frozen noise/timestep draw per task."""

    batch: MediaBatch
    draws: dict

    @classmethod
    def build(cls, samples, seed: int, tasks=TASK_ORDER) -> "ValidationSet":
        batch = MediaBatch.from_samples(samples)
        draws = {}
        for kind in tasks:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x76616C, TASK_ORDER.index(kind)]))
            draws[kind] = draw_flows(batch, rng)
        return cls(batch, draws)

    def evaluate(self, model, tasks=None, chunk: int = 16) -> dict:
        out = {}
        n = self.batch.batch
        with nx.no_grad():
            for kind in tasks or self.draws:
                draw = self.draws[kind]
                total = 0.0
                for lo in range(0, n, chunk):
                    sl = slice(lo, min(lo + chunk, n))
                    sub = MediaBatch(self.batch.video[sl], self.batch.audio[sl],
                                     self.batch.video_caption[sl], self.batch.audio_caption[sl])
                    sub_draw = _slice_draw(draw, sl)
                    total += task_loss(model, sub, kind, sub_draw).item() * (sl.stop - sl.start)
                out[kind] = total / n
        return out


def _slice_draw(draw, sl):
    from .flow import FlowBatch
    from .tasks import FlowDraw

    def cut(fb):
        return FlowBatch(fb.x0[sl], fb.x1[sl], fb.t[sl], fb.x_t[sl], fb.u[sl])

    return FlowDraw(cut(draw.video), cut(draw.audio))


@dataclass
class TrainResult:
    rows: list
    validation: list  # (step, {task: loss})
    state: CurriculumState


def train(model, dataset, cfg: StageConfig, state: CurriculumState | None = None, *, seed: int = 0,
          val_set: ValidationSet | None = None, on_checkpoint: Callable | None = None,
          checkpoint_every: int | None = None) -> TrainResult:
    """Run the three stages for ``cfg.stage_steps``; returns log rows and validation history.

    ``dataset`` is a list of samples carrying ``quality`` tags.  Stage
    advancement happens exactly at the configured step boundaries.
    """
    state = state or CurriculumState.initial(cfg)
    enabled = cfg.enabled()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x747261]))
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rates[state.stage - 1], clip_norm=cfg.grad_clip)
    pools = {1: list(dataset), 2: list(dataset), 3: filter_quality(dataset, cfg.quality_threshold)}
    if not pools[1]:
        raise TrainingError("empty training set")
    if cfg.stage_steps[2] and not pools[3]:
        raise TrainingError(f"no sample reaches quality threshold {cfg.quality_threshold}")
    rows: list[LogRow] = []
    validation = []

    def validate(step):
        if val_set is None:
            return None
        if validation and validation[-1][0] == step:
            return validation[-1][1]
        metrics = val_set.evaluate(model, [k for k in TASK_ORDER if k in cfg.tasks])
        for k, v in metrics.items():
            state.metric_history[k].append((step, v))
        validation.append((step, metrics))
        log.info("step %d validation %s", step, {k.value: round(v, 5) for k, v in metrics.items()})
        return metrics

    validate(state.step)
    total = cfg.total_steps
    while state.step < total:
        while state.stage < 3 and state.step >= cfg.stage_end(state.stage):
            prev = state.stage
            advance_stage(state, cfg)
            opt.set_lr(cfg.learning_rates[state.stage - 1])
            log.info("stage %s -> %s at step %d", STAGE_NAMES[prev], STAGE_NAMES[state.stage], state.step)
        if state.stage == 2 and (state.step - cfg.stage_end(1)) % cfg.rebalance_period == 0:
            metrics = validate(state.step) if val_set is not None else None
            if metrics is not None:
                rebalance(state, metrics, cfg.tau, cfg.weight_floor, enabled)
                state.check(cfg.weight_floor, enabled)

        kind = next_task(state, rng)
        pool = pools[state.stage]
        idx = rng.integers(len(pool), size=cfg.batch_size)
        batch = MediaBatch.from_samples([pool[i] for i in idx])
        flows = draw_flows(batch, rng)
        opt.zero_grad()
        loss = task_loss(model, batch, kind, flows)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {state.step} "
                                f"(stage {STAGE_NAMES[state.stage]}, task {kind.value})")
        loss.backward()
        opt.step()
        state.step += 1
        if state.step % cfg.log_period == 0 or state.step == total:
            rows.append(LogRow(state.step, state.stage, kind, value, state.task_weights.copy()))
        if state.step % cfg.val_period == 0 and state.step != total:
            validate(state.step)
        if on_checkpoint is not None and checkpoint_every and state.step % checkpoint_every == 0:
            on_checkpoint(state.step, model)
    validate(state.step)
    return TrainResult(rows, validation, state)
