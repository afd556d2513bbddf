"""Per-task loss masking, first-frame conditioning and the summed multi-task objective."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import flow
from . import numerics as nx
from .attention import TASK_ORDER, TaskKind
from .numerics import ShapeError, Tensor


@dataclass
class TaskSpec:
    kind: TaskKind
    image_condition: np.ndarray | None = None

    def __post_init__(self):
        self.kind = TaskKind.parse(self.kind)
        if self.kind.image_conditioned and self.image_condition is None:
            raise ValueError(f"{self.kind.value} requires an image condition")
        if not self.kind.image_conditioned and self.image_condition is not None:
            raise ValueError(f"{self.kind.value} takes no image condition")


@dataclass
class LossWeights:
    t2v: float = 1.0
    t2a: float = 1.0
    t2av: float = 1.0
    i2v: float = 1.0
    i2av: float = 1.0

    def __post_init__(self):
        vals = [self[k] for k in TASK_ORDER]
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError("loss weights must be non-negative with at least one positive")

    def __getitem__(self, kind) -> float:
        return getattr(self, TaskKind.parse(kind).value)


@dataclass
class MediaBatch:
    """Clean latents and captions for a homogeneous micro-batch."""

    video: np.ndarray  # (B, T, H, W, C_v)
    audio: np.ndarray  # (B, T_a, C_a)
    video_caption: list
    audio_caption: list

    @classmethod
    def from_samples(cls, samples) -> "MediaBatch":
        return cls(np.stack([s.video_latent for s in samples]), np.stack([s.audio_latent for s in samples]),
                   [list(s.video_caption) for s in samples], [list(s.audio_caption) for s in samples])

    @property
    def batch(self) -> int:
        return self.video.shape[0]


@dataclass
class FlowDraw:
    video: flow.FlowBatch
    audio: flow.FlowBatch

    @property
    def t(self) -> np.ndarray:
        return self.video.t


def draw_flows(batch: MediaBatch, rng: np.random.Generator) -> FlowDraw:
    """Independent noise per modality, one shared timestep per sample."""
    t = flow.sample_t(rng, batch.batch)
    return FlowDraw(flow.make_flow_batch(batch.video, rng, t), flow.make_flow_batch(batch.audio, rng, t))


def apply_image_conditioning(x_t: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """Replace temporal slice 0 of (B, T, H, W, C) latents with the clean frame."""
    x_t = np.array(x_t, copy=True)
    frame = np.asarray(frame)
    if frame.shape != x_t[:, 0].shape:
        raise ShapeError(f"conditioning frame {frame.shape} does not match latent frame {x_t[:, 0].shape}")
    x_t[:, 0] = frame
    return x_t


def loss_token_weights(task, batch: int, video_shape: tuple[int, int, int], audio_len: int, patch: int = 1):
    """0/1 per-token loss weights (video (B, L_V), audio (B, L_A)) for a task."""
    kind = TaskKind.parse(task)
    frames, height, width = video_shape
    per_frame = (height // patch) * (width // patch)
    wv = np.full((batch, frames * per_frame), 1.0 if kind.uses_video else 0.0)
    if kind.image_conditioned:
        wv[:, :per_frame] = 0.0
    wa = np.full((batch, audio_len), 1.0 if kind.uses_audio else 0.0)
    return wv, wa


def mask_media_loss(pred_video: Tensor, pred_audio: Tensor, task, video_shape, patch: int = 1):
    """Zero the prediction tokens that a task's loss ignores; returns the masked
    predictions and the weights used."""
    batch = pred_video.shape[0] if pred_video.size else pred_audio.shape[0]
    if pred_video.shape[1] != int(np.prod(video_shape)) // (patch * patch):
        raise ShapeError("video prediction does not match the video shape")
    wv, wa = loss_token_weights(task, batch, video_shape, pred_audio.shape[1], patch)
    mv = nx.mul(pred_video, Tensor(wv[..., None].astype(pred_video.dtype)))
    ma = nx.mul(pred_audio, Tensor(wa[..., None].astype(pred_audio.dtype)))
    return mv, ma, (wv, wa)


def _default_predict(model, bundle, t, kind):
    from . import mmdit
    return mmdit.forward(model, bundle, t, kind)


def task_loss(model, batch: MediaBatch, task, flows: FlowDraw | None = None,
              rng: np.random.Generator | None = None, predict: Callable | None = None) -> Tensor:
    """Flow-matching loss of one task on one micro-batch.

    Inputs follow the straight path at the drawn timesteps; image-conditioned
    tasks see the clean first frame in place of its interpolant and get no
    loss on it.  Streams outside the task are neither attended nor scored.
    """
    from . import mmdit

    spec = task if isinstance(task, TaskSpec) else None
    kind = spec.kind if spec else TaskKind.parse(task)
    if flows is None:
        if rng is None:
            raise ValueError("task_loss needs either pre-drawn flows or an rng")
        flows = draw_flows(batch, rng)
    cfg = model.cfg
    video_shape = batch.video.shape[1:4]
    if kind.uses_video and batch.video.size == 0:
        raise ValueError(f"task {kind.value} needs a video latent")
    if kind.uses_audio and batch.audio.size == 0:
        raise ValueError(f"task {kind.value} needs an audio latent")

    x_video = flows.video.x_t
    if kind.image_conditioned:
        frame = spec.image_condition if spec is not None else batch.video[:, 0]
        x_video = apply_image_conditioning(x_video, frame)
    bundle = mmdit.embed_inputs(model, x_video, flows.audio.x_t, batch.video_caption, batch.audio_caption)
    pv, pa = (predict or _default_predict)(model, bundle, flows.t, kind)
    wv, wa = loss_token_weights(kind, batch.batch, video_shape, batch.audio.shape[1], cfg.patch_size)
    uv = mmdit.video_grid_to_tokens(flows.video.u, cfg)
    return flow.velocity_mse([pv, pa], [uv, flows.audio.u], [wv, wa])


def overall_loss(model, items: Sequence[tuple[MediaBatch, object]], weights: LossWeights | None = None,
                 loss_fn: Callable | None = None, **kwargs) -> Tensor:
    """Weighted sum over task kinds of the mean task loss of that kind's micro-batches."""
    if not items:
        raise ValueError("overall_loss needs at least one (batch, task) item")
    weights = weights or LossWeights()
    loss_fn = loss_fn or task_loss
    groups: "OrderedDict[TaskKind, list]" = OrderedDict((k, []) for k in TASK_ORDER)
    for batch, task in items:
        kind = task.kind if isinstance(task, TaskSpec) else TaskKind.parse(task)
        groups[kind].append((batch, task))
    total = None
    for kind, group in groups.items():
        if not group or weights[kind] == 0:
            continue
        losses = [loss_fn(model, b, t, **kwargs) for b, t in group]
        acc = losses[0]
        for extra in losses[1:]:
            acc = nx.add(acc, extra)
        term = nx.mul(acc, weights[kind] / len(losses))
        total = term if total is None else nx.add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return total
