"""Joint attention over the four token streams with token-level task masks."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .rope import PositionGrid, RopeConfig, apply_rope

# canonical concatenation order
STREAMS = ("video", "video_text", "audio_text", "audio")


class TaskKind(str, enum.Enum):
    T2V = "t2v"
    T2A = "t2a"
    T2AV = "t2av"
    I2V = "i2v"
    I2AV = "i2av"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown task {value!r}; expected one of {[k.value for k in cls]}") from None

    @property
    def uses_video(self) -> bool:
        return self is not TaskKind.T2A

    @property
    def uses_audio(self) -> bool:
        return self in (TaskKind.T2A, TaskKind.T2AV, TaskKind.I2AV)

    @property
    def image_conditioned(self) -> bool:
        return self in (TaskKind.I2V, TaskKind.I2AV)

    @property
    def active_streams(self) -> tuple[str, ...]:
        streams = []
        if self.uses_video:
            streams += ["video", "video_text"]
        if self.uses_audio:
            streams += ["audio_text", "audio"]
        return tuple(s for s in STREAMS if s in streams)


TASK_ORDER = (TaskKind.T2V, TaskKind.T2A, TaskKind.T2AV, TaskKind.I2V, TaskKind.I2AV)


@dataclass
class StreamBundle:
    """Hidden states of the four streams, each (batch, tokens, d_model).

    ``valid`` marks real (non-padding) tokens over the concatenated sequence,
    shape (batch, total); ``None`` means every token is real.
    """

    video: Tensor
    video_text: Tensor
    audio_text: Tensor
    audio: Tensor
    positions: PositionGrid
    valid: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.positions) != self.total:
            raise ShapeError(f"position grid covers {len(self.positions)} tokens, bundle has {self.total}")

    def stream(self, name: str) -> Tensor:
        return getattr(self, name)

    @property
    def lengths(self) -> tuple[int, int, int, int]:
        return tuple(self.stream(s).shape[1] for s in STREAMS)

    @property
    def total(self) -> int:
        return sum(self.lengths)

    @property
    def batch(self) -> int:
        return self.video.shape[0]

    def offsets(self) -> list[int]:
        return [0, *np.cumsum(self.lengths).tolist()]

    def stream_valid(self, name: str) -> np.ndarray:
        """Validity mask (batch, L_s) for one stream."""
        off = self.offsets()
        i = STREAMS.index(name)
        if self.valid is None:
            return np.ones((self.batch, self.lengths[i]), bool)
        return self.valid[:, off[i]:off[i + 1]]

    def with_streams(self, **streams: Tensor) -> "StreamBundle":
        return replace(self, **streams)

    def without(self, *names: str) -> "StreamBundle":
        """Drop whole streams, keeping the remaining tokens' positions and validity."""
        off = self.offsets()
        keep = np.ones(self.total, bool)
        updates = {}
        for name in names:
            i = STREAMS.index(name)
            keep[off[i]:off[i + 1]] = False
            t = self.stream(name)
            updates[name] = Tensor(np.zeros((t.shape[0], 0, t.shape[2]), dtype=t.dtype))
        positions = PositionGrid(self.positions.coords[keep], self.positions.rotate[keep])
        valid = None if self.valid is None else self.valid[:, keep]
        return replace(self, positions=positions, valid=valid, **updates)


@dataclass(frozen=True)
class SegmentTable:
    lengths: tuple[int, int, int, int]
    positions: PositionGrid
    valid: np.ndarray | None = None

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple([0, *np.cumsum(self.lengths).tolist()])


@dataclass
class AttentionMask:
    """Token-level on/off mask over the concatenated sequence: (L,) or (batch, L)."""

    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        rows = self.active.reshape(-1, self.active.shape[-1]) if self.active.size else self.active.reshape(1, -1)
        if not rows.any(axis=-1).all():
            raise ValueError("attention mask has no active token")

    def __len__(self) -> int:
        return self.active.shape[-1]

    def restrict(self, valid: np.ndarray | None) -> "AttentionMask":
        if valid is None:
            return self
        return AttentionMask(np.logical_and(self.active, valid))

    def batched(self, batch: int) -> np.ndarray:
        return np.broadcast_to(self.active, (batch, len(self)))


def build_task_mask(lengths, task) -> AttentionMask:
    """Activate exactly the streams the task generates or conditions on."""
    task = TaskKind.parse(task)
    lengths = tuple(int(n) for n in lengths)
    if len(lengths) != 4 or min(lengths) < 0:
        raise ValueError(f"lengths must be four non-negative counts, got {lengths}")
    if task.uses_video and lengths[0] == 0:
        raise ValueError(f"task {task.value} needs video tokens but the video stream is empty")
    if task.uses_audio and lengths[3] == 0:
        raise ValueError(f"task {task.value} needs audio tokens but the audio stream is empty")
    active = np.concatenate([np.full(n, s in task.active_streams) for s, n in zip(STREAMS, lengths)])
    return AttentionMask(active)


def concat_streams(bundle: StreamBundle) -> tuple[Tensor, SegmentTable]:
    widths = {bundle.stream(s).shape[-1] for s in STREAMS}
    if len(widths) != 1:
        raise ShapeError(f"streams disagree on d_model: {[bundle.stream(s).shape for s in STREAMS]}")
    x = nx.concat([bundle.stream(s) for s in STREAMS], axis=1)
    return x, SegmentTable(bundle.lengths, bundle.positions, bundle.valid)


def split_streams(x: Tensor, table: SegmentTable) -> StreamBundle:
    if x.shape[1] != sum(table.lengths):
        raise ShapeError(f"sequence length {x.shape[1]} does not match segment table {table.lengths}")
    parts = nx.split(x, table.lengths, axis=1)
    return StreamBundle(*parts, positions=table.positions, valid=table.valid)


def _neg_fill(dtype) -> float:
    return float(np.finfo(dtype).min)


def omni_attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | None,
                   positions: PositionGrid | None = None, rope: RopeConfig | None = None) -> Tensor:
    """Masked scaled-dot-product attention over (batch, L, heads, head_dim) inputs.

    Inactive keys are excluded from every softmax and inactive query rows
    produce exact zeros.
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim == 3:
        q, k, v = (nx.reshape(t, (1, *t.shape)) for t in (q, k, v))
        return nx.reshape(omni_attention(q, k, v, mask, positions, rope), q.shape[1:])
    batch, length, _, head_dim = q.shape
    if mask is not None and len(mask) != length:
        raise ShapeError(f"mask length {len(mask)} does not match sequence length {length}")
    if positions is not None and rope is not None:
        q = apply_rope(q, positions, rope)
        k = apply_rope(k, positions, rope)
    qh = nx.transpose(q, (0, 2, 1, 3))
    kt = nx.transpose(k, (0, 2, 3, 1))
    vh = nx.transpose(v, (0, 2, 1, 3))
    scores = nx.mul(nx.matmul(qh, kt), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        active = mask.batched(batch)
        scores = nx.where(active[:, None, None, :], scores, _neg_fill(scores.dtype))
    probs = nx.softmax(scores, axis=-1)
    out = nx.transpose(nx.matmul(probs, vh), (0, 2, 1, 3))
    if mask is not None:
        out = nx.mul(out, Tensor(active[:, :, None, None].astype(out.dtype)))
    return out
