"""Conditional flow matching on straight noise-to-data paths, and an Euler sampler."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import tasks
from .attention import TaskKind
from .numerics import ShapeError, Tensor


@dataclass
class FlowBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray  # (batch,)
    x_t: np.ndarray
    u: np.ndarray


def _expand_t(t, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(x0, x1, t) -> np.ndarray:
    """(1 - t) * x0 + t * x1, with per-sample ``t`` broadcast over trailing axes."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: x0 {x0.shape} and x1 {x1.shape} differ")
    tt = _expand_t(t, x0.ndim)
    if np.any(tt < 0) or np.any(tt > 1):
        raise ValueError("t must lie in [0, 1]")
    return (1.0 - tt) * x0 + tt * x1


def sample_t(rng: np.random.Generator, size=None):
    """Uniform draws strictly inside (0, 1)."""
    t = rng.random(size)
    zero = t == 0.0
    while np.any(zero):
        if np.ndim(t) == 0:
            t = rng.random()
            zero = t == 0.0
        else:
            t[zero] = rng.random(int(np.sum(zero)))
            zero = t == 0.0
    return t


def make_flow_batch(x1: np.ndarray, rng: np.random.Generator, t: np.ndarray | None = None) -> FlowBatch:
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = sample_t(rng, x1.shape[0])
    t = np.asarray(t, dtype=np.float64)
    return FlowBatch(x0, x1, t, interpolate(x0, x1, t), x1 - x0)


def velocity_mse(preds: Sequence[Tensor], targets: Sequence[np.ndarray],
                 weights: Sequence[np.ndarray | None] | None = None) -> Tensor:
    """Pooled mean squared error over every unmasked element of every stream.

    ``weights`` are 0/1 per token (batch, L) or ``None`` for all-on; masked
    tokens contribute nothing to the sum or the count.
    """
    if weights is None:
        weights = [None] * len(preds)
    total = None
    count = 0.0
    for pred, target, w in zip(preds, targets, weights):
        target = np.asarray(target, dtype=pred.dtype)
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
        if pred.size == 0:
            continue
        if w is None:
            w = np.ones(pred.shape[:2])
        w = np.asarray(w, dtype=pred.dtype)
        w_full = w.reshape(w.shape + (1,) * (pred.ndim - w.ndim))
        n = float(np.sum(np.broadcast_to(w_full, pred.shape)))
        if n == 0:
            continue
        err = nx.square(nx.sub(pred, Tensor(target)))
        term = nx.tsum(nx.mul(err, Tensor(w_full)))
        total = term if total is None else nx.add(total, term)
        count += n
    if total is None:
        raise ValueError("every token is masked; loss undefined")
    return nx.mul(total, 1.0 / count)


def fm_loss(model: Callable, batch: FlowBatch, conditions=None, task=None, weights=None) -> Tensor:
    """Flow-matching loss of a velocity model ``model(x_t, t, conditions, task) -> Tensor``."""
    pred = model(Tensor(batch.x_t), batch.t, conditions, task)
    w = None if weights is None else [weights]
    return velocity_mse([pred], [batch.u], w)


@dataclass
class SamplerConfig:
    steps: int = 50
    schedule: np.ndarray | None = None
    seed: int = 0
    guidance_scale: float | None = None

    def __post_init__(self):
        if self.schedule is None:
            if self.steps < 1:
                raise ValueError("steps must be >= 1")
            self.schedule = np.linspace(0.0, 1.0, self.steps + 1)
        else:
            self.schedule = np.asarray(self.schedule, dtype=np.float64)
            self.steps = len(self.schedule) - 1
        validate_schedule(self.schedule)


def validate_schedule(schedule: np.ndarray) -> None:
    s = np.asarray(schedule, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("schedule needs at least two grid points")
    if s[0] != 0.0 or s[-1] != 1.0:
        raise ValueError("schedule must start at 0 and end at 1")
    if np.any(np.diff(s) <= 0):
        raise ValueError("schedule must be strictly increasing")


def euler_integrate(velocity: Callable, z0, schedule, project: Callable | None = None):
    """z <- z + (t_{k+1} - t_k) * velocity(z, t_k) across the grid.

    ``z0`` may be an array or a tuple of arrays (one per modality); ``project``
    is applied after every update (used to pin conditioning frames).
    """
    validate_schedule(schedule)
    single = not isinstance(z0, tuple)
    z = (z0,) if single else z0
    z = tuple(np.array(a, copy=True) for a in z)
    if project is not None:
        z = project(z)
    for k in range(len(schedule) - 1):
        t, dt = schedule[k], schedule[k + 1] - schedule[k]
        v = velocity(z[0] if single else z, t)
        v = (v,) if single else v
        z = tuple(a + dt * np.asarray(b, dtype=a.dtype) for a, b in zip(z, v))
        if project is not None:
            z = project(z)
    return z[0] if single else z


@dataclass
class Conditions:
    """What a sampling run conditions on: captions, latent extents, optional first frames."""

    video_caption: list = field(default_factory=list)
    audio_caption: list = field(default_factory=list)
    video_shape: tuple[int, int, int] = (8, 2, 2)
    audio_len: int = 64
    image: np.ndarray | None = None  # (batch, H, W, C_v)

    @property
    def batch(self) -> int:
        return max(len(self.video_caption), len(self.audio_caption), 1 if self.image is None else len(self.image))


def euler_sample(model, conditions: Conditions, task, cfg: SamplerConfig):
    """Generate latents for ``task``; returns (video (B,T,H,W,C), audio (B,T_a,C)).

    Streams the task does not generate come back with a zero-length time axis.
    """
    from . import mmdit

    spec = task if isinstance(task, tasks.TaskSpec) else tasks.TaskSpec(TaskKind.parse(task), conditions.image)
    kind = spec.kind
    mcfg = model.cfg
    batch = conditions.batch
    frames, height, width = conditions.video_shape
    video_seed, audio_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    dtype = nx.resolve_dtype(mcfg.dtype)
    z_video = np.random.default_rng(video_seed).standard_normal(
        (batch, frames, height, width, mcfg.video_latent_channels)).astype(dtype)
    z_audio = np.random.default_rng(audio_seed).standard_normal(
        (batch, conditions.audio_len, mcfg.audio_latent_channels)).astype(dtype)

    vcap = conditions.video_caption if kind.uses_video else None
    acap = conditions.audio_caption if kind.uses_audio else None
    if kind.uses_video and not vcap:
        vcap = [[] for _ in range(batch)]
    if kind.uses_audio and not acap:
        acap = [[] for _ in range(batch)]

    def predict(zv, za, t, vc, ac):
        bundle = mmdit.embed_inputs(model, zv if kind.uses_video else None, za if kind.uses_audio else None,
                                    vc, ac, video_frames=frames)
        pv, pa = mmdit.forward(model, bundle, t, kind)
        pv = mmdit.video_tokens_to_grid(pv.data, (frames, height, width), mcfg) if kind.uses_video else zv * 0
        pa = pa.data if kind.uses_audio else za * 0
        return pv, pa

    def velocity(z, t):
        with nx.no_grad():
            pv, pa = predict(z[0], z[1], t, vcap, acap)
            if cfg.guidance_scale is not None:
                empty = [[] for _ in range(batch)]
                uv, ua = predict(z[0], z[1], t, empty if vcap is not None else None, empty if acap is not None else None)
                pv = uv + cfg.guidance_scale * (pv - uv)
                pa = ua + cfg.guidance_scale * (pa - ua)
        return pv, pa

    project = None
    if kind.image_conditioned:
        if spec.image_condition is None:
            raise ValueError(f"task {kind.value} needs an image condition")
        image = np.asarray(spec.image_condition, dtype=dtype)

        def project(z):
            return (tasks.apply_image_conditioning(z[0], image), z[1])

    zv, za = euler_integrate(velocity, (z_video, z_audio), cfg.schedule, project)
    if not kind.uses_video:
        zv = zv[:, :0]
    if not kind.uses_audio:
        za = za[:, :0]
    return zv, za
