"""Finite-difference checks for every differentiable operation and a tiny full model."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import mmdit
from . import numerics as nx
from .attention import TaskKind, build_task_mask, omni_attention
from .numerics import GradCheckReport, Tensor, grad_check
from .rope import RopeConfig, apply_rope, build_audio_positions, build_text_positions, build_video_positions, \
    PositionGrid
from .synthdata import GeneratorConfig, generate
from .tasks import MediaBatch, draw_flows, task_loss

EPS = 1e-5
TOL = 1e-4


def _projected(fn: Callable, rng: np.random.Generator) -> Callable:
    """Wrap ``fn`` into a scalar via a fixed random projection of its output."""
    weights = {}

    def scalar(*xs):
        out = fn(*xs)
        outs = out if isinstance(out, (list, tuple)) else [out]
        total = None
        for i, o in enumerate(outs):
            if i not in weights:
                weights[i] = rng.standard_normal(o.shape)
            term = nx.tsum(nx.mul(o, Tensor(weights[i])))
            total = term if total is None else nx.add(total, term)
        return total

    return scalar


def _t(rng, *shape, positive=False) -> Tensor:
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def tiny_model_config(rope: RopeConfig | None = None, layers: int = 2, d_model: int = 16) -> mmdit.ModelConfig:
    heads = 2
    base = rope or RopeConfig(d_model // heads)
    rope = RopeConfig(d_model // heads, None, base.base_theta, base.audio_time_mode)
    return mmdit.ModelConfig(layers=layers, d_model=d_model, heads=heads, ff_dim=2 * d_model, rope=rope,
                             video_latent_channels=3, audio_latent_channels=2, n_events=3, max_frames=2,
                             max_height=2, max_width=1, max_audio_len=4, max_caption_len=4, time_embed_dim=8,
                             dtype="f64", zero_init=False)


def op_checks(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    grid = PositionGrid.concat([build_video_positions(2, 1, 2), build_text_positions(1), build_audio_positions(2, 1)])
    rope = RopeConfig(8)
    mask = build_task_mask((4, 1, 0, 2), TaskKind.T2V)
    ids = rng.integers(0, 5, size=(2, 3))
    angles = rng.uniform(-3, 3, size=(3, 1, 2))
    cond = rng.random((2, 3, 4)) > 0.3
    return [
        ("add", nx.add, [_t(rng, 2, 3, 4), _t(rng, 3, 1)]),
        ("sub", nx.sub, [_t(rng, 2, 3), _t(rng, 2, 3)]),
        ("mul", nx.mul, [_t(rng, 2, 1, 3, 2), _t(rng, 4, 3, 1)]),
        ("div", nx.div, [_t(rng, 3, 4), _t(rng, 3, 4, positive=True)]),
        ("square", nx.square, [_t(rng, 2, 2, 3)]),
        ("exp", nx.exp, [_t(rng, 3, 3)]),
        ("gelu", nx.gelu, [_t(rng, 2, 3, 2, 2)]),
        ("silu", nx.silu, [_t(rng, 4, 3)]),
        ("where", lambda x: nx.where(cond, x, -7.0), [_t(rng, 2, 3, 4)]),
        ("sum", lambda x: nx.tsum(x, axis=1), [_t(rng, 2, 3, 4)]),
        ("mean", lambda x: nx.mean(x, axis=(0, 2), keepdims=True), [_t(rng, 2, 3, 4)]),
        ("matmul", nx.matmul, [_t(rng, 2, 3, 4), _t(rng, 4, 5)]),
        ("linear", nx.linear, [_t(rng, 2, 3, 4), _t(rng, 4, 2), _t(rng, 2)]),
        ("softmax", lambda x: nx.softmax(x, axis=-2), [_t(rng, 2, 4, 3)]),
        ("rms_norm", lambda x, g: nx.rms_norm(x, g, 1e-6), [_t(rng, 2, 3, 5), _t(rng, 5)]),
        ("reshape", lambda x: nx.reshape(x, (4, 6)), [_t(rng, 2, 3, 4)]),
        ("transpose", lambda x: nx.transpose(x, (2, 0, 3, 1)), [_t(rng, 2, 3, 2, 2)]),
        ("concat", lambda a, b: nx.concat([a, b], axis=1), [_t(rng, 2, 1, 3), _t(rng, 2, 4, 3)]),
        ("split", lambda x: nx.split(x, [1, 0, 3], axis=2), [_t(rng, 2, 3, 4)]),
        ("embedding", lambda table: nx.embedding(table, ids), [_t(rng, 5, 3)]),
        ("rotate_pairs", lambda x: nx.rotate_pairs(x, np.cos(angles), np.sin(angles)), [_t(rng, 3, 2, 4)]),
        ("apply_rope", lambda x: apply_rope(x, grid, rope), [_t(rng, 2, len(grid), 2, 8)]),
        ("omni_attention", lambda q, k, v: omni_attention(q, k, v, mask, grid, rope),
         [_t(rng, 2, len(grid), 2, 8), _t(rng, 2, len(grid), 2, 8), _t(rng, 2, len(grid), 2, 8)]),
    ]


def _tiny_batch(seed: int = 0) -> MediaBatch:
    data = GeneratorConfig(seed=seed, n_events=3, frames=2, height=2, width=1, audio_len=4, video_channels=3,
                           audio_channels=2, noise_sigma=0.1, switch_prob=0.5)
    return MediaBatch.from_samples(generate(data, 2))


def model_checks(rng: np.random.Generator, rope: RopeConfig | None = None):
    cfg = tiny_model_config(rope)
    model = mmdit.MMDiT.init(cfg, seed=int(rng.integers(1 << 31)))
    batch = _tiny_batch()
    flows = draw_flows(batch, np.random.default_rng(int(rng.integers(1 << 31))))
    names = list(model.params)

    def with_params(fn):
        def run(*tensors):
            model.params = dict(zip(names, tensors))
            return fn()
        return run

    def block_loss():
        bundle = mmdit.embed_inputs(model, batch.video, batch.audio, batch.video_caption, batch.audio_caption)
        cond = mmdit.timestep_embedding(model, flows.t)
        mask = build_task_mask(bundle.lengths, TaskKind.T2AV).restrict(bundle.valid)
        out = mmdit.block_forward(model, 0, bundle, cond, mask)
        return nx.add(nx.tsum(nx.square(out.video)), nx.tsum(nx.square(out.audio)))

    def full_loss():
        return task_loss(model, batch, TaskKind.T2AV, flows)

    params = [model.params[n] for n in names]
    return [
        ("block_forward", with_params(block_loss), params),
        ("mmdit_full_loss", with_params(full_loss), params),
    ]


def run_all(seed: int = 0, rope: RopeConfig | None = None, eps: float = EPS, tol: float = TOL,
            max_elements: int = 6) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for name, fn, inputs in op_checks(rng):
        reports.append(grad_check(_projected(fn, rng), inputs, eps, tol, name=name))
    for name, fn, inputs in model_checks(rng, rope):
        reports.append(grad_check(fn, inputs, eps, tol, name=name, max_elements=max_elements, rng=rng))
    return reports
