"""Single-tower multimodal diffusion transformer.

One set of attention and feedforward weights processes all four streams;
each stream gets its own norms and timestep-driven modulation (shift, scale,
gate).  Gates and velocity heads start at zero, so a fresh model predicts a
zero velocity field.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import STREAMS, AttentionMask, StreamBundle, TaskKind, build_task_mask, omni_attention
from .captions import PAD, CaptionVocab, pad_captions, token_spans
from .numerics import ShapeError, Tensor
from .rope import (PositionGrid, RopeConfig, build_audio_positions, build_text_positions, build_video_positions,
                   temporal_features)

MEDIA = ("video", "audio")


@dataclass
class ModelConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    ff_dim: int = 512
    rope: RopeConfig | None = None
    video_latent_channels: int = 8
    audio_latent_channels: int = 8
    n_events: int = 8
    max_frames: int = 8
    max_height: int = 2
    max_width: int = 2
    max_audio_len: int = 64
    max_caption_len: int = 16
    patch_size: int = 1
    time_embed_dim: int = 64
    norm_eps: float = 1e-6
    dtype: str = "f32"
    zero_init: bool = True
    # latent-rate constants of the full-size system; carried for reporting only
    audio_rate_hz: float = 43.0
    audio_downsample: int = 1024
    video_rate_hz: float = 3.0
    video_spatial_compression: int = 16

    def __post_init__(self):
        for name in ("layers", "time_embed_dim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("d_model", "heads", "ff_dim", "video_latent_channels", "audio_latent_channels", "n_events",
                     "max_frames", "max_height", "max_width", "max_audio_len", "patch_size",
                     "audio_downsample", "video_spatial_compression"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_caption_len < 0:
            raise ValueError("max_caption_len must be >= 0")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.ff_dim < self.d_model:
            raise ValueError("ff_dim must be >= d_model")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.audio_rate_hz <= 0 or self.video_rate_hz <= 0:
            raise ValueError("latent rates must be positive")
        if self.rope is None:
            self.rope = RopeConfig(self.head_dim)
        if self.rope.head_dim != self.head_dim:
            raise ValueError(f"rope head_dim {self.rope.head_dim} != d_model / heads = {self.head_dim}")
        nx.resolve_dtype(self.dtype)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def vocab(self) -> CaptionVocab:
        return CaptionVocab(self.n_events, self.max_frames)

    @property
    def caption_vocab(self) -> int:
        return self.vocab.size

    @property
    def video_out(self) -> int:
        return self.video_latent_channels * self.patch_size * self.patch_size

    @property
    def caption_feature_dim(self) -> int:
        # cos/sin at span start, centre and end
        return 3 * self.rope.axis_split[0]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.d_model, cfg.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.video.w": (cfg.video_out, d), "embed.video.b": (d,),
        "embed.audio.w": (cfg.audio_latent_channels, d), "embed.audio.b": (d,),
        "embed.caption": (cfg.caption_vocab, d),
        "embed.caption_time.w": (cfg.caption_feature_dim, d),
        "time.w1": (cfg.time_embed_dim, d), "time.b1": (d,),
        "time.w2": (d, d), "time.b2": (d,),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        for s in STREAMS:
            shapes[p + f"mod.{s}.w"] = (d, 6 * d)
            shapes[p + f"mod.{s}.b"] = (6 * d,)
            shapes[p + f"norm1.{s}"] = (d,)
            shapes[p + f"norm2.{s}"] = (d,)
        shapes.update({
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "out.w": (d, d), p + "out.b": (d,),
            p + "ff1.w": (d, ff), p + "ff1.b": (ff,),
            p + "ff2.w": (ff, d), p + "ff2.b": (d,),
        })
    for m, c in (("video", cfg.video_out), ("audio", cfg.audio_latent_channels)):
        shapes[f"final.{m}.mod.w"] = (d, 2 * d)
        shapes[f"final.{m}.mod.b"] = (2 * d,)
        shapes[f"final.{m}.norm"] = (d,)
        shapes[f"head.{m}.w"] = (d, c)
        shapes[f"head.{m}.b"] = (c,)
    return shapes


def _zero_at_init(name: str) -> bool:
    return ".mod." in name or name.startswith("head.")


class MMDiT:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "MMDiT":
        rng = np.random.default_rng(seed)
        dtype = nx.resolve_dtype(cfg.dtype)
        params = {}
        for name, shape in parameter_shapes(cfg).items():
            if name.split(".")[-1].startswith("norm") or ".norm" in name:
                arr = np.ones(shape)
                if not cfg.zero_init:
                    arr = arr + 0.1 * rng.standard_normal(shape)
            elif cfg.zero_init and _zero_at_init(name):
                arr = np.zeros(shape)
            elif name == "embed.caption":
                arr = rng.standard_normal(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape) if cfg.zero_init else 0.1 * rng.standard_normal(shape)
            else:
                arr = rng.standard_normal(shape) / math.sqrt(shape[0])
            params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        return cls(cfg, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = parameter_shapes(self.cfg)
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise KeyError(f"state dict mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, shape in expected.items():
            if tuple(state[k].shape) != shape:
                raise ShapeError(f"{k}: expected {shape}, got {state[k].shape}")
            self.params[k] = Tensor(np.array(state[k]), requires_grad=True)

    def to_dtype(self, dtype: str) -> "MMDiT":
        cfg = ModelConfig(**{**self.cfg.__dict__, "dtype": dtype})
        dt = nx.resolve_dtype(dtype)
        return MMDiT(cfg, {k: Tensor(v.data.astype(dt), requires_grad=True) for k, v in self.params.items()})


def count_parameters(model_or_cfg) -> int:
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, MMDiT) else model_or_cfg
    return int(sum(int(np.prod(s)) for s in parameter_shapes(cfg).values()))


# -- inputs ---------------------------------------------------------------
def _caption_features(ids: np.ndarray, mode: str, media_t: np.ndarray, rate: int, cfg: ModelConfig) -> np.ndarray:
    """Temporal features (batch, L, 3*d_t) for the span each caption token describes,
    expressed in the temporal position IDs of the media tokens it covers."""
    feats = np.zeros(ids.shape + (cfg.caption_feature_dim,))
    for b, row in enumerate(ids):
        spans = token_spans(row, mode, cfg.vocab)
        real = row != PAD
        if not real.any():
            continue
        lo, hi = spans[real, 0] * rate, spans[real, 1] * rate
        if hi.max() > len(media_t):
            raise ShapeError(f"{mode} caption covers {hi.max() // rate} frames, more than the latent holds")
        start = media_t[lo].astype(np.float64)
        end = media_t[hi - 1].astype(np.float64)
        centre = 0.5 * (start + end)
        feats[b, real] = np.concatenate([temporal_features(x, cfg.rope) for x in (start, centre, end)], axis=1)
    return feats


def _embed_caption(model: MMDiT, ids: np.ndarray, feats: np.ndarray) -> Tensor:
    cfg = model.cfg
    dtype = nx.resolve_dtype(cfg.dtype)
    if ids.shape[1] == 0:
        return Tensor(np.zeros((ids.shape[0], 0, cfg.d_model), dtype=dtype))
    tok = nx.embedding(model["embed.caption"], ids)
    return nx.add(tok, nx.matmul(Tensor(feats.astype(dtype)), model["embed.caption_time.w"]))


def _as_array(x, dtype) -> np.ndarray:
    return (x.data if isinstance(x, Tensor) else np.asarray(x)).astype(dtype, copy=False)


def embed_inputs(model: MMDiT, video_latent, audio_latent, video_caption=None, audio_caption=None,
                 video_frames: int | None = None) -> StreamBundle:
    """Project latents and captions into a :class:`StreamBundle`.

    ``video_latent``: (batch, T, H, W, C_v); ``audio_latent``: (batch, T_a, C_a).
    Captions are ragged lists of token lists (or padded int arrays).  Either
    latent may be ``None``, giving an empty stream; without video the audio
    clock is anchored at ``video_frames`` (default ``max_frames``).
    """
    cfg = model.cfg
    dtype = nx.resolve_dtype(cfg.dtype)
    d = cfg.d_model
    if video_latent is None and audio_latent is None:
        raise ValueError("need at least one media latent")
    batch = (video_latent if video_latent is not None else audio_latent).shape[0]

    p = cfg.patch_size
    if video_latent is not None:
        v = _as_array(video_latent, dtype)
        if v.ndim != 5 or v.shape[-1] != cfg.video_latent_channels:
            raise ShapeError(f"video latent must be (batch, T, H, W, {cfg.video_latent_channels}), got {v.shape}")
        frames, height, width = v.shape[1:4]
        if frames > cfg.max_frames or height > cfg.max_height or width > cfg.max_width:
            raise ValueError(f"video extent {(frames, height, width)} exceeds configured maximum")
        if height % p or width % p:
            raise ShapeError(f"video height/width must be divisible by patch size {p}")
        gh, gw = height // p, width // p
        patches = v.reshape(batch, frames, gh, p, gw, p, -1).transpose(0, 1, 2, 4, 3, 5, 6)
        patches = patches.reshape(batch, frames * gh * gw, -1)
        video = nx.linear(Tensor(patches), model["embed.video.w"], model["embed.video.b"])
        vgrid = build_video_positions(frames, gh, gw)
        video_max_t = frames - 1
    else:
        frames = video_frames if video_frames is not None else cfg.max_frames
        gh = gw = 0
        video = Tensor(np.zeros((batch, 0, d), dtype=dtype))
        vgrid = PositionGrid(np.zeros((0, 3)), np.zeros(0, bool))
        video_max_t = frames - 1

    if audio_latent is not None:
        a = _as_array(audio_latent, dtype)
        if a.ndim != 3 or a.shape[-1] != cfg.audio_latent_channels or a.shape[0] != batch:
            raise ShapeError(f"audio latent must be (batch, T_a, {cfg.audio_latent_channels}), got {a.shape}")
        audio_len = a.shape[1]
        if audio_len > cfg.max_audio_len:
            raise ValueError(f"audio length {audio_len} exceeds maximum {cfg.max_audio_len}")
        audio = nx.linear(Tensor(a), model["embed.audio.w"], model["embed.audio.b"])
        agrid = build_audio_positions(audio_len, video_max_t, cfg.rope.audio_time_mode, video_frames=frames)
    else:
        audio_len = 0
        audio = Tensor(np.zeros((batch, 0, d), dtype=dtype))
        agrid = PositionGrid(np.zeros((0, 3)), np.zeros(0, bool))

    caps = {}
    for mode, cap in (("video", video_caption), ("audio", audio_caption)):
        if cap is None:
            cap = [[] for _ in range(batch)]
        if isinstance(cap, np.ndarray) and cap.ndim == 2:
            ids = cap.astype(np.int64)
            valid = ids != PAD
        else:
            ids, valid = pad_captions(cap)
        if ids.shape[0] != batch:
            raise ShapeError(f"{mode} caption batch {ids.shape[0]} != latent batch {batch}")
        if ids.shape[1] > cfg.max_caption_len:
            raise ValueError(f"{mode} caption length {ids.shape[1]} exceeds maximum {cfg.max_caption_len}")
        if ids.size and ids.max() >= cfg.caption_vocab:
            raise ValueError(f"{mode} caption token {ids.max()} overflows vocabulary of {cfg.caption_vocab}")
        if mode == "video":
            media_t = vgrid.t[:: gh * gw] if len(vgrid) else np.arange(frames)
            rate = 1
        else:
            media_t = agrid.t if len(agrid) else np.arange(frames)
            rate = max(audio_len // frames, 1) if len(agrid) else 1
        feats = _caption_features(ids, mode, media_t, rate, cfg)
        caps[mode] = (_embed_caption(model, ids, feats), valid)

    lengths = (video.shape[1], caps["video"][0].shape[1], caps["audio"][0].shape[1], audio.shape[1])
    positions = PositionGrid.concat([vgrid, build_text_positions(lengths[1]), build_text_positions(lengths[2]), agrid])
    valid = np.concatenate([np.ones((batch, lengths[0]), bool), caps["video"][1], caps["audio"][1],
                            np.ones((batch, lengths[3]), bool)], axis=1)
    meta = {"video_shape": (frames, gh * p, gw * p) if video_latent is not None else None,
            "audio_len": audio_len}
    return StreamBundle(video, caps["video"][0], caps["audio"][0], audio, positions,
                        valid=None if valid.all() else valid, meta=meta)


# -- conditioning ---------------------------------------------------------
def timestep_sinusoid(t, dim: int, dtype=np.float64) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


def timestep_embedding(model: MMDiT, t) -> Tensor:
    cfg = model.cfg
    s = Tensor(timestep_sinusoid(t, cfg.time_embed_dim, nx.resolve_dtype(cfg.dtype)))
    h = nx.silu(nx.linear(s, model["time.w1"], model["time.b1"]))
    return nx.linear(h, model["time.w2"], model["time.b2"])


def _modulation(model: MMDiT, key: str, cond: Tensor, parts: int) -> list[Tensor]:
    d = model.cfg.d_model
    m = nx.linear(cond, model[key + ".w"], model[key + ".b"])
    m = nx.reshape(m, (m.shape[0], 1, parts * d))
    return nx.split(m, [d] * parts, axis=2)


def _modulate(x: Tensor, gain: Tensor, shift: Tensor, scale: Tensor, eps: float) -> Tensor:
    h = nx.rms_norm(x, gain, eps)
    return nx.add(nx.mul(h, nx.add(scale, 1.0)), shift)


def block_forward(model: MMDiT, index: int, bundle: StreamBundle, cond: Tensor, mask: AttentionMask) -> StreamBundle:
    """One joint block: x += gate * Attn(mod(norm(x))); x += gate * FF(mod(norm(x))).

    Tokens outside ``mask`` receive a zero residual in both sublayers.
    """
    cfg = model.cfg
    p = f"blocks.{index}."
    d, heads, hd = cfg.d_model, cfg.heads, cfg.head_dim
    silu_c = nx.silu(cond)
    offsets = bundle.offsets()
    active = mask.batched(bundle.batch)
    gates = {}
    normed1, normed2 = [], []
    for s in STREAMS:
        sh1, sc1, g1, sh2, sc2, g2 = _modulation(model, p + f"mod.{s}", silu_c, 6)
        gates[s] = (g1, g2, sh2, sc2)
        normed1.append(_modulate(bundle.stream(s), model[p + f"norm1.{s}"], sh1, sc1, cfg.norm_eps))

    h = nx.concat(normed1, axis=1)
    batch, length = h.shape[0], h.shape[1]
    qkv = nx.linear(h, model[p + "qkv.w"], model[p + "qkv.b"])
    q, k, v = (nx.reshape(t, (batch, length, heads, hd)) for t in nx.split(qkv, [d, d, d], axis=2))
    a = omni_attention(q, k, v, mask, bundle.positions, cfg.rope)
    a = nx.linear(nx.reshape(a, (batch, length, d)), model[p + "out.w"], model[p + "out.b"])
    attn_parts = nx.split(a, bundle.lengths, axis=1)

    updated = {}
    for i, s in enumerate(STREAMS):
        g1, g2, sh2, sc2 = gates[s]
        act = Tensor(active[:, offsets[i]:offsets[i + 1], None].astype(h.dtype))
        x = nx.add(bundle.stream(s), nx.mul(nx.mul(attn_parts[i], g1), act))
        updated[s] = x
        normed2.append(_modulate(x, model[p + f"norm2.{s}"], sh2, sc2, cfg.norm_eps))

    f = nx.concat(normed2, axis=1)
    f = nx.gelu(nx.linear(f, model[p + "ff1.w"], model[p + "ff1.b"]))
    f = nx.linear(f, model[p + "ff2.w"], model[p + "ff2.b"])
    ff_parts = nx.split(f, bundle.lengths, axis=1)
    for i, s in enumerate(STREAMS):
        g2 = gates[s][1]
        act = Tensor(active[:, offsets[i]:offsets[i + 1], None].astype(h.dtype))
        updated[s] = nx.add(updated[s], nx.mul(nx.mul(ff_parts[i], g2), act))
    return bundle.with_streams(**updated)


def task_attention_mask(bundle: StreamBundle, task) -> AttentionMask:
    return build_task_mask(bundle.lengths, task).restrict(bundle.valid)


def forward(model: MMDiT, bundle: StreamBundle, t, task) -> tuple[Tensor, Tensor]:
    """Predicted velocities (v_video (batch, L_V, C_v*p*p), v_audio (batch, L_A, C_a)).

    Streams the task does not generate come back as exact zeros.
    """
    cfg = model.cfg
    task = TaskKind.parse(task)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (bundle.batch,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("timesteps must lie in [0, 1]")
    mask = task_attention_mask(bundle, task)
    cond = timestep_embedding(model, t)
    for i in range(cfg.layers):
        bundle = block_forward(model, i, bundle, cond, mask)
    silu_c = nx.silu(cond)
    dtype = nx.resolve_dtype(cfg.dtype)
    outs = []
    for m, on, width in (("video", task.uses_video, cfg.video_out),
                         ("audio", task.uses_audio, cfg.audio_latent_channels)):
        x = bundle.stream(m)
        if not on or x.shape[1] == 0:
            outs.append(Tensor(np.zeros((bundle.batch, x.shape[1], width), dtype=dtype)))
            continue
        shift, scale = _modulation(model, f"final.{m}.mod", silu_c, 2)
        h = _modulate(x, model[f"final.{m}.norm"], shift, scale, cfg.norm_eps)
        outs.append(nx.linear(h, model[f"head.{m}.w"], model[f"head.{m}.b"]))
    return outs[0], outs[1]


def video_tokens_to_grid(v: np.ndarray, shape: tuple[int, int, int], cfg: ModelConfig) -> np.ndarray:
    """Invert the patch flattening: (batch, L_V, C*p*p) -> (batch, T, H, W, C)."""
    frames, height, width = shape
    p = cfg.patch_size
    gh, gw = height // p, width // p
    x = np.asarray(v).reshape(v.shape[0], frames, gh, gw, p, p, cfg.video_latent_channels)
    return x.transpose(0, 1, 2, 4, 3, 5, 6).reshape(v.shape[0], frames, height, width, -1)


def video_grid_to_tokens(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    batch, frames, height, width, c = x.shape
    p = cfg.patch_size
    y = x.reshape(batch, frames, height // p, p, width // p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
    return y.reshape(batch, -1, p * p * c)
