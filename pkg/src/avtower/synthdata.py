"""Paired audio/video/caption samples driven by a hidden event process.

Each sample draws a piecewise-constant event sequence over ``frames`` video
steps.  Video cells and audio frames are the event's codebook vector plus
Gaussian noise; audio runs ``rate`` frames per video frame.  Because the event
sequence is known, cross-modal alignment of any generated pair can be scored
exactly by nearest-codebook decoding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .captions import CaptionVocab, caption_tokens


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_events: int = 8
    frames: int = 8
    height: int = 2
    width: int = 2
    audio_len: int = 64
    video_channels: int = 8
    audio_channels: int = 8
    noise_sigma: float = 0.1
    switch_prob: float = 0.2
    quality: str = "uniform"

    def __post_init__(self):
        if self.n_events < 2:
            raise ValueError("n_events must be >= 2")
        if min(self.frames, self.height, self.width, self.audio_len) < 1:
            raise ValueError("latent extents must be >= 1")
        if self.audio_len % self.frames:
            raise ValueError(f"audio_len {self.audio_len} must be divisible by frames {self.frames}")
        if self.video_channels < 1 or self.audio_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.switch_prob <= 1:
            raise ValueError("switch_prob must lie in [0, 1]")
        if self.quality != "uniform":
            raise ValueError(f"unsupported quality distribution {self.quality!r}")

    @property
    def rate(self) -> int:
        return self.audio_len // self.frames

    @property
    def vocab(self) -> CaptionVocab:
        return CaptionVocab(self.n_events, self.frames)


@dataclass
class Codebooks:
    video: np.ndarray  # (K, C_v)
    audio: np.ndarray  # (K, C_a)

    def min_separation(self) -> float:
        return min(_min_pairwise(self.video), _min_pairwise(self.audio))


@dataclass
class SynthSample:
    events: np.ndarray        # (T,)
    video_latent: np.ndarray  # (T, H, W, C_v)
    audio_latent: np.ndarray  # (T_a, C_a)
    video_caption: list[int]
    audio_caption: list[int]
    quality: float


def _min_pairwise(book: np.ndarray) -> float:
    d = np.linalg.norm(book[:, None, :] - book[None, :, :], axis=-1)
    return float(d[~np.eye(len(book), dtype=bool)].min())


def _codebook(rng: np.random.Generator, k: int, c: int) -> np.ndarray:
    # orthonormal rows scaled so each coordinate is O(1), like unit-variance noise
    g = rng.standard_normal((max(k, c), c))
    if k <= c:
        q, _ = np.linalg.qr(g.T)
        book = q.T[:k]
    else:
        book = g[:k] / np.linalg.norm(g[:k], axis=1, keepdims=True)
    return book * np.sqrt(c)


def make_codebooks(cfg: GeneratorConfig) -> Codebooks:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x636F6465]))
    return Codebooks(_codebook(rng, cfg.n_events, cfg.video_channels),
                     _codebook(rng, cfg.n_events, cfg.audio_channels))


def sample_events(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    """Piecewise-constant events; each frame switches with ``switch_prob`` (geometric dwell)."""
    events = np.empty(cfg.frames, dtype=np.int64)
    events[0] = rng.integers(cfg.n_events)
    for t in range(1, cfg.frames):
        if rng.random() < cfg.switch_prob:
            events[t] = (events[t - 1] + rng.integers(1, cfg.n_events)) % cfg.n_events
        else:
            events[t] = events[t - 1]
    return events


def render(events, cfg: GeneratorConfig, books: Codebooks, rng: np.random.Generator | None = None):
    """Latents for a given event sequence; noise-free when ``rng`` is None."""
    events = np.asarray(events, dtype=np.int64)
    video = np.broadcast_to(books.video[events][:, None, None, :],
                            (cfg.frames, cfg.height, cfg.width, cfg.video_channels)).copy()
    audio = books.audio[np.repeat(events, cfg.rate)].copy()
    if rng is not None and cfg.noise_sigma > 0:
        video += cfg.noise_sigma * rng.standard_normal(video.shape)
        audio += cfg.noise_sigma * rng.standard_normal(audio.shape)
    return video, audio


def generate_one(cfg: GeneratorConfig, index: int, books: Codebooks | None = None) -> SynthSample:
    books = books or make_codebooks(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    events = sample_events(rng, cfg)
    video, audio = render(events, cfg, books, rng)
    return SynthSample(
        events=events,
        video_latent=video,
        audio_latent=audio,
        video_caption=caption_tokens(events, "video", cfg.vocab),
        audio_caption=caption_tokens(events, "audio", cfg.vocab),
        quality=float(rng.random()),
    )


def generate(cfg: GeneratorConfig, n: int, start: int = 0) -> list[SynthSample]:
    """Samples ``start .. start+n-1``; sample i depends only on (cfg, i)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    books = make_codebooks(cfg)
    return [generate_one(cfg, start + i, books) for i in range(n)]


def decode_video(video_latent: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Per-frame event by nearest codebook entry per cell, then a spatial majority vote."""
    v = np.asarray(video_latent, dtype=np.float64)
    cells = v.reshape(v.shape[0], -1, v.shape[-1])
    d = ((cells[:, :, None, :] - book[None, None]) ** 2).sum(-1)
    votes = d.argmin(-1)
    return np.array([np.bincount(row, minlength=len(book)).argmax() for row in votes])


def decode_audio(audio_latent: np.ndarray, book: np.ndarray) -> np.ndarray:
    a = np.asarray(audio_latent, dtype=np.float64)
    return ((a[:, None, :] - book[None]) ** 2).sum(-1).argmin(-1)


def oracle_alignment(video_latent, audio_latent, books: Codebooks) -> float:
    """Fraction of video frames whose decoded event matches the majority decoded
    event of the audio frames aligned with it."""
    frames = np.asarray(video_latent).shape[0]
    audio_len = np.asarray(audio_latent).shape[0]
    if frames == 0 or audio_len == 0 or audio_len % frames:
        raise ValueError(f"audio length {audio_len} is not a positive multiple of {frames} video frames")
    rate = audio_len // frames
    v_events = decode_video(video_latent, books.video)
    a_frames = decode_audio(audio_latent, books.audio).reshape(frames, rate)
    a_events = np.array([np.bincount(row, minlength=len(books.audio)).argmax() for row in a_frames])
    return float(np.mean(v_events == a_events))
