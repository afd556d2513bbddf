"""Mixed-dimension rotary positions.

Video tokens rotate on three axis sub-blocks (time, height, width); audio
tokens carry only a temporal coordinate and continue the video clock after
its last frame; caption tokens are left unrotated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, Tensor, rotate_pairs

AUDIO_TIME_MODES = ("offset", "shared_clock")


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int, int] | None = None
    base_theta: float = 10000.0
    audio_time_mode: str = "offset"

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.axis_split is None:
            d_t = self.head_dim // 2
            d_hw = self.head_dim // 4
            object.__setattr__(self, "axis_split", (d_t, d_hw, self.head_dim - d_t - d_hw))
        split = tuple(int(s) for s in self.axis_split)
        object.__setattr__(self, "axis_split", split)
        if len(split) != 3 or sum(split) != self.head_dim:
            raise ValueError(f"axis_split {split} must have three parts summing to head_dim {self.head_dim}")
        if any(s < 0 or s % 2 for s in split):
            raise ValueError(f"axis_split {split} must be non-negative and even")
        if not self.base_theta > 1:
            raise ValueError("base_theta must exceed 1")
        if self.audio_time_mode not in AUDIO_TIME_MODES:
            raise ValueError(f"audio_time_mode must be one of {AUDIO_TIME_MODES}")

    def frequencies(self) -> list[np.ndarray]:
        """Per-axis inverse frequencies ``base^(-2i/d_axis)``."""
        return [self.base_theta ** (-np.arange(0, d, 2, dtype=np.float64) / d) if d else np.zeros(0)
                for d in self.axis_split]


@dataclass
class PositionGrid:
    """Per-token (t, h, w) triples plus a flag for whether the token rotates."""

    coords: np.ndarray  # (N, 3) int64
    rotate: np.ndarray  # (N,) bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.rotate = np.asarray(self.rotate, dtype=bool).reshape(-1)
        if len(self.coords) != len(self.rotate):
            raise ShapeError("coords and rotate flags differ in length")
        if (self.coords < 0).any():
            raise ValueError("positions must be non-negative")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def t(self) -> np.ndarray:
        return self.coords[:, 0]

    def slice(self, lo: int, hi: int) -> "PositionGrid":
        return PositionGrid(self.coords[lo:hi], self.rotate[lo:hi])

    @staticmethod
    def concat(grids) -> "PositionGrid":
        grids = list(grids)
        if not grids:
            return PositionGrid(np.zeros((0, 3)), np.zeros(0, bool))
        return PositionGrid(np.concatenate([g.coords for g in grids]), np.concatenate([g.rotate for g in grids]))


def build_video_positions(frames: int, height: int, width: int) -> PositionGrid:
    if min(frames, height, width) < 1:
        raise ValueError(f"video extents must be >= 1, got {(frames, height, width)}")
    t, h, w = np.meshgrid(np.arange(frames), np.arange(height), np.arange(width), indexing="ij")
    coords = np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)
    return PositionGrid(coords, np.ones(len(coords), bool))


def build_audio_positions(audio_len: int, video_max_t: int, mode: str = "offset",
                          video_frames: int | None = None) -> PositionGrid:
    """Temporal IDs for audio tokens.

    ``offset`` numbers audio frames from ``video_max_t + 1`` upward.
    ``shared_clock`` maps audio frame k onto the video frame it overlaps,
    ``k * video_frames // audio_len``, so IDs repeat and are not strictly
    increasing.
    """
    if audio_len < 1:
        raise ValueError("audio_len must be >= 1")
    if video_max_t < 0:
        raise ValueError("video_max_t must be >= 0")
    k = np.arange(audio_len)
    if mode == "offset":
        t = video_max_t + 1 + k
    elif mode == "shared_clock":
        frames = video_max_t + 1 if video_frames is None else video_frames
        t = k * frames // audio_len
    else:
        raise ValueError(f"unknown audio time mode {mode!r}")
    coords = np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=1)
    return PositionGrid(coords, np.ones(audio_len, bool))


def build_text_positions(n: int) -> PositionGrid:
    return PositionGrid(np.zeros((n, 3)), np.zeros(n, bool))


def rotation_angles(grid: PositionGrid, cfg: RopeConfig) -> np.ndarray:
    """Angle applied to every coordinate pair: shape (tokens, head_dim // 2)."""
    parts = [grid.coords[:, axis, None].astype(np.float64) * freqs[None, :]
             for axis, freqs in enumerate(cfg.frequencies())]
    angles = np.concatenate(parts, axis=1)
    angles[~grid.rotate] = 0.0
    return angles


def apply_rope(qk: Tensor, grid: PositionGrid, cfg: RopeConfig) -> Tensor:
    """Rotate ``qk`` of shape (..., tokens, heads, head_dim) by the grid positions."""
    if qk.ndim < 3:
        raise ShapeError(f"apply_rope expects (..., tokens, heads, head_dim), got {qk.shape}")
    if qk.shape[-1] != cfg.head_dim:
        raise ShapeError(f"head_dim {qk.shape[-1]} does not match rope config {cfg.head_dim}")
    if qk.shape[-3] != len(grid):
        raise ShapeError(f"token count {qk.shape[-3]} does not match grid of {len(grid)} positions")
    angles = rotation_angles(grid, cfg)[:, None, :]
    return rotate_pairs(qk, np.cos(angles), np.sin(angles))


def temporal_features(centers: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """cos/sin of the temporal-axis angles at (possibly fractional) positions.

    Shape (n, d_t); lets caption embeddings express a time span in the same
    frequency basis that rotates media queries.
    """
    freqs = cfg.frequencies()[0]
    ang = np.asarray(centers, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
