import numpy as np
import pytest

from avtower.numerics import Tensor
from avtower.rope import (PositionGrid, RopeConfig, apply_rope, build_audio_positions, build_text_positions,
                          build_video_positions, rotation_angles)


def rotation_matrix(pos, cfg):
    """Block-diagonal rotation for one (t, h, w) position, built pair by pair."""
    d = cfg.head_dim
    r = np.eye(d)
    col = 0
    for axis, d_axis in enumerate(cfg.axis_split):
        for i in range(d_axis // 2):
            theta = pos[axis] * cfg.base_theta ** (-2 * i / d_axis)
            c, s = np.cos(theta), np.sin(theta)
            r[col:col + 2, col:col + 2] = [[c, -s], [s, c]]
            col += 2
    return r


def rotate(vec, coords, cfg, rotate=True):
    grid = PositionGrid(np.array([coords]), np.array([rotate]))
    return apply_rope(Tensor(vec.reshape(1, 1, -1)), grid, cfg).data.reshape(-1)


def test_default_config():
    cfg = RopeConfig(16)
    assert cfg.axis_split == (8, 4, 4) and cfg.base_theta == 10000.0 and cfg.audio_time_mode == "offset"
    for bad in (dict(head_dim=7), dict(head_dim=8, axis_split=(4, 2, 1)), dict(head_dim=8, axis_split=(4, 2, 4)),
                dict(head_dim=8, base_theta=1.0), dict(head_dim=8, audio_time_mode="x")):
        with pytest.raises(ValueError):
            RopeConfig(**bad)


def test_video_positions():
    assert build_video_positions(1, 1, 1).coords.tolist() == [[0, 0, 0]]
    assert build_video_positions(2, 1, 2).coords.tolist() == [[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 0, 1]]
    g = build_video_positions(3, 2, 2)
    assert len(g) == 12 and g.t.max() == 2
    with pytest.raises(ValueError):
        build_video_positions(0, 1, 1)


def test_audio_positions():
    assert build_audio_positions(3, 2).t.tolist() == [3, 4, 5]
    assert build_audio_positions(1, 0).t.tolist() == [1]
    g = build_audio_positions(5, 4)
    assert np.all(g.coords[:, 1:] == 0)
    with pytest.raises(ValueError):
        build_audio_positions(0, 3)


def test_audio_positions_random_lengths_and_bundle_offset():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        frames, h, w = (int(x) for x in rng.integers(1, 6, size=3))
        audio_len = int(rng.integers(1, 40))
        video = build_video_positions(frames, h, w)
        audio = build_audio_positions(audio_len, int(video.t.max()))
        assert len(audio) == audio_len
        assert np.all(np.diff(audio.t) > 0)
        assert audio.t.min() == video.t.max() + 1


def test_shared_clock_mode_overlaps_video_range():
    g = build_audio_positions(8, 3, mode="shared_clock", video_frames=4)
    assert g.t.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]


def test_apply_rope_matches_explicit_rotation_matrices():
    cfg = RopeConfig(12, axis_split=(4, 4, 4), base_theta=100.0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        pos = rng.integers(0, 20, size=3)
        x = rng.standard_normal(12)
        np.testing.assert_allclose(rotate(x, pos, cfg), rotation_matrix(pos, cfg) @ x, atol=1e-12)


def test_zero_positions_identity_and_text_unrotated():
    cfg = RopeConfig(8)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 3, 8))
    grid = PositionGrid(np.zeros((5, 3)), np.ones(5, bool))
    assert np.array_equal(apply_rope(Tensor(x), grid, cfg).data, x)
    text = build_text_positions(5)
    text.coords[:] = 7  # position values are ignored for non-rotating tokens
    assert np.array_equal(apply_rope(Tensor(x), text, cfg).data, x)


def test_audio_rotates_only_temporal_block():
    cfg = RopeConfig(16)
    x = np.random.default_rng(3).standard_normal(16)
    y = rotate(x, build_audio_positions(1, 4).coords[0], cfg)
    d_t = cfg.axis_split[0]
    assert not np.allclose(y[:d_t], x[:d_t])
    assert np.array_equal(y[d_t:], x[d_t:])


def test_norm_preserved_per_token_and_head():
    cfg = RopeConfig(16)
    rng = np.random.default_rng(4)
    grid = PositionGrid.concat([build_video_positions(3, 2, 2), build_text_positions(2), build_audio_positions(6, 2)])
    x = rng.standard_normal((2, len(grid), 4, 16))
    y = apply_rope(Tensor(x), grid, cfg).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=0, atol=1e-6)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_relative_shift_invariance_per_axis(axis):
    cfg = RopeConfig(16)
    rng = np.random.default_rng(10 + axis)
    for _ in range(200):
        q, k = rng.standard_normal(16), rng.standard_normal(16)
        m, n = rng.integers(0, 50, size=3), rng.integers(0, 50, size=3)
        delta = np.zeros(3, int)
        delta[axis] = rng.integers(1, 100)
        before = rotate(q, m, cfg) @ rotate(k, n, cfg)
        after = rotate(q, m + delta, cfg) @ rotate(k, n + delta, cfg)
        assert abs(before - after) < 1e-6


def test_temporal_subblock_relative_property():
    cfg = RopeConfig(16)
    d_t = cfg.axis_split[0]
    rng = np.random.default_rng(20)
    for _ in range(200):
        q, k = rng.standard_normal(16), rng.standard_normal(16)
        m, n, delta = rng.integers(0, 64, size=3)
        a = rotate(q, (m, 0, 0), cfg)[:d_t] @ rotate(k, (n, 0, 0), cfg)[:d_t]
        b = rotate(q, (m + delta, 0, 0), cfg)[:d_t] @ rotate(k, (n + delta, 0, 0), cfg)[:d_t]
        assert abs(a - b) < 1e-6


def test_audio_and_video_share_temporal_rotation():
    cfg = RopeConfig(16)
    d_t = cfg.axis_split[0]
    audio = build_audio_positions(4, 2)  # t = 3..6
    video = build_video_positions(7, 2, 2)
    a_ang = rotation_angles(audio, cfg)
    for i, t in enumerate(audio.t):
        j = int(np.flatnonzero(video.t == t)[0])
        v_ang = rotation_angles(video.slice(j, j + 1), cfg)[0]
        ra = rotation_matrix(audio.coords[i], cfg)[:d_t, :d_t]
        rv = rotation_matrix(video.coords[j], cfg)[:d_t, :d_t]
        assert np.array_equal(a_ang[i, :d_t // 2], v_ang[:d_t // 2])
        assert np.array_equal(ra, rv)


def test_dimension_mismatch_errors():
    cfg = RopeConfig(8)
    grid = build_video_positions(1, 1, 2)
    with pytest.raises(ValueError):
        apply_rope(Tensor(np.zeros((2, 1, 6))), grid, cfg)
    with pytest.raises(ValueError):
        apply_rope(Tensor(np.zeros((3, 1, 8))), grid, cfg)
