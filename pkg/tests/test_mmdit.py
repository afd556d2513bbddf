import dataclasses

import numpy as np
import pytest

from avtower import mmdit
from avtower import numerics as nx
from avtower.attention import TaskKind, build_task_mask
from avtower.numerics import Tensor

from oracles import (closed_form_parameter_count, masking_equivalence_diffs, random_inputs, small_model_config)


def test_toy_parameter_count_matches_closed_form():
    cfg = mmdit.ModelConfig()
    assert mmdit.count_parameters(cfg) == closed_form_parameter_count(cfg) == 2_486_160
    small = small_model_config("f64", layers=3)
    assert mmdit.count_parameters(small) == closed_form_parameter_count(small)


def test_doubling_layers_doubles_block_subtotal_and_zero_layers():
    cfg = mmdit.ModelConfig(layers=3)
    zero = mmdit.count_parameters(dataclasses.replace(cfg, layers=0))
    blocks = mmdit.count_parameters(cfg) - zero
    assert mmdit.count_parameters(dataclasses.replace(cfg, layers=6)) - zero == 2 * blocks
    assert not any(k.startswith("blocks.") for k in mmdit.parameter_shapes(dataclasses.replace(cfg, layers=0)))


def test_config_validation():
    with pytest.raises(ValueError):
        mmdit.ModelConfig(d_model=30, heads=4)
    with pytest.raises(ValueError):
        mmdit.ModelConfig(ff_dim=64)


def test_embed_inputs_shapes_and_positions():
    cfg = small_model_config("f64")
    model = mmdit.MMDiT.init(cfg, seed=0)
    video = np.zeros((1, 2, 2, 2, 3))
    audio = np.zeros((1, 8, 2))
    b = mmdit.embed_inputs(model, video, audio, [[]], [[]])
    assert b.lengths == (8, 0, 0, 8)
    t = b.positions.t
    assert t[8:].min() == t[:8].max() + 1
    with pytest.raises(ValueError):
        mmdit.embed_inputs(model, np.zeros((1, 4, 2, 2, 3)), audio)
    with pytest.raises(ValueError):
        mmdit.embed_inputs(model, video, audio, [[cfg.caption_vocab]], [[]])


def test_fresh_model_outputs_exact_zero():
    cfg = small_model_config("f32", zero_init=True)
    model = mmdit.MMDiT.init(cfg, seed=1)
    rng = np.random.default_rng(1)
    video, audio, vc, ac, t = random_inputs(rng, cfg)
    for task in TaskKind:
        b = mmdit.embed_inputs(model, video, audio, vc, ac)
        pv, pa = mmdit.forward(model, b, t, task)
        assert np.all(pv.data == 0) and np.all(pa.data == 0)


def test_zero_gates_make_block_identity_and_masked_tokens_unchanged():
    cfg = small_model_config("f64")
    model = mmdit.MMDiT.init(cfg, seed=2)
    rng = np.random.default_rng(2)
    video, audio, vc, ac, t = random_inputs(rng, cfg)
    bundle = mmdit.embed_inputs(model, video, audio, vc, ac)
    cond = mmdit.timestep_embedding(model, t)

    mask = build_task_mask(bundle.lengths, TaskKind.T2V).restrict(bundle.valid)
    out = mmdit.block_forward(model, 0, bundle, cond, mask)
    assert np.array_equal(out.audio.data, bundle.audio.data)
    assert np.array_equal(out.audio_text.data, bundle.audio_text.data)
    assert not np.allclose(out.video.data, bundle.video.data)

    zeroed = mmdit.MMDiT(cfg, dict(model.params))
    for s in ("video", "video_text", "audio_text", "audio"):
        w = zeroed.params[f"blocks.0.mod.{s}.w"].data.copy()
        b = zeroed.params[f"blocks.0.mod.{s}.b"].data.copy()
        d = cfg.d_model
        for gate in (2, 5):
            w[:, gate * d:(gate + 1) * d] = 0
            b[gate * d:(gate + 1) * d] = 0
        zeroed.params[f"blocks.0.mod.{s}.w"] = Tensor(w)
        zeroed.params[f"blocks.0.mod.{s}.b"] = Tensor(b)
    full = build_task_mask(bundle.lengths, TaskKind.T2AV).restrict(bundle.valid)
    out = mmdit.block_forward(zeroed, 0, bundle, cond, full)
    for s in ("video", "video_text", "audio_text", "audio"):
        assert np.array_equal(out.stream(s).data, bundle.stream(s).data)


def test_t2v_audio_velocity_exactly_zero():
    cfg = small_model_config("f32")
    model = mmdit.MMDiT.init(cfg, seed=3)
    video, audio, vc, ac, t = random_inputs(np.random.default_rng(3), cfg)
    pv, pa = mmdit.forward(model, mmdit.embed_inputs(model, video, audio, vc, ac), t, TaskKind.T2V)
    assert np.all(pa.data == 0) and np.any(pv.data != 0)


@pytest.mark.parametrize("dtype,tol", [("f32", 1e-5), ("f64", 1e-10)])
def test_masking_equivalence_reduced_bundle(dtype, tol):
    for seed in range(10):
        dv, da = masking_equivalence_diffs(seed, dtype)
        assert dv < tol and da < tol, (seed, dv, da)


def test_masking_equivalence_via_bundle_without():
    cfg = small_model_config("f64")
    model = mmdit.MMDiT.init(cfg, seed=4)
    video, audio, vc, ac, t = random_inputs(np.random.default_rng(4), cfg)
    full = mmdit.embed_inputs(model, video, audio, vc, ac)
    pv, _ = mmdit.forward(model, full, t, TaskKind.T2V)
    full = mmdit.embed_inputs(model, video, audio, vc, ac)
    pv2, _ = mmdit.forward(model, full.without("audio_text", "audio"), t, TaskKind.T2V)
    assert np.max(np.abs(pv.data - pv2.data)) < 1e-10


def test_forward_deterministic():
    cfg = small_model_config("f32")
    model = mmdit.MMDiT.init(cfg, seed=5)
    video, audio, vc, ac, t = random_inputs(np.random.default_rng(5), cfg)
    outs = [mmdit.forward(model, mmdit.embed_inputs(model, video, audio, vc, ac), t, "t2av") for _ in range(2)]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(*outs))


def test_empty_caption_allowed():
    cfg = small_model_config("f64")
    model = mmdit.MMDiT.init(cfg, seed=6)
    video, audio, _, _, t = random_inputs(np.random.default_rng(6), cfg)
    b = mmdit.embed_inputs(model, video, audio, None, None)
    assert b.lengths[1] == 0 and b.lengths[2] == 0
    mmdit.forward(model, b, t, "t2av")


def test_block_gradient_check():
    cfg = small_model_config("f64")
    model = mmdit.MMDiT.init(cfg, seed=7)
    video, audio, vc, ac, t = random_inputs(np.random.default_rng(7), cfg)
    names = [n for n in model.params if n.startswith("blocks.0.")]

    def loss(*ps):
        for n, p in zip(names, ps):
            model.params[n] = p
        b = mmdit.embed_inputs(model, video, audio, vc, ac)
        cond = mmdit.timestep_embedding(model, t)
        mask = build_task_mask(b.lengths, "t2av").restrict(b.valid)
        out = mmdit.block_forward(model, 0, b, cond, mask)
        return nx.add(nx.tsum(nx.square(out.video)), nx.tsum(nx.square(out.audio)))

    r = nx.grad_check(loss, [model.params[n] for n in names], max_elements=4, rng=np.random.default_rng(0))
    assert r.passed, r.line()


def test_state_dict_round_trip_and_dtype_cast():
    cfg = small_model_config("f32")
    model = mmdit.MMDiT.init(cfg, seed=8)
    other = mmdit.MMDiT.init(cfg, seed=9)
    other.load_state_dict(model.state_dict())
    assert all(np.array_equal(model[k].data, other[k].data) for k in model.params)
    assert model.to_dtype("f64")["time.w1"].dtype == np.float64
    with pytest.raises(KeyError):
        other.load_state_dict({})


def test_video_token_grid_round_trip():
    cfg = dataclasses.replace(small_model_config("f64"), patch_size=2)
    x = np.random.default_rng(10).standard_normal((2, 3, 2, 2, 3))
    tokens = mmdit.video_grid_to_tokens(x, cfg)
    assert tokens.shape == (2, 3, 12)
    assert np.array_equal(mmdit.video_tokens_to_grid(tokens, (3, 2, 2), cfg), x)
