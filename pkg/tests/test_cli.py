import csv

import numpy as np
import pytest

from avtower import checkpoint, cli, mmdit, numerics
from avtower.config import parse_text

TINY = """\
run.output_dir = {out}
run.checkpoint_every = 4
model.layers = 1
model.d_model = 16
model.heads = 2
model.ff_dim = 32
model.time_embed_dim = 8
curriculum.stage1_steps = 4
curriculum.stage2_steps = 2
curriculum.stage3_steps = 2
curriculum.batch_size = 2
curriculum.log_period = 2
curriculum.val_period = 4
curriculum.val_size = 4
curriculum.rebalance_period = 2
data.n_events = 4
data.frames = 3
data.audio_len = 12
data.video_channels = 3
data.audio_channels = 2
data.n_train = 32
flow.steps = 4
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY.format(out=root / "run"))
    assert cli.main(["train", str(cfg)]) == 0
    return root, cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_outputs(trained):
    root, _ = trained
    run = root / "run"
    assert sorted(p.name for p in run.iterdir()) == [
        "ckpt-000004.aplo", "ckpt-000008.aplo", "final.aplo", "metrics.csv", "validation.csv"]
    rows = read_csv(run / "metrics.csv")
    assert rows[0][:4] == ["step", "stage", "task", "loss"] and len(rows) == 1 + 4
    val = read_csv(run / "validation.csv")
    assert val[0] == ["step", "task", "loss"]
    assert sorted({int(r[0]) for r in val[1:]}) == [0, 4, 8]
    assert checkpoint.load(run / "final.aplo")[1].keys() == checkpoint.load(run / "ckpt-000008.aplo")[1].keys()


def test_loaded_model_matches_final_checkpoint(trained):
    root, _ = trained
    run, model = cli.load_model(root / "run" / "final.aplo")
    assert run.model.layers == 1 and run.data.n_events == 4
    _, tensors = checkpoint.load(root / "run" / "final.aplo")
    for k, v in model.state_dict().items():
        assert v.tobytes() == tensors[k].tobytes()


def test_sample_is_reproducible_and_task_shaped(trained, tmp_path):
    root, _ = trained
    ckpt = str(root / "run" / "final.aplo")
    for name in ("a", "b"):
        assert cli.main(["sample", ckpt, "--task", "t2v", "--events", "0,1,1", "--seed", "3",
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "sample.aplo").read_bytes() == (tmp_path / "b" / "sample.aplo").read_bytes()
    text, tensors = checkpoint.load(tmp_path / "a" / "sample.aplo")
    assert list(tensors) == ["video"] and tensors["video"].shape == (1, 3, 2, 2, 3)
    assert "task = t2v" in text and (tmp_path / "a" / "manifest.txt").read_text() == text

    assert cli.main(["sample", ckpt, "--task", "t2av", "--events", "2,2,3", "--batch", "2",
                     "--out", str(tmp_path / "c")]) == 0
    _, tensors = checkpoint.load(tmp_path / "c" / "sample.aplo")
    assert tensors["video"].shape == (2, 3, 2, 2, 3) and tensors["audio"].shape == (2, 12, 2)


def test_image_conditioned_sampling_keeps_frame(trained, tmp_path):
    root, _ = trained
    image = np.random.default_rng(0).standard_normal((2, 2, 3)).astype(np.float32)
    checkpoint.save(tmp_path / "img.aplo", {"image": image})
    assert cli.main(["sample", str(root / "run" / "final.aplo"), "--task", "i2av", "--events", "0,0,1",
                     "--image", str(tmp_path / "img.aplo"), "--out", str(tmp_path / "o")]) == 0
    _, tensors = checkpoint.load(tmp_path / "o" / "sample.aplo")
    assert np.array_equal(tensors["video"][0, 0], image)


def test_eval_writes_one_row_per_sample(trained, tmp_path, capsys):
    root, _ = trained
    assert cli.main(["eval", str(root / "run" / "final.aplo"), "--n", "5", "--out", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e" / "eval.csv")
    assert rows[0] == ["sample", "events", "alignment", "shuffled_alignment"] and len(rows) == 6
    summary = dict(read_csv(tmp_path / "e" / "summary.csv")[1:])
    assert {"mean_alignment", "shuffled_baseline", "chance_1_over_k", "val_loss_t2av"} <= set(summary)
    assert float(summary["chance_1_over_k"]) == 0.25
    captured = capsys.readouterr()
    assert captured.out == (tmp_path / "e" / "eval.csv").read_text()
    assert "mean_alignment" in captured.err


def test_untrained_model_aligns_no_better_than_shuffled(tmp_path):
    # zero-init heads leave the noise untouched, so video and audio decode independently
    run = parse_text(TINY.format(out=tmp_path).replace("data.n_events = 4", "data.n_events = 8"))
    model = mmdit.MMDiT.init(run.model, seed=0)
    _, aligned, shuffled, _ = cli.evaluate(run, model, n=400, steps=2, seed=0)
    assert abs(aligned.mean() - shuffled.mean()) < 0.05
    assert aligned.mean() < 0.3


@pytest.mark.parametrize("argv", [
    [],
    ["train"],
    ["train", "missing.cfg"],
    ["sample", "x.aplo", "--task", "t2v", "--events", "0,1,1"],
    ["eval", "x.aplo", "--n", "0", "--out", "never"],
    ["bogus"],
])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 1
    assert not (tmp_path / "never").exists()


def test_sample_usage_errors(trained, tmp_path):
    root, _ = trained
    ckpt = str(root / "run" / "final.aplo")
    base = ["sample", ckpt, "--out", str(tmp_path / "o")]
    assert cli.main(base + ["--task", "i2v", "--events", "0,1,1"]) == 1
    assert cli.main(base + ["--task", "t2v", "--events", "0,1"]) == 1
    assert cli.main(base + ["--task", "t2v", "--events", "0,1,9"]) == 1
    assert cli.main(base + ["--task", "t2v", "--events", "a,b,c"]) == 1
    assert not (tmp_path / "o").exists()


def test_train_rejects_paper_profile(tmp_path, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text(f"run.profile = paper\nrun.output_dir = {tmp_path / 'out'}\n")
    assert cli.main(["train", str(cfg)]) == 1
    assert "parameter cap exceeded" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck"]) == 0
    assert capsys.readouterr().out.strip().endswith("checks passed")
    monkeypatch.setattr(numerics, "_gelu_grad", lambda x, cdf=None: np.zeros_like(x))
    assert cli.main(["gradcheck"]) == 3
    assert "FAIL" in capsys.readouterr().out
