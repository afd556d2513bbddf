"""Command-line entry point: ``avtower {train,sample,eval,gradcheck}``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure, 3 check failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, curriculum, gradcheck, mmdit, synthdata
from .attention import TASK_ORDER, TaskKind
from .captions import CaptionError, caption_tokens
from .config import ConfigError, RunConfig, load_config, parse_text
from .flow import Conditions, SamplerConfig, euler_sample
from .tasks import TaskSpec

log = logging.getLogger("avtower")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
# disjoint sample-index ranges of the synthetic generator
VAL_START = 1_000_000
EVAL_START = 2_000_000


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"avtower: {msg}", file=sys.stderr)


def save_model(path, model: mmdit.MMDiT, run: RunConfig) -> None:
    checkpoint.save(path, model.state_dict(), run.to_text())


def load_model(path) -> tuple[RunConfig, mmdit.MMDiT]:
    text, tensors = checkpoint.load(path)
    run = parse_text(text, source=f"{path}:config")
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    run.model.dtype = "f64" if dtype == np.float64 else "f32"
    model = mmdit.MMDiT.init(run.model, seed=0)
    model.load_state_dict(tensors)
    return run, model


def validation_set(run: RunConfig) -> curriculum.ValidationSet:
    samples = synthdata.generate(run.data, run.curriculum.val_size, start=VAL_START)
    return curriculum.ValidationSet.build(samples, seed=run.seed, tasks=run.curriculum.tasks)


# -- train ----------------------------------------------------------------
def cmd_train(config_path, overrides: dict | None = None) -> int:
    try:
        run = load_config(config_path, overrides)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    n_params = mmdit.count_parameters(run.model)
    if n_params > run.param_cap:
        _err(f"parameter cap exceeded: {run.profile} profile has {n_params:,} parameters "
             f"(cap {run.param_cap:,}); refusing to train")
        return EXIT_USAGE

    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s profile, %d parameters -> %s", run.profile, n_params, out)
    dataset = synthdata.generate(run.data, run.n_train)
    model = mmdit.MMDiT.init(run.model, seed=run.seed)

    def on_checkpoint(step, m):
        save_model(out / f"ckpt-{step:06d}.aplo", m, run)

    try:
        result = curriculum.train(model, dataset, run.curriculum, seed=run.seed, val_set=validation_set(run),
                                  on_checkpoint=on_checkpoint, checkpoint_every=run.checkpoint_every)
    except curriculum.TrainingError as exc:
        _err(f"training failed: {exc}")
        return EXIT_RUNTIME
    save_model(out / "final.aplo", model, run)
    curriculum.write_metrics_csv(result.rows, out / "metrics.csv")
    with open(out / "validation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "task", "loss"])
        for step, metrics in result.validation:
            for kind, value in metrics.items():
                writer.writerow([step, kind.value, f"{value:.8g}"])
    return EXIT_OK


# -- sample ---------------------------------------------------------------
def _parse_events(text: str, run: RunConfig) -> list[int]:
    try:
        events = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"events must be comma-separated integers, got {text!r}") from None
    if len(events) != run.data.frames:
        raise UsageError(f"expected {run.data.frames} events (one per video frame), got {len(events)}")
    if any(not 0 <= e < run.data.n_events for e in events):
        raise UsageError(f"event ids must lie in [0, {run.data.n_events}), got {text!r}")
    return events


def _load_image(path, run: RunConfig) -> np.ndarray:
    try:
        _, tensors = checkpoint.load(path)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise UsageError(f"cannot read image file {path}: {exc}") from None
    if "image" not in tensors:
        raise UsageError(f"{path} holds no tensor named 'image'")
    image = tensors["image"]
    expected = (run.data.height, run.data.width, run.data.video_channels)
    if image.shape[-3:] != expected:
        raise UsageError(f"image shape {image.shape} does not end in {expected}")
    return image.reshape((-1,) + expected)


def sample_latents(run: RunConfig, model, kind: TaskKind, video_events, audio_events, steps: int, seed: int,
                   image=None, batch: int = 1):
    vocab = run.data.vocab
    conds = Conditions(
        video_caption=[caption_tokens(video_events, "video", vocab)] * batch,
        audio_caption=[caption_tokens(audio_events, "audio", vocab)] * batch,
        video_shape=(run.data.frames, run.data.height, run.data.width),
        audio_len=run.data.audio_len,
        image=None if image is None else np.broadcast_to(image, (batch,) + image.shape[1:]).copy(),
    )
    spec = TaskSpec(kind, conds.image if kind.image_conditioned else None)
    return euler_sample(model, conds, spec, SamplerConfig(steps=steps, seed=seed, guidance_scale=run.sampler.guidance_scale))


def cmd_sample(checkpoint_path, task: str, events: str, out_dir, steps: int | None = None, seed: int = 0,
               audio_events: str | None = None, image: str | None = None, batch: int = 1) -> int:
    try:
        kind = TaskKind.parse(task)
        if kind.image_conditioned and image is None:
            raise UsageError(f"task {kind.value} needs --image")
        if not kind.image_conditioned and image is not None:
            raise UsageError(f"task {kind.value} takes no --image")
        if batch < 1:
            raise UsageError("--batch must be >= 1")
        run, model = load_model(checkpoint_path)
        video_events = _parse_events(events, run)
        a_events = _parse_events(audio_events, run) if audio_events else video_events
        img = _load_image(image, run) if image else None
        steps = steps or run.sampler.steps
        if steps < 1:
            raise UsageError("--steps must be >= 1")
    except (UsageError, ValueError, CaptionError, OSError, checkpoint.CheckpointError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    try:
        zv, za = sample_latents(run, model, kind, video_events, a_events, steps, seed, img, batch)
    except (ValueError, FloatingPointError) as exc:
        _err(f"sampling failed: {exc}")
        return EXIT_RUNTIME
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    if kind.uses_video:
        tensors["video"] = zv
    if kind.uses_audio:
        tensors["audio"] = za
    manifest = (f"task = {kind.value}\nseed = {seed}\nsteps = {steps}\nbatch = {batch}\n"
                f"checkpoint = {Path(checkpoint_path).name}\n"
                f"video_events = {','.join(map(str, video_events))}\n"
                f"audio_events = {','.join(map(str, a_events))}\n"
                f"tensors = {','.join(tensors)}\n")
    checkpoint.save(out / "sample.aplo", tensors, manifest)
    (out / "manifest.txt").write_text(manifest, encoding="utf-8")
    return EXIT_OK


# -- eval -----------------------------------------------------------------
def evaluate(run: RunConfig, model, n: int, steps: int, seed: int, chunk: int = 50):
    """T2AV samples from held-out captions; returns per-sample alignments, shuffled
    baseline alignments and per-task validation losses."""
    samples = synthdata.generate(run.data, n, start=EVAL_START)
    books = synthdata.make_codebooks(run.data)
    videos, audios = [], []
    for lo in range(0, n, chunk):
        part = samples[lo:lo + chunk]
        conds = Conditions([s.video_caption for s in part], [s.audio_caption for s in part],
                           (run.data.frames, run.data.height, run.data.width), run.data.audio_len)
        zv, za = euler_sample(model, conds, TaskKind.T2AV,
                              SamplerConfig(steps=steps, seed=seed + lo, guidance_scale=run.sampler.guidance_scale))
        videos.extend(zv)
        audios.extend(za)
    aligned = np.array([synthdata.oracle_alignment(v, a, books) for v, a in zip(videos, audios)])
    shuffled = np.array([synthdata.oracle_alignment(videos[i], audios[(i + 1) % n], books) for i in range(n)])
    losses = validation_set(run).evaluate(model, [k for k in TASK_ORDER if k in run.curriculum.tasks])
    return samples, aligned, shuffled, losses


def cmd_eval(checkpoint_path, n: int, out_dir, data_config=None, steps: int | None = None, seed: int = 0) -> int:
    try:
        if n < 1:
            raise UsageError("n must be >= 1")
        run, model = load_model(checkpoint_path)
        if data_config is not None:
            data_run = load_config(data_config)
            run.data = data_run.data
            if (run.data.frames, run.data.height, run.data.width, run.data.audio_len, run.data.n_events) > (
                    run.model.max_frames, run.model.max_height, run.model.max_width, run.model.max_audio_len,
                    run.model.n_events):
                raise UsageError("data config exceeds the checkpoint's model extents")
        steps = steps or run.sampler.steps
    except (UsageError, ConfigError, ValueError, OSError, checkpoint.CheckpointError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    try:
        samples, aligned, shuffled, losses = evaluate(run, model, n, steps, seed)
    except ValueError as exc:
        _err(f"evaluation failed: {exc}")
        return EXIT_RUNTIME
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample", "events", "alignment", "shuffled_alignment"])
    for i, s in enumerate(samples):
        writer.writerow([i, "".join(map(str, s.events)), f"{aligned[i]:.6f}", f"{shuffled[i]:.6f}"])
    text = buf.getvalue()
    (out / "eval.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    summary = [("mean_alignment", aligned.mean()), ("shuffled_baseline", shuffled.mean()),
               ("chance_1_over_k", 1.0 / run.data.n_events)]
    summary += [(f"val_loss_{k.value}", v) for k, v in losses.items()]
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        sw = csv.writer(fh, lineterminator="\n")
        sw.writerow(["metric", "value"])
        for name, value in summary:
            sw.writerow([name, f"{value:.6f}"])
    for name, value in summary:
        print(f"{name} = {value:.6f}", file=sys.stderr)
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------
def cmd_gradcheck(config_path=None, seed: int = 0) -> int:
    rope = None
    if config_path is not None:
        try:
            rope = load_config(config_path).model.rope
        except ConfigError as exc:
            _err(str(exc))
            return EXIT_USAGE
    reports = gradcheck.run_all(seed=seed, rope=rope)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# -- argument parsing -----------------------------------------------------
def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avtower", description="single-tower audio-video flow-matching toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the three-stage curriculum")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    s = sub.add_parser("sample", help="generate latents from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--task", required=True, choices=[k.value for k in TaskKind])
    s.add_argument("--events", required=True, help="comma-separated event id per video frame")
    s.add_argument("--audio-events", help="audio caption events (default: same as --events)")
    s.add_argument("--image", help="tensor-table file with an 'image' tensor (H, W, C) for i2v/i2av")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="alignment and validation metrics of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--n", type=int, default=200)
    e.add_argument("--data", help="config file whose data section replaces the checkpoint's")
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    g.add_argument("config", nargs="?")
    g.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, _overrides(args.set))
        if args.command == "sample":
            return cmd_sample(args.checkpoint, args.task, args.events, args.out, args.steps, args.seed,
                              args.audio_events, args.image, args.batch)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.n, args.out, args.data, args.steps, args.seed)
        return cmd_gradcheck(args.config, args.seed)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())


def main_exit() -> None:
    sys.exit(main())
