"""Run configuration: ``section.key = value`` text files with two built-in profiles.

``toy`` is the desk-scale default that trains in minutes on one core.
``paper`` loads the full-size constants (32 layers, 4096-wide feedforward,
lr 1e-4, 43 Hz / 1024x audio latents, 3 Hz / 16x video latents); its
parameter count exceeds ``run.param_cap`` so training refuses to start.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .attention import TASK_ORDER, TaskKind
from .curriculum import StageConfig
from .flow import SamplerConfig
from .mmdit import ModelConfig
from .rope import RopeConfig
from .synthdata import GeneratorConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "off", "") else float(text)


def _tasks(text: str) -> tuple[str, ...]:
    return tuple(TaskKind.parse(x.strip()).value for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text: str) -> str:
    return text.strip()


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, toy default)
SCHEMA: dict[str, tuple] = {
    "run.profile": (_str, "toy"),
    "run.seed": (int, 0),
    "run.output_dir": (_str, "runs/toy"),
    "run.checkpoint_every": (int, 500),
    "run.param_cap": (int, 50_000_000),
    "model.layers": (int, 4),
    "model.d_model": (int, 128),
    "model.heads": (int, 4),
    "model.ff_dim": (int, 512),
    "model.time_embed_dim": (int, 64),
    "model.patch_size": (int, 1),
    "model.norm_eps": (float, 1e-6),
    "model.dtype": (_str, "f32"),
    "model.audio_rate_hz": (float, 43.0),
    "model.audio_downsample": (int, 1024),
    "model.video_rate_hz": (float, 3.0),
    "model.video_spatial_compression": (int, 16),
    "rope.base_theta": (float, 10000.0),
    "rope.axis_split": (_str, "auto"),
    "rope.audio_time_mode": (_str, "offset"),
    "flow.steps": (int, 50),
    "flow.seed": (int, 0),
    "flow.guidance_scale": (_opt_float, None),
    "curriculum.stage1_steps": (int, 2000),
    "curriculum.stage2_steps": (int, 1000),
    "curriculum.stage3_steps": (int, 500),
    "curriculum.rebalance_period": (int, 100),
    "curriculum.quality_threshold": (float, 0.5),
    "curriculum.lr1": (float, 1e-3),
    "curriculum.lr2": (float, 1e-3),
    "curriculum.lr3": (float, 3e-4),
    "curriculum.tau": (float, 1.0),
    "curriculum.weight_floor": (float, 0.02),
    "curriculum.batch_size": (int, 8),
    "curriculum.log_period": (int, 10),
    "curriculum.val_period": (int, 250),
    "curriculum.val_size": (int, 32),
    "curriculum.tasks": (_tasks, tuple(k.value for k in TASK_ORDER)),
    "curriculum.grad_clip": (_opt_float, 1.0),
    "data.seed": (int, 0),
    "data.n_events": (int, 8),
    "data.frames": (int, 8),
    "data.height": (int, 2),
    "data.width": (int, 2),
    "data.audio_len": (int, 64),
    "data.video_channels": (int, 8),
    "data.audio_channels": (int, 8),
    "data.noise_sigma": (float, 0.1),
    "data.switch_prob": (float, 0.2),
    "data.n_train": (int, 4096),
}

PROFILES = {
    "toy": {},
    "paper": {
        "run.output_dir": "runs/paper",
        "model.layers": 32,
        "model.d_model": 3072,
        "model.heads": 24,
        "model.ff_dim": 4096,
        "model.time_embed_dim": 256,
        "curriculum.lr1": 1e-4,
        "curriculum.lr2": 1e-4,
        "curriculum.lr3": 1e-4,
    },
}


@dataclass
class RunConfig:
    values: dict
    model: ModelConfig
    sampler: SamplerConfig
    curriculum: StageConfig
    data: GeneratorConfig

    @property
    def profile(self) -> str:
        return self.values["run.profile"]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def output_dir(self) -> str:
        return self.values["run.output_dir"]

    @property
    def checkpoint_every(self) -> int:
        return self.values["run.checkpoint_every"]

    @property
    def param_cap(self) -> int:
        return self.values["run.param_cap"]

    @property
    def n_train(self) -> int:
        return self.values["data.n_train"]

    def to_text(self) -> str:
        return "".join(f"{key} = {_fmt(self.values[key])}\n" for key in SCHEMA)


def defaults(profile: str = "toy") -> dict:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    values = {k: v for k, (_, v) in SCHEMA.items()}
    values.update(PROFILES[profile])
    values["run.profile"] = profile
    return values


def _build(values: dict, lines: dict, source: str) -> RunConfig:
    def fail(section: str, exc: Exception):
        line = min((n for k, n in lines.items() if k.startswith(section + ".")), default=None)
        raise ConfigError(f"invalid [{section}] settings: {exc}", line, source) from exc

    v = values
    try:
        data = GeneratorConfig(seed=v["data.seed"], n_events=v["data.n_events"], frames=v["data.frames"],
                               height=v["data.height"], width=v["data.width"], audio_len=v["data.audio_len"],
                               video_channels=v["data.video_channels"], audio_channels=v["data.audio_channels"],
                               noise_sigma=v["data.noise_sigma"], switch_prob=v["data.switch_prob"])
        if v["data.n_train"] < 1:
            raise ValueError("n_train must be >= 1")
    except ValueError as exc:
        fail("data", exc)
    try:
        if v["model.heads"] < 1 or v["model.d_model"] % v["model.heads"]:
            raise ValueError(f"d_model {v['model.d_model']} not divisible by heads {v['model.heads']}")
        split = None if v["rope.axis_split"].lower() == "auto" else _csv_ints(v["rope.axis_split"])
        rope = RopeConfig(v["model.d_model"] // v["model.heads"], split, v["rope.base_theta"],
                          v["rope.audio_time_mode"])
    except ValueError as exc:
        fail("rope", exc)
    try:
        model = ModelConfig(
            layers=v["model.layers"], d_model=v["model.d_model"], heads=v["model.heads"], ff_dim=v["model.ff_dim"],
            rope=rope, video_latent_channels=data.video_channels, audio_latent_channels=data.audio_channels,
            n_events=data.n_events, max_frames=data.frames, max_height=data.height, max_width=data.width,
            max_audio_len=data.audio_len, max_caption_len=2 * data.frames, patch_size=v["model.patch_size"],
            time_embed_dim=v["model.time_embed_dim"], norm_eps=v["model.norm_eps"], dtype=v["model.dtype"],
            audio_rate_hz=v["model.audio_rate_hz"], audio_downsample=v["model.audio_downsample"],
            video_rate_hz=v["model.video_rate_hz"], video_spatial_compression=v["model.video_spatial_compression"])
        if data.height % model.patch_size or data.width % model.patch_size:
            raise ValueError("data height/width must be divisible by patch_size")
    except ValueError as exc:
        fail("model", exc)
    try:
        sampler = SamplerConfig(steps=v["flow.steps"], seed=v["flow.seed"], guidance_scale=v["flow.guidance_scale"])
    except ValueError as exc:
        fail("flow", exc)
    try:
        curriculum = StageConfig(
            stage_steps=(v["curriculum.stage1_steps"], v["curriculum.stage2_steps"], v["curriculum.stage3_steps"]),
            rebalance_period=v["curriculum.rebalance_period"], quality_threshold=v["curriculum.quality_threshold"],
            learning_rates=(v["curriculum.lr1"], v["curriculum.lr2"], v["curriculum.lr3"]),
            tau=v["curriculum.tau"], weight_floor=v["curriculum.weight_floor"],
            batch_size=v["curriculum.batch_size"], log_period=v["curriculum.log_period"],
            val_period=v["curriculum.val_period"], val_size=v["curriculum.val_size"],
            tasks=v["curriculum.tasks"], grad_clip=v["curriculum.grad_clip"])
    except ValueError as exc:
        fail("curriculum", exc)
    try:
        if v["run.checkpoint_every"] < 0 or v["run.param_cap"] < 1:
            raise ValueError("checkpoint_every must be >= 0 and param_cap >= 1")
        if not v["run.output_dir"]:
            raise ValueError("output_dir must not be empty")
    except ValueError as exc:
        fail("run", exc)
    return RunConfig(values, model, sampler, curriculum, data)


def parse_text(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    entries: list[tuple[int, str, str]] = []
    seen: dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", number, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", number, source)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", number, source)
        seen[key] = number
        entries.append((number, key, value))

    profile = next((v for _, k, v in entries if k == "run.profile"), "toy")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}",
                          seen.get("run.profile"), source)
    values = defaults(profile)
    for number, key, value in entries:
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", number, source) from None
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", None, source)
        values[key] = SCHEMA[key][0](str(value)) if isinstance(value, str) else value
    return _build(values, seen, source)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("config file not found", None, str(path)) from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config is not UTF-8: {exc}", None, str(path)) from None
    return parse_text(text, str(path), overrides)


def from_values(values: dict) -> RunConfig:
    return _build(dict(values), {}, "<values>")
