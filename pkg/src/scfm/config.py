"""Experiment recipes as flat-section TOML documents."""

import os
from dataclasses import asdict, dataclass, field, fields

import tomli
import tomli_w

from .data import CLASS_COUNTS, DatasetSpec
from .distill import DistillConfig
from .network import NetConfig

SEED_ENV = "SCFM_SEED"


class ConfigError(ValueError):
    """Malformed, unknown or out-of-range configuration."""


@dataclass
class DataSection:
    kind: str = "gaussians8"
    size: int = 10000
    seed: int = 0
    noise: float = 0.3


@dataclass
class NetSection:
    hidden_dim: int = 128
    num_hidden_layers: int = 3
    time_embed_dim: int = 32
    step_embed_dim: int = 0


@dataclass
class TeacherSection:
    iters: int = 20000
    lr: float = 1e-3
    batch_size: int = 256
    label_dropout: float = 0.1


@dataclass
class DistillSection:
    variant: str = "fast-slow"
    iters: int = 5000
    batch_size: int = 16
    teacher_fraction: float = 0.4
    mu_slow: float = 0.999
    mu_fast: float = 0.99
    restart_period: int = 1000
    grid_size: int = 128
    shift_range: list = field(default_factory=lambda: [2.5, 4.5])
    guidance_range: list = field(default_factory=lambda: [0.0, 4.0])
    lr: float = 3e-4
    lora_rank: int = 4
    lora_alpha: float = None  # defaults to lora_rank
    few_shot: int = 0
    eval_every: int = 100


@dataclass
class EvalSection:
    steps: list = field(default_factory=lambda: [3, 4, 8])
    teacher_steps: int = 128
    seeds: int = 2000
    n_proj: int = 128
    shift: float = 3.0
    guidance: float = 2.0
    residual_trials: int = 4
    holdout_seed: int = 1


@dataclass
class OutputSection:
    dir: str = "runs"
    # wall-clock time breaks byte-identical reruns, so it is opt-in
    record_seconds: bool = False


SECTIONS = {
    "data": DataSection,
    "net": NetSection,
    "teacher": TeacherSection,
    "distill": DistillSection,
    "eval": EvalSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        if self.distill.lora_alpha is None:
            self.distill.lora_alpha = float(self.distill.lora_rank)
        self.validate()

    def validate(self):
        try:
            self.dataset_spec()
            self.net_config()
            self.distill_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        t = self.teacher
        if t.iters < 0 or t.batch_size < 1 or t.lr <= 0 or not 0 <= t.label_dropout < 1:
            raise ConfigError("teacher: need iters >= 0, batch_size >= 1, lr > 0, "
                              "0 <= label_dropout < 1")
        if self.distill.iters < 0 or self.distill.eval_every < 0 or self.distill.few_shot < 0:
            raise ConfigError("distill: iters, eval_every and few_shot must be >= 0")
        if self.distill.few_shot and self.distill.few_shot > self.data.size:
            raise ConfigError("distill.few_shot exceeds the dataset size")
        e = self.eval
        if not e.steps or any(s < 1 for s in e.steps) or e.teacher_steps < 1:
            raise ConfigError("eval: step counts must be >= 1")
        if e.seeds < 1 or e.n_proj < 1 or e.residual_trials < 1 or e.shift < 1:
            raise ConfigError("eval: seeds, n_proj, residual_trials >= 1 and shift >= 1 required")

    def dataset_spec(self):
        d = self.data
        return DatasetSpec(d.kind, d.size, d.seed, d.noise)

    def net_config(self):
        n = self.net
        return NetConfig(hidden_dim=n.hidden_dim, num_hidden_layers=n.num_hidden_layers,
                         time_embed_dim=n.time_embed_dim, class_count=CLASS_COUNTS[self.data.kind],
                         step_embed_dim=n.step_embed_dim)

    def distill_config(self, variant=None, batch_size=None):
        d = self.distill
        return DistillConfig(
            batch_size=batch_size or d.few_shot or d.batch_size,
            teacher_fraction=d.teacher_fraction, mu_slow=d.mu_slow, mu_fast=d.mu_fast,
            restart_period=d.restart_period, variant=variant or d.variant,
            grid_size=d.grid_size, shift_range=tuple(d.shift_range),
            guidance_range=tuple(d.guidance_range), learning_rate=d.lr, lora_rank=d.lora_rank,
            lora_alpha=d.lora_alpha)

    def to_dict(self):
        return asdict(self)

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())


def _coerce(section, name, value, default):
    where = f"{section}.{name}" if section else name
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(
            isinstance(v, type(default[0])) or (isinstance(default[0], float) and isinstance(v, int))
            for v in value)
        value = [type(default[0])(v) for v in value] if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(doc):
    """Build a config from a parsed document; unknown keys and sections are errors."""
    kwargs = {}
    for key, value in doc.items():
        if key == "seed":
            kwargs["seed"] = _coerce("", "seed", value, 0)
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            cls = SECTIONS[key]
            known = {f.name: f for f in fields(cls)}
            defaults = cls()
            vals = {}
            for name, v in value.items():
                if name not in known:
                    raise ConfigError(f"unknown key {key}.{name!r}")
                vals[name] = _coerce(key, name, v, getattr(defaults, name))
            kwargs[key] = cls(**vals)
        else:
            raise ConfigError(f"unknown key {key!r}")
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            kwargs["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return ExperimentConfig(**kwargs)


def parse_config(path):
    """Read a TOML experiment recipe; missing keys take the defaults above."""
    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(doc)


def write_config(config, path):
    with open(path, "w") as f:
        f.write(config.to_toml())
