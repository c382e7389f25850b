"""Run configuration: one closed-world JSON document holding every knob."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .denoiser import DenoiserConfig
from .diffusion import build_schedule
from .guidance import DEFAULT_DROPOUT, GuidanceScales, _check_probs
from .rlaif import TrainerConfig
from .scoring import ScoreConfig
from .synth import CONCEPTS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.1

    def build(self):
        return build_schedule(self.T, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 2e-3
    dataset_size: int = 2000
    dropout: tuple[float, float, float] = DEFAULT_DROPOUT

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.dataset_size < 1 or not self.lr > 0:
            raise ValueError(f"invalid pretrain config {self}")
        object.__setattr__(self, "dropout", _check_probs(self.dropout))


@dataclass(frozen=True)
class PosttrainConfig:
    steps: int = 50
    optimizer: str = "adam"
    beta_dpo: float = 1.0
    lr: float = 2e-4
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch_pairs: int = 8
    subsample: int = 8
    logratio_clamp: float = 20.0
    guided: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ValueError("posttrain steps and checkpoint_every must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass(frozen=True)
class EvalConfig:
    tasks: int = 64
    seed: int = 7
    task_seed_offset: int = 1000


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    concepts: tuple[str, ...] = CONCEPTS
    bank_seed: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceScales = field(default_factory=GuidanceScales)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    posttrain: PosttrainConfig = field(default_factory=PosttrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        unknown = [c for c in self.concepts if c not in CONCEPTS]
        if not self.concepts or unknown:
            raise ValueError(f"unknown concepts {unknown}; choose from {list(CONCEPTS)}")
        self.trainer()  # surfaces trainer-level validation early
        if self.posttrain.subsample > self.schedule.T - 1:
            raise ValueError(f"subsample {self.posttrain.subsample} exceeds the {self.schedule.T - 1} stochastic steps")
        self.schedule.build()

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.model.height, self.model.width, self.model.channels)

    def trainer(self) -> TrainerConfig:
        p = self.posttrain
        return TrainerConfig(
            beta_dpo=p.beta_dpo,
            lr=p.lr,
            momentum=p.momentum,
            clip_norm=p.clip_norm,
            batch_pairs=p.batch_pairs,
            subsample=p.subsample,
            logratio_clamp=p.logratio_clamp,
            scales=self.guidance,
            guided=p.guided,
            seed=self.seed,
            concepts=self.concepts,
            bank_seed=self.bank_seed,
            optimizer=p.optimizer,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["concepts"] = list(self.concepts)
        d["pretrain"]["dropout"] = list(self.pretrain.dropout)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {
    "model": DenoiserConfig,
    "schedule": ScheduleConfig,
    "guidance": GuidanceScales,
    "score": ScoreConfig,
    "pretrain": PretrainConfig,
    "posttrain": PosttrainConfig,
    "eval": EvalConfig,
}


def _typed(cls, path: str, data) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(data) - set(known))
    if extra:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(extra)}")
    out = {}
    defaults = cls()
    for k, v in data.items():
        key = f"{path}.{k}" if path else k
        if cls is RunConfig and k in _SECTIONS:
            out[k] = _build(_SECTIONS[k], key, v)
            continue
        default = getattr(defaults, k)
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{key}: expected true/false")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{key}: expected an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{key}: expected a number")
            v = float(v)
        elif isinstance(default, str):
            if not isinstance(v, str):
                raise ConfigError(f"{key}: expected a string")
        elif isinstance(default, tuple):
            if not isinstance(v, list):
                raise ConfigError(f"{key}: expected a list")
            v = tuple(v)
        out[k] = v
    return out


def _build(cls, path: str, data):
    kwargs = _typed(cls, path, data)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, "", data)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} line {e.lineno} column {e.colno}: {e.msg}") from None
    return config_from_dict(data)
