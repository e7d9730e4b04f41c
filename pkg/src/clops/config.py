"""Configuration dataclasses, size presets and config-file loading."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import numbers
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

VARIANTS = ("enc_dec_ims", "enc_dec_dms", "encoder_mean", "encoder_cls", "encoder_flatten", "masked_encoder")
POSITIONAL_ENCODINGS = ("datetime_only", "sinusoidal", "learned", "rope")
ATTENTION_MASKS = ("full", "full_causal", "mask_causal")
HEADS = ("student_t", "mv_student_t", "iqf")

# 5-minute lag set: sub-hour, multi-hour and daily multiples up to 1200
DEFAULT_LAGS = (1, 2, 3, 4, 5, 6, 7, 12, 24, 36, 48, 96, 144, 288, 576, 864, 1200)
DECILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# name -> (layers, d_model, d_ff, n_heads, d_kv)
SIZE_PRESETS = {
    "tiny": (2, 64, 256, 4, 16),
    "small": (3, 96, 384, 4, 24),
    "base": (6, 384, 1536, 6, 64),
    "large": (9, 512, 2048, 8, 64),
    "xlarge": (12, 768, 3072, 12, 64),
}
# desk-scale presets also shrink the window
WINDOW_PRESETS = {"tiny": (96, 24), "small": (96, 24)}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "masked_encoder"
    layers: int = 6
    d_model: int = 384
    d_ff: int = 1536
    n_heads: int = 6
    d_kv: int = 64
    pe: str = "rope"
    use_datetime: bool = True
    attn_mask: str = "full"
    head: str = "student_t"
    L: int = 480
    H: int = 48
    d_y: int = 1
    d_pd: int = 0
    d_s: int = 0
    lags: tuple = DEFAULT_LAGS
    levels: tuple = DECILES
    ims_sample: bool = False

    def __post_init__(self):
        self.lags = tuple(int(x) for x in self.lags)
        self.levels = tuple(float(x) for x in self.levels)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pe not in POSITIONAL_ENCODINGS:
            raise ConfigError(f"unknown positional encoding {self.pe!r}")
        if self.attn_mask not in ATTENTION_MASKS:
            raise ConfigError(f"unknown attention mask {self.attn_mask!r}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        for name in ("layers", "d_model", "d_ff", "n_heads", "d_kv", "L", "H", "d_y"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.pe == "rope" and self.d_kv % 2:
            raise ConfigError(f"rope needs an even d_kv, got {self.d_kv}")
        if self.pe == "sinusoidal" and self.d_model % 2:
            raise ConfigError("sinusoidal encoding needs an even d_model")

    @classmethod
    def preset(cls, size: str, **overrides) -> "ModelConfig":
        if size not in SIZE_PRESETS:
            raise ConfigError(f"invalid preset {size!r}; choose from {sorted(SIZE_PRESETS)}")
        layers, d_model, d_ff, n_heads, d_kv = SIZE_PRESETS[size]
        kw: dict[str, Any] = dict(layers=layers, d_model=d_model, d_ff=d_ff, n_heads=n_heads, d_kv=d_kv)
        if size in WINDOW_PRESETS:
            kw["L"], kw["H"] = WINDOW_PRESETS[size]
        kw.update(overrides)
        return cls(**kw)

    @property
    def n_datetime(self) -> int:
        return 5 if self.use_datetime else 0

    @property
    def d_in(self) -> int:
        """Channels per context position fed to the input projection."""
        return self.d_y + self.n_datetime + self.d_y * len(self.lags) + self.d_y + self.d_s + self.d_pd

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lags"] = list(self.lags)
        d["levels"] = list(self.levels)
        return d


@dataclass
class TrainConfig:
    iterations: int = 100_000
    batch_size: int = 512
    peak_lr: float = 1e-3
    warmup_steps: int = 10_000
    weight_decay: float = 0.1
    seed: int = 0
    eval_every: int = 1000
    precision: str = "float32"
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_val_series: int = 256

    def __post_init__(self):
        _require_ints(self, ("iterations", "batch_size", "warmup_steps", "eval_every", "seed"))
        if self.iterations <= 0 or self.batch_size <= 0 or self.peak_lr <= 0:
            raise ConfigError("iterations, batch_size and peak_lr must be positive")
        if not 0 <= self.warmup_steps <= self.iterations:
            raise ConfigError("warmup_steps must lie in [0, iterations]")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        kw: dict[str, Any] = dict(iterations=1000, batch_size=32, warmup_steps=100, eval_every=250)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalPlan:
    H: int = 48
    stride: int = 48
    windows: int = 12
    levels: tuple = DECILES
    n_samples: int = 100
    seed: int = 0

    def __post_init__(self):
        self.levels = tuple(float(x) for x in self.levels)
        _require_ints(self, ("H", "stride", "windows", "n_samples", "seed"))
        if self.windows < 1 or self.n_samples < 0:
            raise ConfigError("windows must be positive and n_samples nonnegative")
        if self.stride < self.H:
            raise ConfigError("evaluation windows must not overlap (stride >= H)")

    @property
    def test_length(self) -> int:
        return self.H + self.stride * (self.windows - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["levels"] = list(self.levels)
        return d


def _require_ints(obj, names) -> None:
    for name in names:
        value = getattr(obj, name)
        if isinstance(value, bool) or not isinstance(value, numbers.Integral):
            raise ConfigError(f"{name} must be an integer, got {value!r}")


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        low = value.lower()
        if low in ("true", "false"):
            return low == "true"
        return value


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides to a nested dict in place."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = cfg
        *path, leaf = key.strip().split(".")
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[leaf] = _coerce(value.strip())
    return cfg


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    cfg: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return apply_overrides(cfg, overrides or [])


def model_config_from(section: dict, **defaults) -> ModelConfig:
    section = {**defaults, **(section or {})}
    size = section.pop("size", None)
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    if size is not None:
        return ModelConfig.preset(size, **section)
    return ModelConfig(**section)


def train_config_from(section: dict, **defaults) -> TrainConfig:
    section = {**defaults, **(section or {})}
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    return TrainConfig.desk(**section)


def eval_plan_from(section: dict, **defaults) -> EvalPlan:
    section = {**defaults, **(section or {})}
    known = {f.name for f in dataclasses.fields(EvalPlan)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
    return EvalPlan(**section)


@dataclass
class RunConfig:
    """Fully resolved settings for one CLI command, embedded in every output."""
    command: str
    sections: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, **self.sections}

    @property
    def fingerprint(self) -> str:
        return config_hash(self.to_dict())
