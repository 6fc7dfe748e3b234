"""Training hyperparameters and the ``key=value`` text encoding shared by
config files and checkpoint headers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int | None = None  # None means one epoch of steps
    schedule: str = "cosine"
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    flip: bool = False
    crop_pad: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        # lr == 0 is allowed: it freezes the weights, which tests rely on
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.eps < 0 or self.weight_decay < 0:
            raise ConfigError("eps and weight_decay must be non-negative")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or None")
        if self.crop_pad < 0:
            raise ConfigError("crop_pad must be >= 0")

    def replace(self, **changes) -> TrainConfig:
        values = asdict(self)
        values.update(changes)
        return TrainConfig(**values)


def encode_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(encode_value(v) for v in value)
    return str(value)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def decode_value(text: str, annotation: str):
    """Parse ``text`` according to a dataclass field annotation string."""
    text = text.strip()
    optional = annotation.endswith("| None")
    base = annotation.replace("| None", "").strip()
    if optional and text.lower() in ("none", ""):
        return None
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    if base == "bool":
        return _parse_bool(text)
    if base == "str":
        return text
    if base.startswith("tuple"):
        return tuple(float(v) for v in text.split(","))
    raise ValueError(f"unsupported field type {annotation!r}")


def _annotations(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(cls)}


def config_lines(config, prefix: str = "") -> list[str]:
    return [f"{prefix}{k}={encode_value(v)}" for k, v in asdict(config).items()]


def build_config(cls, values: dict[str, str], source: str = "config"):
    """Instantiate ``cls`` from string values, rejecting unknown keys."""
    kinds = _annotations(cls)
    parsed = {}
    for key, text in values.items():
        if key not in kinds:
            raise ConfigError(f"{source}: unknown {cls.__name__} key {key!r}")
        try:
            parsed[key] = decode_value(text, kinds[key])
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
    return cls(**parsed)


def parse_key_values(text: str, source: str = "config") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a ``key=value`` file whose keys are ModelConfig or TrainConfig fields.

    Keys may also be written with an explicit ``model.`` / ``train.`` prefix.
    A ``preset`` key selects the starting model geometry.
    """
    from .model import build_preset

    values = parse_key_values(Path(path).read_text(encoding="utf-8"), str(path))
    model_keys = set(_annotations(ModelConfig))
    train_keys = set(_annotations(TrainConfig))
    model_vals, train_vals = {}, {}
    preset = values.pop("preset", None)
    for key, text in values.items():
        bare = key.split(".", 1)[1] if key.startswith(("model.", "train.")) else key
        if key.startswith("model.") or (not key.startswith("train.") and bare in model_keys):
            model_vals[bare] = text
        elif bare in train_keys:
            train_vals[bare] = text
        else:
            raise ConfigError(f"{path}: unknown key {key!r}")
    if preset is not None:
        kinds = _annotations(ModelConfig)
        overrides = {k: decode_value(v, kinds[k]) for k, v in model_vals.items() if k in kinds}
        unknown = set(model_vals) - set(kinds)
        if unknown:
            raise ConfigError(f"{path}: unknown model keys {sorted(unknown)}")
        model = build_preset(preset, **overrides)
    else:
        model = build_config(ModelConfig, model_vals, str(path))
    return model, build_config(TrainConfig, train_vals, str(path))
