"""Training configuration and its flat TOML representation."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attention import CROSS_SCHEDULES, MASK_MODES, SINGLE_SCHEDULES
from .graph import LAYER_MEAN_RULES
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    d: int = 256
    batch_size: int = 256
    epochs: int = 100
    lr: float = 1e-3
    l2: float = 1e-5
    dropout: float = 0.2
    layers: int = 1
    n_heads: int = 8
    max_len: int = 200
    mu1: float = 0.5
    mu2: float = 0.5
    tau: float = 0.1
    alpha: float = 1.0
    seed: int = 0
    mask_mode: str = "additive"
    layer_mean: str = "k+1"
    causal: bool = True
    propagate: str = "epoch"
    pred_pool: str = "last"
    cross_schedule: str = "full"
    single_schedule: str = "full"
    eval_negatives: int = 999
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(msg)

        if self.d < 1 or self.n_heads < 1:
            bad("d and n_heads must be positive")
        if self.d % self.n_heads:
            bad(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.cross_schedule == "full" and self.n_heads % 4:
            bad(f"n_heads={self.n_heads} must be divisible by 4 for the full cross-mask schedule")
        if self.single_schedule == "full" and self.n_heads % 2:
            bad(f"n_heads={self.n_heads} must be even for the single-domain mask schedule")
        if self.layers < 0:
            bad("layers must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.max_len < 1:
            bad("batch_size and max_len must be positive and epochs non-negative")
        if self.lr < 0 or self.l2 < 0 or not 0 <= self.dropout < 1:
            bad("lr and l2 must be non-negative and dropout in [0, 1)")
        if self.eval_negatives < 1:
            bad("eval_negatives must be >= 1")
        choices = {
            "mask_mode": MASK_MODES,
            "layer_mean": LAYER_MEAN_RULES,
            "propagate": ("step", "epoch"),
            "pred_pool": ("last", "mean"),
            "cross_schedule": CROSS_SCHEDULES,
            "single_schedule": SINGLE_SCHEDULES,
            "dtype": ("float32", "float64"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                bad(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        try:
            self.loss_weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(mu1=self.mu1, mu2=self.mu2, tau=self.tau, alpha=self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        defaults = cls()
        clean = {}
        for k, v in values.items():
            expected = type(getattr(defaults, k))
            if expected is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            if not isinstance(v, expected) or (expected is int and isinstance(v, bool)):
                raise ConfigError(f"config key {k!r} expects {expected.__name__}, got {v!r}")
            clean[k] = v
        return cls(**clean)


# Small settings that train in seconds on a laptop CPU.
DESK_PRESET = dict(d=32, batch_size=16, epochs=30, lr=5e-3, l2=1e-5, dropout=0.1, layers=1,
                   n_heads=8, max_len=50)

PRESETS = {"paper": {}, "desk": DESK_PRESET}


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> TrainConfig:
    """Merge preset, flat TOML file and explicit overrides (in that order)."""
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat key = value pairs (found tables {nested})")
        values.update(data)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


def dump_toml(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f'{k} = "{v}"')
        else:
            lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"
