"""Run configuration: one JSON document with a section per component.

Files may omit keys (defaults fill in) but may not add unknown ones. The fully
resolved document is written back by every command so it can be fed to
``--config`` to repeat the run.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from .datagen import AugmentConfig, SynthSpec
from .model import ColorNetConfig, PRNConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    return {
        "seed": 0,
        "workers": 1,
        "synth": {**asdict(SynthSpec()), "pool_size": 8},
        "augment": asdict(AugmentConfig()),
        "model": asdict(PRNConfig()),
        "color_model": asdict(ColorNetConfig()),
        "train": asdict(TrainConfig()),
        "eval": {"regions": ["whole"]},
    }


# sections whose value may be null or a nested mapping with its own defaults
_NULLABLE = {("augment", "realworld"): {"jpeg_quality_range": [60, 95], "blur_sigma_range": [0.0, 3.0],
                                        "noise_std_range": [0.0, 0.03]}}


def _merge(base: Any, update: Any, path: tuple) -> Any:
    if path in _NULLABLE and update is not None and base is None:
        base = copy.deepcopy(_NULLABLE[path])
    if isinstance(base, dict):
        if update is None and path in _NULLABLE:
            return None
        if not isinstance(update, dict):
            raise ConfigError(f"{'.'.join(path) or 'config'} must be a mapping")
        out = dict(base)
        for key, value in update.items():
            if key not in base:
                raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
            out[key] = _merge(base[key], value, path + (key,))
        return out
    return copy.deepcopy(update)


@dataclass
class RunConfig:
    data: dict = field(default_factory=_defaults)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[list[str]] = None) -> "RunConfig":
        cfg = cls()
        if path:
            try:
                user = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            cfg.update(user)
        for item in overrides or []:
            cfg.set(item)
        cfg.build()
        return cfg

    def update(self, user: dict) -> None:
        self.data = _merge(self.data, user, ())

    def set(self, assignment: str) -> None:
        """Apply a ``section.key=value`` override; ``value`` is parsed as JSON when possible."""
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not key=value")
        key, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        nested: Any = value
        for part in reversed(key.split(".")):
            nested = {part: nested}
        self.update(nested)

    def build(self) -> None:
        """Construct every section once so invalid values fail early."""
        try:
            self.synth_spec()
            self.augment()
            self.model()
            self.color_model()
            self.train()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def synth_spec(self) -> SynthSpec:
        d = {k: v for k, v in self.data["synth"].items() if k != "pool_size"}
        d["rng_seed"] = self.seed
        return SynthSpec(**d)

    def augment(self) -> AugmentConfig:
        return AugmentConfig(**self.data["augment"])

    def model(self) -> PRNConfig:
        return PRNConfig(**self.data["model"])

    def color_model(self) -> ColorNetConfig:
        return ColorNetConfig(**self.data["color_model"])

    def train(self) -> TrainConfig:
        d = dict(self.data["train"])
        d["seed"] = self.seed
        return TrainConfig(**d)

    def resolved(self) -> dict:
        out = copy.deepcopy(self.data)
        out["synth"]["rng_seed"] = self.seed
        out["train"]["seed"] = self.seed
        return out

    def dump(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n")
