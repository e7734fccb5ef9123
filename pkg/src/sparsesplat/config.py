"""TOML run configuration.

Sections map onto the config dataclasses::

    [train]      TrainConfig fields
    [loss]       LossWeights fields
    [mask]       MaskConfig fields
    [smoothing]  s, alpha_margin, fallback_far, fallback_frequency
    [density]    DensityConfig fields

Unknown sections or keys are rejected so that typos do not pass silently.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .densify import DensityConfig
from .losses import LossWeights, MaskConfig
from .smoothing import SmoothingConfig
from .trainer import TrainConfig

# config key -> dataclass field where they differ
_SMOOTHING_ALIASES = {"s": "s_filter"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mask: MaskConfig = field(default_factory=MaskConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    density: DensityConfig = field(default_factory=DensityConfig)


_SECTIONS = {
    "train": TrainConfig,
    "loss": LossWeights,
    "mask": MaskConfig,
    "smoothing": SmoothingConfig,
    "density": DensityConfig,
}


def _build(section: str, cls, values: dict, source: str):
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        name = _SMOOTHING_ALIASES.get(key, key) if section == "smoothing" else key
        if name not in allowed:
            raise ConfigError(f"{source}: unknown key {section}.{key}")
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid [{section}] section: {exc}") from exc


def parse_config(data: dict, source: str = "<config>") -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(sorted(unknown))}")
    return RunConfig(**{name: _build(name, cls, data.get(name, {}), source) for name, cls in _SECTIONS.items()})


def load_config(path: Optional[str]) -> RunConfig:
    """Read a TOML file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, str(path))
