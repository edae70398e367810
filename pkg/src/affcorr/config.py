"""TOML run configuration with strict key checking.

Example::

    [train]
    lr = 1e-4
    max_epochs = 50
    patience = 5
    batch_size = 64
    dropout_p = 0.4
    seed = 0

    [segment]
    segment_len = 60.0
    window_len = 10.0
    window_hop = 5.0

    [architecture]
    d_img = 2048
    embed_dim = 1024
    music_hidden = [256, 512]
    fusion_hidden = [512, 128, 32]
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .acpnet import D_IMG, EMBED_DIM, Architecture
from .dsp import SegmentSpec
from .errors import InvalidInput
from .training import TrainConfig


@dataclass
class ArchitectureConfig:
    d_img: int = D_IMG
    embed_dim: int = EMBED_DIM
    music_hidden: tuple[int, ...] = (256, 512)
    fusion_hidden: tuple[int, ...] = (512, 128, 32)

    def build(self) -> Architecture:
        return Architecture.default(self.d_img, self.embed_dim, tuple(self.music_hidden),
                                    tuple(self.fusion_hidden))


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    segment: SegmentSpec = field(default_factory=SegmentSpec)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)


_SECTIONS = {"train": TrainConfig, "segment": SegmentSpec, "architecture": ArchitectureConfig}


def _section(name: str, cls, table) -> object:
    if not isinstance(table, dict):
        raise InvalidInput(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise InvalidInput(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {}
    for key, val in table.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(val, list):
                raise InvalidInput(f"[{name}] {key} must be a list")
            val = tuple(int(v) for v in val)
        elif isinstance(default, bool) or not isinstance(val, (int, float)):
            raise InvalidInput(f"[{name}] {key} has wrong type {type(val).__name__}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(val, float) and not val.is_integer():
                raise InvalidInput(f"[{name}] {key} must be an integer")
            val = int(val)
        else:
            val = float(val)
        values[key] = val
    return cls(**values)


def parse_config(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise InvalidInput(f"unknown config section(s): {', '.join(unknown)}")
    return RunConfig(**{name: _section(name, cls, data[name])
                        for name, cls in _SECTIONS.items() if name in data})


def load_config(path) -> RunConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise InvalidInput(f"{path}: {exc}") from None
    return parse_config(data)
