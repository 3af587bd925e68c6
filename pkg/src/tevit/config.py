"""Run configuration: one JSON document, every key optional.

Sections: ``model``, ``loss``, ``optim``, ``train``, ``link``, ``data`` and the
top-level ``seed``.  Unknown keys and out-of-range values raise ConfigError.
The environment variable ``TEVIT_SEED`` overrides ``seed`` when set.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from tevit.backbone import BackboneConfig, ShiftSchedule, StageConfig
from tevit.core.errors import ConfigError
from tevit.head import HeadConfig
from tevit.linker import LinkConfig
from tevit.losses import CostWeights
from tevit.model import ModelConfig
from tevit.synth import SyntheticSceneConfig

SEED_ENV = "TEVIT_SEED"


@dataclass(frozen=True)
class ModelSection:
    image_size: tuple[int, int] = (64, 64)
    channels: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 4, 4)
    mlp_ratio: int = 4
    messengers: int = 8
    messenger_mode: str = "shift"  # shift | static | mhsa_ffn | conv | none
    shift_groups: tuple[tuple[int, str], ...] = ((1, "forward"), (1, "backward"), (2, "forward"), (2, "backward"))
    boundary_mode: str = "circular"
    num_queries: int = 20
    head_stages: int = 6
    head_dim: int = 64
    head_attn_heads: int = 4
    head_ffn_ratio: int = 4
    roi_size: int = 7
    mask_dim: int = 16
    mask_level: int = 1  # pyramid level feeding the mask branch (1 = stride 8)
    num_classes: int = 3
    interaction: str = "stqi"  # stqi | spatial | fused

    def __post_init__(self):
        if not (len(self.channels) == len(self.depths) == len(self.heads) == 4):
            raise ConfigError("channels, depths and heads need 4 entries each")
        if self.num_queries < 1 or self.head_stages < 1:
            raise ConfigError("num_queries and head_stages must be >= 1")
        if self.messenger_mode == "none" and self.messengers:
            raise ConfigError("messenger_mode 'none' requires messengers = 0")

    def build(self) -> ModelConfig:
        stages = tuple(StageConfig(d, c, h, s, self.mlp_ratio)
                       for d, c, h, s in zip(self.depths, self.channels, self.heads, (4, 2, 2, 2)))
        mode = "shift" if self.messenger_mode == "none" else self.messenger_mode
        backbone = BackboneConfig(tuple(self.image_size), stages, self.messengers,
                                  ShiftSchedule(tuple(tuple(g) for g in self.shift_groups), self.boundary_mode),
                                  mode)
        head = HeadConfig(tuple(self.image_size), self.num_queries, self.head_stages, self.head_dim,
                          self.head_attn_heads, self.roi_size, self.num_classes, self.head_ffn_ratio,
                          self.mask_dim, self.mask_level, self.interaction)
        return ModelConfig(backbone, head)


@dataclass(frozen=True)
class OptimSection:
    base_lr: float = 0.00025  # reference rate at base_batch clips per step
    base_batch: int = 16
    batch_size: int = 2
    weight_decay: float = 0.0001
    backbone_lr_mult: float = 0.1
    clip_norm: float = 0.1
    epochs: int = 12
    decay_fractions: tuple[float, ...] = (8 / 12, 11 / 12)
    decay_factor: float = 0.1
    max_steps: int | None = None  # hard cap on optimizer steps, for smoke runs

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative (0 freezes every weight)")
        if self.batch_size < 1 or self.base_batch < 1 or self.epochs < 1:
            raise ConfigError("batch sizes and epochs must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if any(not 0.0 <= f <= 1.0 for f in self.decay_fractions):
            raise ConfigError("decay_fractions must lie in [0, 1]")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")

    @property
    def lr(self) -> float:
        """Linear scaling of the reference rate by the actual batch size."""
        return self.base_lr * self.batch_size / self.base_batch


@dataclass(frozen=True)
class TrainSection:
    clip_len: int = 5
    train_videos: int | None = None  # use only the first N videos of the dataset

    def __post_init__(self):
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    loss: CostWeights = field(default_factory=CostWeights)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    link: LinkConfig = field(default_factory=LinkConfig)
    data: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)

    def model_config(self) -> ModelConfig:
        return self.model.build()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))


_SECTIONS = {"model": ModelSection, "loss": CostWeights, "optim": OptimSection, "train": TrainSection,
             "link": LinkConfig, "data": SyntheticSceneConfig}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _tupled(x):
    if isinstance(x, list):
        return tuple(_tupled(v) for v in x)
    return x


def _section(cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k) if k in known else None
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{name}.{k} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{k} must be a number")
            if isinstance(default, int) and not isinstance(v, int):
                raise ConfigError(f"{name}.{k} must be an integer")
        if isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{name}.{k} must be a string")
        kwargs[k] = _tupled(v)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def from_dict(raw: dict, env: dict | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg = RunConfig(seed=seed, **kwargs)
    if tuple(cfg.data.image_size) != tuple(cfg.model.image_size):
        raise ConfigError("data.image_size and model.image_size differ; eval runs at the training resolution")
    return cfg


def load(path: str | Path | None, env: dict | None = None) -> RunConfig:
    if path is None:
        return from_dict({}, env)
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw, env)
