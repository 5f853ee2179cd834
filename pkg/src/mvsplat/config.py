"""Run configuration: nested dataclasses, strict YAML loading, round-trip dump.

Unknown keys are rejected with the full key path; numeric contract checks
live in each dataclass's __post_init__ and surface with the same path
prefix, so a bad config names the exact offending field.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .core import InvalidInputError, SceneConfig
from .densify import DensifySchedule
from .scenes import SceneSpec
from .surface import PruneMode
from .trainer import LRRange, RegularizerSettings, TrainSettings


class ConfigError(ValueError):
    pass


@dataclass
class GuidanceSettings:
    mode: str = "photometric"           # photometric | remote
    remote_addr: str = "127.0.0.1:7060"
    prompt: str = ""
    negative_prompt: str = ""
    guidance_scale: float = 50.0
    t_min: float = 0.02
    t_max: float = 0.98
    timeout: float = 120.0
    supersample: int = 2
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.mode not in ("photometric", "remote"):
            raise InvalidInputError(f"guidance mode must be photometric or remote, got {self.mode!r}")
        if not (0.0 <= self.t_min <= self.t_max <= 1.0):
            raise InvalidInputError("require 0 <= t_min <= t_max <= 1")


@dataclass
class OutputSettings:
    out_dir: str = "runs/latest"
    snapshot_interval: int = 1000
    log_interval: int = 50

    def __post_init__(self):
        if self.snapshot_interval < 1:
            raise InvalidInputError("snapshot_interval must be >= 1")


@dataclass
class EvalSettings:
    views: int = 15
    elevation_deg: float = 15.0
    background: tuple = (1.0, 1.0, 1.0)
    supersample: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    init_gaussians: int = 5000
    scene: SceneConfig = field(default_factory=SceneConfig)
    schedule: DensifySchedule = field(default_factory=DensifySchedule)
    regularizers: RegularizerSettings = field(default_factory=RegularizerSettings)
    training: TrainSettings = field(default_factory=TrainSettings)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.init_gaussians < 1:
            raise InvalidInputError("init_gaussians must be >= 1")
        if self.schedule.total_steps != self.training.total_steps:
            # schedule length follows the trainer unless set explicitly
            self.schedule.total_steps = max(self.schedule.stop_step,
                                            self.training.total_steps)


def _build_lr_dict(raw) -> dict:
    if isinstance(raw, dict):
        out = {}
        for name, pair in raw.items():
            if name not in TrainSettings().lr:
                raise ConfigError(f"unknown learning-rate group {name!r}")
            init, final = pair
            out[name] = LRRange(float(init), float(final))
        base = TrainSettings().lr
        base.update(out)
        return base
    raise ConfigError("training.lr must map group -> [init, final]")


def _build_prune_mode(raw) -> PruneMode:
    if isinstance(raw, str):
        if raw == "knn":
            return PruneMode.knn()
        if raw == "percentile":
            return PruneMode.percentile(90.0)
        if raw == "none":
            return PruneMode.none()
        raise ConfigError(f"surface_prune_mode {raw!r} needs parameters; use a mapping")
    if isinstance(raw, dict):
        kind = raw.get("kind")
        if kind == "knn":
            return PruneMode.knn(int(raw.get("k", 5)))
        if kind == "percentile":
            return PruneMode.percentile(float(raw.get("p", 90.0)))
        if kind == "epsilon":
            return PruneMode.epsilon(float(raw.get("eps", 0.0)))
        if kind == "none":
            return PruneMode.none()
    raise ConfigError(f"cannot parse surface_prune_mode from {raw!r}")


def _from_dict(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
        f = known[key]
        sub = f.type if isinstance(f.type, type) else None
        if key == "lr" and cls is TrainSettings:
            kwargs[key] = _build_lr_dict(value)
        elif key == "surface_prune_mode":
            kwargs[key] = _build_prune_mode(value)
        elif dataclasses.is_dataclass(_resolve_type(cls, key)) and isinstance(value, dict):
            kwargs[key] = _from_dict(_resolve_type(cls, key), value, path + key + ".")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under {path or 'config'}: {exc}") from exc


_TYPE_MAP = {
    (RunConfig, "scene"): SceneConfig,
    (RunConfig, "schedule"): DensifySchedule,
    (RunConfig, "regularizers"): RegularizerSettings,
    (RunConfig, "training"): TrainSettings,
    (RunConfig, "guidance"): GuidanceSettings,
    (RunConfig, "output"): OutputSettings,
    (RunConfig, "eval"): EvalSettings,
    (GuidanceSettings, "scene"): SceneSpec,
}


def _resolve_type(cls, key):
    return _TYPE_MAP.get((cls, key))


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    return _from_dict(RunConfig, raw, "")


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            if isinstance(obj, LRRange):
                return [obj.init, obj.final]
            if isinstance(obj, PruneMode):
                out = {"kind": obj.kind}
                if obj.kind == "knn":
                    out["k"] = obj.k
                elif obj.kind == "percentile":
                    out["p"] = obj.p
                elif obj.kind == "epsilon":
                    out["eps"] = obj.eps
                return out
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [convert(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    return convert(cfg)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def config_json(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True)
