"""Pipeline configuration: nested dataclasses loaded from YAML with range checks.

Every field carries ``(lo, hi)`` bounds in its metadata and an origin tag:
``published`` for constants taken from the method's published description,
``chosen`` for values picked here.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .errors import ConfigError

INF = math.inf


def _f(default, lo=-INF, hi=INF, origin="chosen", **kw):
    return field(default=default, metadata={"range": (lo, hi), "origin": origin, **kw})


def _vec(default, origin="chosen"):
    return field(default_factory=lambda: list(default), metadata={"range": None, "origin": origin, "len": len(default)})


@dataclass
class SensorConfig:
    lidar_translation: list = _vec([0.0, 0.0, 0.0])  # lidar -> robot
    lidar_rotvec: list = _vec([0.0, 0.0, 0.0])
    imu_rotvec: list = _vec([0.0, 0.0, 0.0])  # imu -> robot
    imu_lever_arm: list = _vec([0.0, 0.0, 0.0])
    gravity: float = _f(9.80665, 9.0, 10.5)


@dataclass
class PreprocessConfig:
    box_filter: float = _f(1.0, 0.0, 10.0, "published")
    voxel_leaf: float = _f(0.2, 0.0, 5.0)  # 0 disables


@dataclass
class AdaptiveConfig:
    alpha: float = _f(0.95, 0.0, 1.0, "published")
    beta: float = _f(0.05, 0.0, 1.0, "published")
    K: int = _f(5, 1, 64)
    fixed_max_corr: Optional[float] = _f(None, 1e-3, 100.0)  # set to disable the adaptive radius


@dataclass
class GicpConfig:
    k_neighbors: int = _f(20, 3, 64)
    epsilon: float = _f(1e-3, 1e-9, 1.0)
    max_iterations: int = _f(32, 1, 1000)
    min_correspondences: int = _f(20, 1, 10**9)
    step_tolerance: float = _f(1e-6, 0.0, 1.0)


@dataclass
class KeyframeConfig:
    degeneracy_threshold: float = _f(5e-5, 0.0, INF)
    translation: float = _f(1.0, 0.0, INF)
    rotation_deg: float = _f(30.0, 0.0, 180.0)


@dataclass
class SubmapConfig:
    jaccard_threshold: float = _f(0.2, 0.0, 1.0, "published")
    corr_dist: float = _f(0.5, 1e-3, 10.0)
    refresh_scans: int = _f(3, 1, 1000)
    retransform_per_scan: int = _f(4, 1, 10**6)


@dataclass
class ObserverConfig:
    g1: float = _f(4.0, 0.0, INF)
    g2: float = _f(4.0, 0.0, INF)
    g3: float = _f(10.0, 0.0, INF)
    g4: float = _f(10.0, 0.0, INF)
    g5: float = _f(4.0, 0.0, INF)


@dataclass
class MappingConfig:
    enabled: bool = field(default=True, metadata={"range": None, "origin": "chosen"})
    loop_closure: bool = field(default=True, metadata={"range": None, "origin": "chosen"})
    connective_threshold: float = _f(0.3, 0.0, 1.0)
    zeta: float = _f(0.1, 0.0, INF)
    loop_radius: float = _f(10.0, 0.0, INF)
    loop_fitness: float = _f(0.3, 0.0, INF)
    loop_exclude_recent: int = _f(10, 0, 10**6)
    loop_max_corr: float = _f(1.0, 1e-3, 100.0)
    loop_min_overlap: float = _f(0.3, 0.0, 1.0)


@dataclass
class RunConfig:
    single_thread: bool = field(default=False, metadata={"range": None, "origin": "chosen"})
    imu_rate_hint: float = _f(200.0, 1.0, 1e5)


@dataclass
class PipelineConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    gicp: GicpConfig = field(default_factory=GicpConfig)
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    submap: SubmapConfig = field(default_factory=SubmapConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "PipelineConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(mapping={"loop_closure": False})``."""
        d = self.to_dict()
        for name, vals in sections.items():
            if name not in d:
                raise ConfigError(f"unknown config section {name!r}")
            d[name].update(vals)
        return from_dict(d)


def _check(section: str, cls, values: Dict[str, Any]):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    out = {}
    for name, val in values.items():
        f = known[name]
        key = f"{section}.{name}"
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{key} must be true or false")
        elif isinstance(default, list):
            if not isinstance(val, (list, tuple)) or len(val) != f.metadata["len"] or \
                    not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
                raise ConfigError(f"{key} must be a list of {f.metadata['len']} numbers")
            val = [float(v) for v in val]
        elif val is None:
            if default is not None:
                raise ConfigError(f"{key} may not be null")
        else:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{key} must be numeric")
            if isinstance(default, int) and not isinstance(default, bool):
                if float(val) != int(val):
                    raise ConfigError(f"{key} must be an integer")
                val = int(val)
            else:
                val = float(val)
            lo, hi = f.metadata["range"]
            if not (lo <= val <= hi) or (isinstance(val, float) and math.isnan(val)):
                raise ConfigError(f"{key}={val} outside [{lo}, {hi}]")
        out[name] = val
    return cls(**out)


def from_dict(data: Optional[Dict[str, Any]]) -> PipelineConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    sections = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kw = {name: _check(name, f.default_factory, data[name]) for name, f in sections.items() if name in data}
    cfg = PipelineConfig(**kw)
    if abs(cfg.adaptive.alpha + cfg.adaptive.beta - 1.0) > 1e-9:
        raise ConfigError("adaptive.alpha + adaptive.beta must equal 1")
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from err
    return from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def field_origins() -> Dict[str, str]:
    """``section.key -> "published" | "chosen"`` for every tunable."""
    out = {}
    for sec in dataclasses.fields(PipelineConfig):
        for f in dataclasses.fields(sec.default_factory):
            out[f"{sec.name}.{f.name}"] = f.metadata.get("origin", "chosen")
    return out
