"""Global run configuration loaded from one YAML or JSON file.

Every section is optional; missing keys keep their library defaults.

```yaml
skeleton: null            # path to a skeleton file; null = packaged COCO-17
table: default            # "default", "jitter_heavy" or a path to a table file
log_level: INFO
synthesis: {k_good: 0.85, k_jitter: 0.5, k_miss: 0.1, max_rejection_attempts: 100, overlap_iou_threshold: 0.1}
codec: {sigma: 2.0, input_size: [48, 64], heatmap_size: [24, 32]}
refiner: {epochs: 12, batch_size: 32, loss_mode: C2F, ...}   # RefinerConfig fields
toy: {train_samples: 2000, eval_samples: 200, table: jitter_heavy, seed: 0}
eval: {max_dets: 20, oks_thresholds: [0.5, ..., 0.95]}
```
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .core import SkeletonSpec, coco_skeleton, load_skeleton
from .evaluator import EvalParams
from .refiner import RefinerConfig
from .synthesis import ErrorDistributionTable, SynthesisConfig, default_table, jitter_heavy_table, load_table
from .taxonomy import TaxonomyThresholds

BUILTIN_TABLES = {"default": default_table, "jitter_heavy": jitter_heavy_table}
_THRESHOLD_KEYS = {f.name for f in fields(TaxonomyThresholds)}
_SYNTH_KEYS = {"max_rejection_attempts", "overlap_iou_threshold"}


class ConfigError(ValueError):
    """The configuration file is malformed or references missing files."""


@dataclass(frozen=True)
class CodecConfig:
    sigma: float = 2.0
    input_size: tuple[int, int] = (48, 64)
    heatmap_size: tuple[int, int] = (24, 32)


@dataclass(frozen=True)
class ToyConfig:
    train_samples: int = 2000
    eval_samples: int = 200
    table: str = "jitter_heavy"
    seed: int = 0


@dataclass
class GlobalConfig:
    skeleton: Optional[str] = None
    table: str = "default"
    log_level: str = "INFO"
    synthesis: dict = field(default_factory=dict)
    codec: dict = field(default_factory=dict)
    refiner: dict = field(default_factory=dict)
    toy: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        # fail early on typos and missing files rather than mid-run
        for path_key in ("skeleton",):
            p = getattr(self, path_key)
            if p is not None and not self._resolve(p).is_file():
                raise ConfigError(f"{path_key}: file not found: {p}")
        for name, t in (("table", self.table), ("toy.table", self.toy.get("table"))):
            if t is not None and t not in BUILTIN_TABLES and not self._resolve(t).is_file():
                raise ConfigError(f"{name}: not a builtin table and file not found: {t}")
        unknown = set(self.synthesis) - _THRESHOLD_KEYS - _SYNTH_KEYS
        if unknown:
            raise ConfigError(f"synthesis: unknown keys {sorted(unknown)}")
        for section, cls in (("codec", CodecConfig), ("toy", ToyConfig)):
            unknown = set(getattr(self, section)) - {f.name for f in fields(cls)}
            if unknown:
                raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
        unknown = set(self.eval) - {"max_dets", "oks_thresholds"}
        if unknown:
            raise ConfigError(f"eval: unknown keys {sorted(unknown)}")
        try:
            self.refiner_config()
            self.synthesis_config()
            self.eval_params()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def skeleton_spec(self) -> SkeletonSpec:
        return coco_skeleton() if self.skeleton is None else load_skeleton(self._resolve(self.skeleton))

    def _table(self, name: str, spec: SkeletonSpec) -> ErrorDistributionTable:
        if name in BUILTIN_TABLES:
            return BUILTIN_TABLES[name](spec)
        return load_table(self._resolve(name), spec)

    def error_table(self, spec: SkeletonSpec, override: Optional[str] = None) -> ErrorDistributionTable:
        return self._table(override or self.table, spec)

    def toy_config(self) -> ToyConfig:
        return ToyConfig(**self.toy)

    def toy_table(self, spec: SkeletonSpec) -> ErrorDistributionTable:
        return self._table(self.toy_config().table, spec)

    def thresholds(self) -> TaxonomyThresholds:
        return TaxonomyThresholds(**{k: v for k, v in self.synthesis.items() if k in _THRESHOLD_KEYS})

    def synthesis_config(self, seed: int = 0) -> SynthesisConfig:
        kw = {k: v for k, v in self.synthesis.items() if k in _SYNTH_KEYS}
        return SynthesisConfig(thresholds=self.thresholds(), rng_seed=seed, **kw)

    def codec_config(self) -> CodecConfig:
        c = dict(self.codec)
        for k in ("input_size", "heatmap_size"):
            if k in c:
                c[k] = tuple(c[k])
        return CodecConfig(**c)

    def refiner_config(self, **overrides) -> RefinerConfig:
        d = dict(self.refiner)
        codec = self.codec_config()
        d.setdefault("input_size", list(codec.input_size))
        d.setdefault("heatmap_size", list(codec.heatmap_size))
        d.setdefault("input_sigma", codec.sigma)
        d.update(overrides)
        return RefinerConfig.from_dict(d)

    def eval_params(self) -> EvalParams:
        kw: dict[str, Any] = {}
        if "max_dets" in self.eval:
            kw["max_dets"] = int(self.eval["max_dets"])
        if "oks_thresholds" in self.eval:
            kw["oks_thresholds"] = tuple(float(t) for t in self.eval["oks_thresholds"])
        return EvalParams(**kw)

    def to_dict(self) -> dict:
        return {
            "skeleton": self.skeleton,
            "table": self.table,
            "log_level": self.log_level,
            "synthesis": dict(self.synthesis),
            "codec": dict(self.codec),
            "refiner": dict(self.refiner),
            "toy": dict(self.toy),
            "eval": dict(self.eval),
        }

    def digest(self) -> str:
        """sha256 of the canonical JSON form; identical configs hash identically."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=_jsonable).encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, (tuple, Path)):
        return list(v) if isinstance(v, tuple) else str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def load_config(path: Optional[str | Path]) -> GlobalConfig:
    if path is None:
        return GlobalConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    known = {f.name for f in fields(GlobalConfig)} - {"base_dir"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for k in ("synthesis", "codec", "refiner", "toy", "eval"):
        if data.get(k) is None:
            data[k] = {}
        elif not isinstance(data[k], dict):
            raise ConfigError(f"{path}: '{k}' must be a mapping")
    return GlobalConfig(**data, base_dir=path.parent)
