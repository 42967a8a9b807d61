"""Project configuration: metric, analysis battery and calibration settings.

Stored as JSON. Parsing is strict: unknown keys are rejected so that typos
fail loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .betweenness import AnalysisSpec, table1_battery
from .errors import ConfigError
from .metric import MetricParams
from .network import DEFAULT_SNAP_TOLERANCE

__all__ = ["ProjectConfig", "load_config", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
PATH_KEYS = ("network", "network_t1", "network_t2", "flows", "counts", "baseline", "model", "out")


@dataclass(frozen=True)
class ProjectConfig:
    """Everything needed to rerun an analysis and calibration.

    ``seed`` drives both the routing randomization and the cross-validation
    shuffles; the metric's own seed field is ignored in favour of it.
    """

    metric: MetricParams = field(default_factory=MetricParams)
    analyses: tuple = field(default_factory=lambda: tuple(table1_battery()))
    paths: dict = field(default_factory=dict)
    seed: int = 1
    junction_tolerance: float = DEFAULT_SNAP_TOLERANCE
    snap_tolerance: float = 20.0
    lambda_w: float = 0.7
    folds: int = 7
    repetitions: int = 50
    penalty_grid: tuple | None = None
    lambda_r: float | None = None
    fit_intercept: bool = True
    nonnegative: bool = False

    def __post_init__(self):
        bad = set(self.paths) - set(PATH_KEYS)
        if bad:
            raise ConfigError(f"unknown path keys: {sorted(bad)}; allowed: {list(PATH_KEYS)}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed}")
        if not 0.0 <= self.lambda_w <= 1.0:
            raise ConfigError(f"lambda_w must lie in [0, 1], got {self.lambda_w}")
        if self.folds < 2 or self.repetitions < 1:
            raise ConfigError("folds must be >= 2 and repetitions >= 1")
        if self.lambda_r is not None and self.lambda_r < 0:
            raise ConfigError("lambda_r must be >= 0")
        if self.penalty_grid is not None and (len(self.penalty_grid) == 0 or min(self.penalty_grid) < 0):
            raise ConfigError("penalty_grid must be a non-empty list of nonnegative values")
        if not self.junction_tolerance >= 0 or not self.snap_tolerance > 0:
            raise ConfigError("tolerances must be positive")

    @property
    def metric_params(self) -> MetricParams:
        return self.metric.replace(seed=self.seed)

    @property
    def weight_fields(self) -> list[str]:
        names = {s.origin for s in self.analyses} | {s.destination for s in self.analyses}
        return sorted(names)

    def with_overrides(self, seed=None, **kw) -> "ProjectConfig":
        if seed is not None:
            kw["seed"] = seed
        return replace(self, **kw)

    def to_dict(self) -> dict:
        metric = self.metric.to_dict()
        metric.pop("seed")
        return {
            "schema_version": SCHEMA_VERSION,
            "metric": metric,
            "analyses": [s.to_dict() for s in self.analyses],
            "paths": dict(self.paths),
            "seed": self.seed,
            "junction_tolerance": self.junction_tolerance,
            "snap_tolerance": self.snap_tolerance,
            "lambda_w": self.lambda_w,
            "folds": self.folds,
            "repetitions": self.repetitions,
            "penalty_grid": None if self.penalty_grid is None else list(self.penalty_grid),
            "lambda_r": self.lambda_r,
            "fit_intercept": self.fit_intercept,
            "nonnegative": self.nonnegative,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version!r}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "metric" in d:
            m = d["metric"]
            if not isinstance(m, dict):
                raise ConfigError("'metric' must be an object")
            if "seed" in m:
                raise ConfigError("set the seed at top level, not inside 'metric'")
            d["metric"] = MetricParams.from_dict(m)
        if "analyses" in d:
            if not isinstance(d["analyses"], list):
                raise ConfigError("'analyses' must be a list")
            d["analyses"] = tuple(AnalysisSpec.from_dict(a) for a in d["analyses"])
        if d.get("penalty_grid") is not None:
            d["penalty_grid"] = tuple(float(v) for v in d["penalty_grid"])
        if "paths" in d and not isinstance(d["paths"], dict):
            raise ConfigError("'paths' must be an object")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"invalid config: {e}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())


def load_config(path) -> ProjectConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    return ProjectConfig.from_dict(doc)
