"""Run configuration: a nested YAML file validated against fixed defaults.

Unknown keys are rejected so that typos fail loudly instead of silently
running with defaults.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DataIOError
from .formats import sha256_hex
from .hyper import ALPHA_FAMILIES, AlphaPrior, beta_grid
from .parallel import SHUFFLE_MODES

DEFAULTS = {
    "seed": 0,
    "run": {
        "mode": "parallel",
        "iterations": 100,
        "superclusters": 4,
        "workers": 1,
        "sweeps_per_shuffle": 1,
        "shuffle_mode": "derived",
        "snapshot_period": 10,
    },
    "alpha_prior": {"family": "gamma", "shape": 1.0, "rate": 1.0, "log_mean": 0.0, "log_sd": 1.0},
    "beta_grid": {"n_points": 100, "low": 0.01, "high": 100.0},
    "calibration": {"fraction": 0.01, "min_rows": 500, "iterations": 200},
}

MODES = ("serial", "parallel")


@dataclass(frozen=True)
class GridSpec:
    n_points: int = 100
    low: float = 0.01
    high: float = 100.0

    def points(self) -> np.ndarray:
        return beta_grid(self.n_points, self.low, self.high)


@dataclass(frozen=True)
class CalibrationSpec:
    fraction: float = 0.01
    min_rows: int = 500
    iterations: int = 200


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "parallel"
    iterations: int = 100
    superclusters: int = 4
    workers: int = 1
    sweeps_per_shuffle: int = 1
    shuffle_mode: str = "derived"
    snapshot_period: int = 10
    alpha_prior: AlphaPrior = field(default_factory=AlphaPrior)
    beta_grid: GridSpec = field(default_factory=GridSpec)
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.superclusters < 1:
            raise ConfigError("superclusters (K) must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers (W) must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.sweeps_per_shuffle < 1:
            raise ConfigError("sweeps_per_shuffle must be >= 1")
        if self.shuffle_mode not in SHUFFLE_MODES:
            raise ConfigError(f"shuffle_mode must be one of {SHUFFLE_MODES}")
        if self.snapshot_period < 0:
            raise ConfigError("snapshot_period must be >= 0 (0 disables periodic snapshots)")
        if self.alpha_prior.family == "flat":
            raise ConfigError("a run needs a proper alpha prior")
        g = self.beta_grid
        if g.n_points < 1 or not 0 < g.low <= g.high or (g.n_points > 1 and g.low == g.high):
            raise ConfigError("beta_grid needs n_points >= 1 and 0 < low < high")
        c = self.calibration
        if not 0 <= c.fraction <= 1 or c.min_rows < 0 or c.iterations < 0:
            raise ConfigError("calibration needs fraction in [0, 1], min_rows >= 0, iterations >= 0")

    def to_dict(self) -> dict:
        a = self.alpha_prior
        return {
            "seed": self.seed,
            "run": {
                "mode": self.mode,
                "iterations": self.iterations,
                "superclusters": self.superclusters,
                "workers": self.workers,
                "sweeps_per_shuffle": self.sweeps_per_shuffle,
                "shuffle_mode": self.shuffle_mode,
                "snapshot_period": self.snapshot_period,
            },
            "alpha_prior": {"family": a.family, "shape": a.shape, "rate": a.rate,
                            "log_mean": a.log_mean, "log_sd": a.log_sd},
            "beta_grid": {"n_points": self.beta_grid.n_points, "low": self.beta_grid.low,
                          "high": self.beta_grid.high},
            "calibration": {"fraction": self.calibration.fraction, "min_rows": self.calibration.min_rows,
                            "iterations": self.calibration.iterations},
        }

    def hash(self) -> str:
        """Digest of everything that affects results. Workers and the
        iteration budget are excluded: neither changes any record."""
        d = self.to_dict()
        del d["run"]["workers"]
        del d["run"]["iterations"]
        del d["run"]["snapshot_period"]
        return sha256_hex(json.dumps(d, sort_keys=True))[:16]

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, value in changes.items():
            if key == "seed":
                d["seed"] = value
            elif key in d["run"]:
                d["run"][key] = value
            else:
                raise ConfigError(f"unknown override {key!r}")
        return config_from_dict(d)


def _merge(defaults: dict, given: dict, where: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{where}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a section")
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a scalar")
            out[key] = value
    return out


def _typed(value, kind, path):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


def config_from_dict(given: dict) -> RunConfig:
    if not isinstance(given, dict):
        raise ConfigError("config must be a mapping")
    d = _merge(DEFAULTS, given)
    r, a, g, c = d["run"], d["alpha_prior"], d["beta_grid"], d["calibration"]
    if a["family"] not in ALPHA_FAMILIES:
        raise ConfigError(f"alpha_prior.family must be one of {ALPHA_FAMILIES}")
    try:
        return RunConfig(
            seed=_typed(d["seed"], int, "seed"),
            mode=_typed(r["mode"], str, "run.mode"),
            iterations=_typed(r["iterations"], int, "run.iterations"),
            superclusters=_typed(r["superclusters"], int, "run.superclusters"),
            workers=_typed(r["workers"], int, "run.workers"),
            sweeps_per_shuffle=_typed(r["sweeps_per_shuffle"], int, "run.sweeps_per_shuffle"),
            shuffle_mode=_typed(r["shuffle_mode"], str, "run.shuffle_mode"),
            snapshot_period=_typed(r["snapshot_period"], int, "run.snapshot_period"),
            alpha_prior=AlphaPrior(
                _typed(a["family"], str, "alpha_prior.family"),
                _typed(a["shape"], float, "alpha_prior.shape"),
                _typed(a["rate"], float, "alpha_prior.rate"),
                _typed(a["log_mean"], float, "alpha_prior.log_mean"),
                _typed(a["log_sd"], float, "alpha_prior.log_sd"),
            ),
            beta_grid=GridSpec(_typed(g["n_points"], int, "beta_grid.n_points"),
                               _typed(g["low"], float, "beta_grid.low"),
                               _typed(g["high"], float, "beta_grid.high")),
            calibration=CalibrationSpec(_typed(c["fraction"], float, "calibration.fraction"),
                                        _typed(c["min_rows"], int, "calibration.min_rows"),
                                        _typed(c["iterations"], int, "calibration.iterations")),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataIOError(f"cannot read config {path}: {e}") from e
    try:
        given = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return config_from_dict(given)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def load_yaml_mapping(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return doc
