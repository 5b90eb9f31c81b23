"""Run configuration: scale profiles, INI files and command-line overrides.

A configuration is a set of sections holding typed values.  The ``desk``
and ``paper`` profiles bind every size hyperparameter; an INI file and
then explicit overrides replace individual keys.  Values keep the type of
the profile default, and list values are written comma-separated.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass, field
from pathlib import Path

SCALES = ("desk", "paper")

_COMMON = {
    "paths": {"input": "", "output": "out", "profiles": ""},
    "gp": {"length_scale": 2.0, "signal_variance": 0.0, "subsample": 200, "t_max_hours": 48.0, "grid_size": 101},
    "synth": {"window": 80, "mode": "noisy", "split_fraction": 0.9, "set_size": 20000},
    "training": {"stages": [0, 2, 4, 9], "epochs_per_stage": 100, "batch_size": 512, "conv_window": 61,
                 "filters": 50, "hidden": 50, "validation_pairs": 2000},
    "graph": {"probability_cutoff": 0.7, "lag_threshold": 0.025, "window_policy": "centered",
              "top_n": 1000, "k": 2.0, "cutoffs": [0.7, 0.8], "reference_threshold": 0.075},
    "autoenc": {"windows": [31, 41, 51, 61], "feature_dims": [10], "witnesses": [1, 2, 3, 5, 10],
                "target_edges": [100, 1000], "max_epochs": 200, "batch_size": 32, "occurrence_cap": 100000,
                "top_models": 3},
    "deepwide": {"depths": [2, 3], "widths": [16, 64], "epochs": 1000, "batch_size": 10, "max_degree": [3, 5, 10],
                 "max_genes": [100, 200, 500], "top_models": 10},
}

PROFILES = {
    "desk": _COMMON,
    "paper": {
        **_COMMON,
        "synth": {**_COMMON["synth"], "set_size": 1_000_000},
        "training": {**_COMMON["training"], "epochs_per_stage": 1000, "batch_size": 20000},
    },
}


class ConfigError(ValueError):
    pass


def _coerce(default, raw, where):
    if isinstance(raw, str):
        text = raw.strip()
        try:
            if isinstance(default, bool):
                return text.lower() in ("1", "true", "yes", "on")
            if isinstance(default, list):
                kind = type(default[0]) if default else str
                return [kind(v.strip()) for v in text.split(",") if v.strip()]
            return type(default)(text)
        except ValueError:
            raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None
    if isinstance(default, list):
        return list(raw)
    if isinstance(default, float) and isinstance(raw, int):
        return float(raw)
    return raw


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: copy.deepcopy(PROFILES["desk"]))
    seed: int = 0
    scale: str = "desk"
    workers: int = 1

    def __getitem__(self, section):
        return self.sections[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in self.sections or key not in self.sections[section]:
            raise ConfigError(f"unknown configuration key [{section}] {key}")
        self.sections[section][key] = _coerce(self.sections[section][key], value, f"[{section}] {key}")

    def validate(self) -> "RunConfig":
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        g = self.sections["graph"]
        if not 0.5 < g["probability_cutoff"] < 1.0:
            raise ConfigError("probability_cutoff must lie in (0.5, 1)")
        if not 0.0 < g["lag_threshold"] <= 1.0:
            raise ConfigError("lag_threshold must lie in (0, 1]")
        if self.sections["synth"]["mode"] not in ("ideal", "noisy"):
            raise ConfigError("synth mode must be ideal or noisy")
        return self

    def to_dict(self) -> dict:
        return {"seed": self.seed, "scale": self.scale, "workers": self.workers,
                "sections": copy.deepcopy(self.sections)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls(copy.deepcopy(PROFILES[d.get("scale", "desk")]), int(d.get("seed", 0)),
                  d.get("scale", "desk"), int(d.get("workers", 1)))
        for section, values in d.get("sections", {}).items():
            for key, value in values.items():
                cfg.set(section, key, value)
        return cfg.validate()


def load_config(path=None, scale: str = "desk", seed: int | None = None, workers: int | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then the INI file at ``path``, then ``overrides``."""
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}")
    cfg = RunConfig(copy.deepcopy(PROFILES[scale]), scale=scale)
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            for key, value in parser.items(section):
                if section == "run" and key in ("seed", "workers"):
                    setattr(cfg, key, int(value))
                else:
                    cfg.set(section, key, value)
    for (section, key), value in (overrides or {}).items():
        cfg.set(section, key, value)
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    return cfg.validate()
