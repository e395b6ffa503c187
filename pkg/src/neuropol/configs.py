"""Run configuration: JSON schema validation, per-problem defaults, hashing.

A run config names the problem, grid, model, training, and reliability
settings plus all seeds.  Configs are strict: unknown keys are rejected by
the shipped JSON schema.  Every command writes the fully resolved config it
ran with into the output directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources

import jsonschema

from .grids import Grid
from .model import ModelConfig
from .physics import LossWeights, StochProjSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _load_schema(name: str) -> dict:
    with resources.files("neuropol.schemas").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


_SCHEMAS: dict[str, dict] = {}


def schema(name: str) -> dict:
    if name not in _SCHEMAS:
        _SCHEMAS[name] = _load_schema(name)
    return _SCHEMAS[name]


def validate_json(payload: dict, schema_name: str):
    try:
        jsonschema.validate(payload, schema(schema_name))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{schema_name}: {exc.message}") from exc


# Per-problem defaults.  Grids, sample counts, epochs, and limit-state
# thresholds follow the benchmark setups; network sizes and scales are the
# package defaults and are freely overridable.
PROBLEM_DEFAULTS: dict[str, dict] = {
    "burgers": {
        "grid": {"spatial_shape": [81], "bounds": [[0.0, 1.0]], "time_axis": [81, 1.0]},
        "n_train": 300,
        "n_test": 1500,
        "model": {"d_u": 32, "n_layers": 3, "input_scale": 0.5, "output_scale": 1.0},
        "train": {"epochs": 300, "loss_weights": {"data": 0.0, "pde": 1.0, "bc": 10.0, "ic": 10.0}},
        "reliability": {"thresholds": [1.22, 1.31, 1.5], "n_samples": 1500, "source": "surrogate"},
    },
    "nagumo": {
        "grid": {"spatial_shape": [65], "bounds": [[0.0, 1.0]], "time_axis": [65, 1.0]},
        "n_train": 800,
        "n_test": 1200,
        "model": {"d_u": 32, "n_layers": 5, "input_scale": 3.0, "output_scale": 0.5},
        "train": {"epochs": 400, "loss_weights": {"data": 0.0, "pde": 1.0, "bc": 10.0, "ic": 10.0}},
        "reliability": {"thresholds": [0.11, 0.15, 0.17], "n_samples": 1200, "source": "surrogate"},
    },
    "poisson": {
        "grid": {"spatial_shape": [65, 65], "bounds": [[-1.0, 1.0], [-1.0, 1.0]]},
        "n_train": 500,
        "n_test": 1500,
        "model": {
            "d_u": 32,
            "n_layers": 5,
            "vsn_after_uplift": True,
            "input_scale": 0.01,
            "output_scale": 4.0,
        },
        "train": {"epochs": 350, "loss_weights": {"data": 0.0, "pde": 1.0, "bc": 10.0, "ic": 0.0}},
        "reliability": {"thresholds": [1.66, 1.94, 2.21], "n_samples": 1500, "source": "surrogate"},
    },
    "darcy": {
        "grid": {"spatial_shape": [64, 64], "bounds": [[0.0, 1.0], [0.0, 1.0]]},
        "n_train": 1000,
        "n_test": 1000,
        "model": {"d_u": 32, "n_layers": 4, "input_scale": 0.5, "output_scale": 0.1},
        "train": {"epochs": 300, "loss_weights": {"data": 0.0, "pde": 1.0, "bc": 10.0, "ic": 0.0}},
        "reliability": {"thresholds": [0.076, 0.078, 0.08], "n_samples": 1000, "source": "surrogate"},
    },
}

DEFAULT_SEEDS = {"dataset": 1234, "model": 1, "train": 7, "reliability": 99}


def _deep_update(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """Validated, fully resolved run configuration."""

    def __init__(self, raw: dict):
        validate_json(raw, "run_config.schema.json")
        problem = raw["problem"]
        if problem not in PROBLEM_DEFAULTS:
            raise ConfigError(f"unknown problem {problem!r}")
        resolved = _deep_update(PROBLEM_DEFAULTS[problem], raw)
        resolved["problem"] = problem
        resolved.setdefault("seeds", {})
        resolved["seeds"] = _deep_update(DEFAULT_SEEDS, resolved["seeds"])
        resolved.setdefault("out", f"runs/{problem}")
        validate_json(resolved, "run_config.schema.json")
        self.data = resolved

    @staticmethod
    def from_file(path: str, overrides: dict | None = None) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if overrides:
            raw = _deep_update(raw, overrides)
        return RunConfig(raw)

    # -- typed views ----------------------------------------------------------

    @property
    def problem(self) -> str:
        return self.data["problem"]

    @property
    def out_dir(self) -> str:
        return self.data["out"]

    def grid(self) -> Grid:
        return Grid.from_dict(self.data["grid"])

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**ModelConfig().to_dict(), **self.data.get("model", {})})

    def train_config(self) -> TrainConfig:
        d = dict(self.data.get("train", {}))
        lw = d.pop("loss_weights", {})
        spd = d.pop("stochproj", {})
        base = TrainConfig(
            loss_weights=LossWeights(**lw) if lw else LossWeights(),
            stochproj=StochProjSpec(**spd) if spd else StochProjSpec(),
        )
        for k, v in d.items():
            if not hasattr(base, k):
                raise ConfigError(f"unknown train option {k!r}")
            setattr(base, k, v)
        base.__post_init__()
        if base.stochproj.seed == 0:
            base.stochproj = StochProjSpec(
                base.stochproj.radius_factor,
                base.stochproj.n_neighbors,
                base.stochproj.eps_reg,
                self.seed("train"),
            )
        base.seed = self.seed("train") if "seed" not in d else base.seed
        return base

    def seed(self, name: str) -> int:
        return int(self.data["seeds"][name])

    def reliability_spec(self) -> dict:
        return dict(self.data["reliability"])

    # -- provenance -----------------------------------------------------------

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def write_resolved(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
            fh.write(self.canonical_json() + "\n")
