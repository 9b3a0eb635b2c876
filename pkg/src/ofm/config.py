"""Experiment configuration: loading (TOML or JSON), validation, snapshots."""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import FmConfig
from .benchmark import BenchmarkTask, task_from_dict
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
METHODS = ("ofm", "fm", "otcfm", "rf", "crf")
PLOT_KINDS = ("scatter", "traj", "loss")

# method -> fixed FmConfig fields
_FM_PRESETS = {
    "fm": {"plan": "independent", "field_kind": "mlp", "rounds": 0},
    "otcfm": {"plan": "minibatch", "field_kind": "mlp", "rounds": 0},
    "rf": {"field_kind": "mlp"},
    "crf": {"field_kind": "potential"},
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    method: str
    task: dict
    train: object                  # TrainConfig for ofm, FmConfig otherwise
    out: str = "runs/default"
    plots: tuple = ()
    checkpoint_every: int = 0
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def build_task(self) -> BenchmarkTask:
        return task_from_dict(self.task)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "method": self.method,
                "task": dict(self.task), "train": self.train.to_dict(), "out": self.out,
                "plots": list(self.plots), "checkpoint_every": self.checkpoint_every}


def parse_config(data: dict, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Validate a raw mapping; raises :class:`ConfigError` before any compute."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a table/object")
    data = json.loads(json.dumps(data))  # deep copy; TOML and JSON share plain types
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    known = {"method", "task", "train", "out", "plots", "checkpoint_every", "plan"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")

    method = data.get("method")
    if method not in METHODS:
        raise ConfigError("method", f"expected one of {METHODS}, got {method!r}")

    task = data.get("task")
    if not isinstance(task, dict) or "kind" not in task:
        raise ConfigError("task", "a task table with a 'kind' key is required")
    try:
        task_from_dict(task)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("task", str(exc)) from None

    train = dict(data.get("train", {}))
    if "plan" in data:
        train["plan"] = data["plan"]
    if seed is not None:
        train["seed"] = int(seed)
    if method == "ofm":
        cls = TrainConfig
    else:
        cls = FmConfig
        preset = _FM_PRESETS[method]
        for key, val in preset.items():
            if key in train and train[key] != val:
                raise ConfigError(f"train.{key}", f"method {method!r} requires {val!r}")
            train[key] = val
        if method in ("rf", "crf"):
            train.setdefault("rounds", 2)
    try:
        train_cfg = cls.from_dict(train)
    except (TypeError, ValueError) as exc:
        name = str(exc)
        raise ConfigError("train", name) from None

    plots = data.get("plots", [])
    if isinstance(plots, str):
        plots = [plots]
    bad = [p for p in plots if p not in PLOT_KINDS]
    if bad:
        raise ConfigError("plots", f"unknown plot kind {bad[0]!r}; expected {PLOT_KINDS}")
    every = data.get("checkpoint_every", 0)
    if not isinstance(every, int) or every < 0:
        raise ConfigError("checkpoint_every", "must be a nonnegative integer")
    return ExperimentConfig(method, task, train_cfg, out or data.get("out", "runs/default"),
                            tuple(plots), every)


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    with path.open("rb") as fh:
        return tomllib.load(fh)


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    try:
        raw = read_config_file(path)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
    return parse_config(raw, seed, out)


def write_snapshot(config: ExperimentConfig, path) -> None:
    """Resolved configuration as JSON; loading it reproduces the run."""
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
