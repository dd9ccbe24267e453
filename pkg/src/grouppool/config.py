"""Run configuration: one TOML file with [model], [train], [data] and [paths] tables."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .data import GeneratorConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class Paths:
    data_dir: str = "data"
    run_dir: str = "runs/default"

    @property
    def train_clips(self) -> Path:
        return Path(self.data_dir) / "train.jsonl"

    @property
    def test_clips(self) -> Path:
        return Path(self.data_dir) / "test.jsonl"

    @property
    def checkpoint(self) -> Path:
        return Path(self.run_dir) / "checkpoint.json"

    @property
    def metrics(self) -> Path:
        return Path(self.run_dir) / "metrics.jsonl"

    @property
    def traces(self) -> Path:
        return Path(self.run_dir) / "traces.jsonl"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        validate(self)


def _build(cls, table: dict, section: str):
    if not isinstance(table, dict):
        raise ValueError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cls(**table)


def validate(cfg: RunConfig) -> None:
    """Cross-section checks that must hold before any work starts."""
    m, d = cfg.model, cfg.data
    if m.d_x != d.d_x:
        raise ValueError(f"model.d_x={m.d_x} does not match data.d_x={d.d_x}")
    if m.n_actions != d.n_actions or m.n_activities != d.n_activities:
        raise ValueError("model and data disagree on class counts")
    if m.scheme.value in ("hap", "subgroup-gap") and m.n_subgroups != d.n_subgroups:
        raise ValueError(f"scheme {m.scheme.value} expects {m.n_subgroups} subgroups, data makes {d.n_subgroups}")


def load_config(path: str | Path | None = None, overrides: dict[str, dict] | None = None) -> RunConfig:
    """Parse ``path`` (defaults when None) and apply ``{section: {key: value}}`` overrides."""
    doc: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    unknown = sorted(set(doc) - {"model", "train", "data", "paths"})
    if unknown:
        raise ValueError(f"unknown section(s): {', '.join(unknown)}")
    for section, values in (overrides or {}).items():
        doc.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    data = _build(GeneratorConfig, doc.get("data", {}), "data")
    model_table = dict(doc.get("model", {}))
    # model dims default to whatever the data generator produces
    model_table.setdefault("d_x", data.d_x)
    model_table.setdefault("n_actions", data.n_actions)
    model_table.setdefault("n_activities", data.n_activities)
    model_table.setdefault("n_subgroups", data.n_subgroups)
    return RunConfig(
        model=_build(ModelConfig, model_table, "model"),
        train=_build(TrainConfig, doc.get("train", {}), "train"),
        data=data,
        paths=_build(Paths, doc.get("paths", {}), "paths"),
    )
