"""YAML configuration parsing for the pipeline stages.

A config file is a key/value tree with optional sections ``data``,
``pretrain``, ``bank``, ``model``, ``meta``, ``finetune``, ``experiment``.
Missing sections fall back to package defaults (which reproduce the built-in
benchmark); unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .autoencoder import PretrainConfig
from .data import CitySpec, SynthSpec, draw_motif_library
from .errors import ConfigError
from .forecaster import ForecastConfig
from .meta import FinetuneConfig, MetaConfig


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, Mapping):
        raise ConfigError(f"{path}: config root must be a mapping")
    return dict(tree)


def _build(cls, section: Mapping[str, Any], name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    coerced = {}
    for f in fields(cls):
        if f.name in section:
            value = section[f.name]
            if isinstance(value, list):
                value = tuple(value)
            coerced[f.name] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


DEFAULT_CITIES = {
    "src0": {"nodes": 20, "days": 14, "role": "source"},
    "src1": {"nodes": 20, "days": 14, "role": "source"},
    "src2": {"nodes": 20, "days": 14, "role": "source"},
    "tgt": {"nodes": 20, "days": 7, "role": "target", "few_shot_days": 2},
}
_BASE_MIXTURE = (0.55, 0.2, 0.1, 0.08, 0.07)


def synth_spec_from_mapping(section: Mapping[str, Any] | None) -> SynthSpec:
    """Build a SynthSpec; omitted fields use the benchmark defaults."""
    section = dict(section or {})
    known = {
        "seed",
        "pattern_count",
        "noise_std",
        "interval_minutes",
        "level",
        "baseline_amplitude",
        "block_hours",
        "motif_amplitude",
        "cities",
    }
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"data: unknown keys {sorted(unknown)}; allowed: {sorted(known)}")
    seed = int(section.get("seed", 0))
    pattern_count = int(section.get("pattern_count", 5))
    interval = int(section.get("interval_minutes", 5))
    if interval <= 0 or 60 % interval != 0:
        raise ConfigError(f"interval_minutes must divide 60, got {interval}")

    cities_cfg = section.get("cities", DEFAULT_CITIES)
    cities: dict[str, CitySpec] = {}
    rotation = 0
    for cid, c in cities_cfg.items():
        c = dict(c)
        allowed = {"nodes", "days", "role", "few_shot_days", "mixture"}
        bad = set(c) - allowed
        if bad:
            raise ConfigError(f"data.cities.{cid}: unknown keys {sorted(bad)}")
        if "mixture" in c:
            mixture = tuple(float(w) for w in c["mixture"])
        else:
            base = (
                np.array(_BASE_MIXTURE)
                if pattern_count == len(_BASE_MIXTURE)
                else np.full(pattern_count, 1.0 / pattern_count)
            )
            shift = rotation * 2 if c.get("role", "source") == "source" else 1
            mixture = tuple(np.roll(base, shift))
            if c.get("role", "source") == "source":
                rotation += 1
        try:
            cities[str(cid)] = CitySpec(
                node_count=int(c["nodes"]),
                day_count=int(c["days"]),
                mixture=mixture,
                role=str(c.get("role", "source")),
                few_shot_days=int(c.get("few_shot_days", 2)),
            )
        except KeyError as exc:
            raise ConfigError(f"data.cities.{cid}: missing key {exc}") from exc

    motifs = draw_motif_library(
        pattern_count,
        steps=60 // interval,
        amplitude=float(section.get("motif_amplitude", 3.0)),
        seed=seed,
    )
    return SynthSpec(
        pattern_count=pattern_count,
        motifs=motifs,
        noise_std=float(section.get("noise_std", 0.1)),
        cities=cities,
        seed=seed,
        interval_minutes=interval,
        level=float(section.get("level", 60.0)),
        baseline_amplitude=float(section.get("baseline_amplitude", 0.5)),
        block_hours=int(section.get("block_hours", 4)),
    )


@dataclass(frozen=True)
class BankBuildConfig:
    k: int | str = "auto"
    k_grid: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8, 9, 10)
    sample_ratio: float = 0.1
    n_init: int = 10
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.k, str) and self.k != "auto":
            raise ConfigError(f"bank.k must be 'auto' or an integer, got {self.k!r}")
        if not self.k_grid:
            raise ConfigError("bank.k_grid must be non-empty")


@dataclass(frozen=True)
class ExperimentSettings:
    variants: tuple[str, ...] = ("full",)
    seeds: tuple[int, ...] = (0,)
    horizons: tuple[int, ...] = (1, 3, 6)

    def __post_init__(self):
        from .forecaster import VARIANTS

        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"experiment.variants: unknown variant {v!r}")
        if not self.seeds:
            raise ConfigError("experiment.seeds must be non-empty")


@dataclass(frozen=True)
class PipelineConfig:
    data: SynthSpec
    pretrain: PretrainConfig
    bank: BankBuildConfig
    model: ForecastConfig
    meta: MetaConfig
    finetune: FinetuneConfig
    experiment: ExperimentSettings

    @staticmethod
    def from_tree(tree: Mapping[str, Any]) -> "PipelineConfig":
        known = {"data", "pretrain", "bank", "model", "meta", "finetune", "experiment"}
        unknown = set(tree) - known
        if unknown:
            raise ConfigError(f"config: unknown sections {sorted(unknown)}")
        return PipelineConfig(
            data=synth_spec_from_mapping(tree.get("data")),
            pretrain=_build(PretrainConfig, tree.get("pretrain", {}), "pretrain"),
            bank=_build(BankBuildConfig, tree.get("bank", {}), "bank"),
            model=_build(ForecastConfig, tree.get("model", {}), "model"),
            meta=_build(MetaConfig, tree.get("meta", {}), "meta"),
            finetune=_build(FinetuneConfig, tree.get("finetune", {}), "finetune"),
            experiment=_build(ExperimentSettings, tree.get("experiment", {}), "experiment"),
        )

    @staticmethod
    def from_file(path: str | Path) -> "PipelineConfig":
        return PipelineConfig.from_tree(load_config_file(path))
