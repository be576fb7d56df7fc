"""Experiment configuration loaded from YAML or JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import InvalidConfig
from .linalg import DEFAULT_DAMPING
from .prune.stages import BACKENDS
from .evo import INIT_MODES, SearchConfig
from .fitness import METRICS
from .toydiff.model import ModelConfig


@dataclass
class DataSection:
    seed: int = 0
    size: int = 2000


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainSection:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class SearchSection:
    population_size: int = 20
    offspring: int = 16
    survivors: int = 4
    generations: int = 100
    max_mutation: int | None = None
    init: str = "mixed"
    seed: int = 0


@dataclass
class ExperimentConfig:
    """Every knob of a run; reports embed ``to_dict()`` of the resolved config."""

    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    search: SearchSection = field(default_factory=SearchSection)
    n_stages: int = 10
    backend: str = "obs"
    l_max: int | None = None  # 16 for obs/wanda, model depth for layerdrop
    target_level: int | None = None  # half of l_max
    calib_size: int = 1024
    calib_seed: int = 0
    damping: float = DEFAULT_DAMPING
    mlp_group_size: int | None = None
    metric: str = "ssim_vs_dense"
    fitness_samples: int = 64
    fitness_seed: int = 0
    sampler_steps: int = 20
    eval_samples: int = 256
    eval_seed: int = 1000
    compare_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.resolve()

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**self.model)
        except TypeError as exc:
            raise InvalidConfig(f"bad model section: {exc}") from exc

    def resolve(self) -> "ExperimentConfig":
        if self.backend not in BACKENDS:
            raise InvalidConfig(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.metric not in METRICS:
            raise InvalidConfig(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.search.init not in INIT_MODES:
            raise InvalidConfig(f"search.init must be one of {INIT_MODES}")
        depth = self.model_config().depth
        if self.l_max is None:
            self.l_max = depth if self.backend == "layerdrop" else 16
        if self.backend == "layerdrop" and self.l_max > depth:
            raise InvalidConfig(f"layerdrop l_max {self.l_max} exceeds model depth {depth}")
        if self.target_level is None:
            self.target_level = self.l_max // 2
        if not 0 <= self.target_level <= self.l_max:
            raise InvalidConfig(f"target_level {self.target_level} outside [0, {self.l_max}]")
        for name in ("n_stages", "calib_size", "fitness_samples", "sampler_steps", "eval_samples"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.sampler_steps % self.n_stages:
            raise InvalidConfig(f"sampler_steps {self.sampler_steps} not divisible by n_stages {self.n_stages}")
        self.search_config()
        return self

    def search_config(self, seed: int | None = None, generations: int | None = None) -> SearchConfig:
        s = self.search
        return SearchConfig(
            n_stages=self.n_stages,
            l_max=self.l_max,
            target_level=self.target_level,
            population_size=s.population_size,
            offspring=s.offspring,
            survivors=s.survivors,
            generations=s.generations if generations is None else generations,
            max_mutation=s.max_mutation,
            init=s.init,
            seed=s.seed if seed is None else seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        sections = {"data": DataSection, "schedule": ScheduleSection, "train": TrainSection, "search": SearchSection}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                try:
                    kwargs[key] = sections[key](**(value or {}))
                except TypeError as exc:
                    raise InvalidConfig(f"bad {key} section: {exc}") from exc
            elif key == "model":
                kwargs[key] = {**ModelConfig().to_dict(), **(value or {})}
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Apply CLI flags; ``None`` values are ignored."""
        raw = self.to_dict()
        if overrides.get("backend") is not None and overrides["backend"] != raw["backend"]:
            # backend-dependent defaults must be re-derived
            raw["l_max"] = None if overrides.get("l_max") is None else overrides["l_max"]
            raw["target_level"] = None
        for key in ("backend", "n_stages", "target_level", "output_dir", "metric", "l_max"):
            if overrides.get(key) is not None:
                raw[key] = overrides[key]
        seed = overrides.get("seed")
        if seed is not None:
            raw["data"]["seed"] = raw["train"]["seed"] = raw["search"]["seed"] = seed
            raw["calib_seed"] = raw["fitness_seed"] = seed
        if overrides.get("generations") is not None:
            raw["search"]["generations"] = overrides["generations"]
        return ExperimentConfig.from_dict(raw)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file {path} not found")
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise InvalidConfig(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise InvalidConfig(f"{path} must contain a mapping")
    return ExperimentConfig.from_dict(raw)
