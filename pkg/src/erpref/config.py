"""Pipeline configuration read from a YAML file.

Every section is optional except ``seed``::

    seed: 7
    workdir: run1
    simulation: {n_participants: 31, ...}   # SimulationConfig fields
    filter: {low_hz: 0.2, high_hz: 35, order: 4, zero_phase: true}
    rejection: {mode: target_fraction, fraction: 0.122}
    evaluation: {n_perm: 1000, alpha: 0.05}
    stats: {bin_width_ms: 25, range_ms: [100, 500], channels: [Fz, Pz]}
    jobs: 1
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .preprocess import FilterSpec, RejectionPolicy
from .synthsession import SimulationConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvaluationSettings:
    n_perm: int = 1000
    alpha: float = 0.05

    def __post_init__(self):
        if int(self.n_perm) != self.n_perm or self.n_perm < 1:
            raise ValueError("n_perm must be a positive integer")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")


@dataclass(frozen=True)
class StatsSettings:
    bin_width_ms: float = 25.0
    range_ms: tuple[float, float] = (100.0, 500.0)
    channels: tuple[str, ...] = ("Fz", "Pz")

    def __post_init__(self):
        object.__setattr__(self, "range_ms", tuple(float(v) for v in self.range_ms))
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.range_ms) != 2 or not self.range_ms[0] < self.range_ms[1]:
            raise ValueError("range_ms must be [start, stop] with start < stop")
        if not self.bin_width_ms > 0:
            raise ValueError("bin_width_ms must be positive")
        if not self.channels:
            raise ValueError("at least one channel of interest is needed")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    workdir: Path = Path("erpref-run")
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    filter: FilterSpec = field(default_factory=FilterSpec)
    rejection: RejectionPolicy = field(default_factory=RejectionPolicy)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    stats: StatsSettings = field(default_factory=StatsSettings)
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "workdir", Path(self.workdir))
        # the simulator seed always follows the pipeline seed
        if self.simulation.rng_seed != self.seed:
            object.__setattr__(self, "simulation", self.simulation.replace(rng_seed=self.seed))
        unknown = [c for c in self.stats.channels if c not in self.simulation.channel_labels]
        if unknown:
            raise ConfigError(f"stats channels not in montage: {unknown}")
        self.filter.validate(self.simulation.sampling_rate_hz)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        sim = dataclasses.asdict(self.simulation)
        sim["rating_distribution"] = list(sim["rating_distribution"])
        sim["rating_distribution_overrides"] = {
            int(k): list(v) for k, v in sim["rating_distribution_overrides"].items()
        }
        sim["channel_labels"] = list(sim["channel_labels"])
        return {
            "seed": self.seed,
            "workdir": str(self.workdir),
            "simulation": sim,
            "filter": dataclasses.asdict(self.filter),
            "rejection": dataclasses.asdict(self.rejection),
            "evaluation": dataclasses.asdict(self.evaluation),
            "stats": {**dataclasses.asdict(self.stats),
                      "range_ms": list(self.stats.range_ms),
                      "channels": list(self.stats.channels)},
            "jobs": self.jobs,
        }


_SECTIONS = {"seed", "workdir", "simulation", "filter", "rejection", "evaluation", "stats", "jobs"}


def _build(cls, section, raw):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from None


def config_from_dict(raw: dict, seed: int | None = None, workdir=None) -> PipelineConfig:
    """Build a config; ``seed`` and ``workdir`` override the file's values."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    unknown = sorted(set(raw) - _SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if seed is None:
        seed = raw.get("seed")
    if seed is None:
        raise ConfigError("a seed is mandatory (config 'seed' or --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    jobs = raw.get("jobs", 1)
    if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs == 0 or jobs < -1:
        raise ConfigError("jobs must be a positive integer or -1")
    sim_raw = dict(raw.get("simulation") or {})
    if "rng_seed" in sim_raw:
        raise ConfigError("set the top-level 'seed', not simulation.rng_seed")
    sim_raw["rng_seed"] = seed
    try:
        return PipelineConfig(
            seed=seed,
            workdir=Path(workdir if workdir is not None else raw.get("workdir", "erpref-run")),
            simulation=_build(SimulationConfig, "simulation", sim_raw),
            filter=_build(FilterSpec, "filter", raw.get("filter")),
            rejection=_build(RejectionPolicy, "rejection", raw.get("rejection")),
            evaluation=_build(EvaluationSettings, "evaluation", raw.get("evaluation")),
            stats=_build(StatsSettings, "stats", raw.get("stats")),
            jobs=jobs,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path=None, seed: int | None = None, workdir=None) -> PipelineConfig:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return config_from_dict(raw, seed=seed, workdir=workdir)
