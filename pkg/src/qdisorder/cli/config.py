"""Experiment configuration files (YAML, schema version 1).

A config is a key-value tree::

    schema_version: 1
    experiment: error-benchmark        # or spectrum, transition-scan, correlations
    model:
      lattice: {geometry: chain, extent: 3, boundary: periodic}   # geometry: site|chain|square
      delta0: 1.0
      U: 1.0
      F: 2.0
      J: 0.5
      gamma: 1.0
      local_dim: 3
    disorder: {std_dev: 0.5, distribution: gaussian}   # mean is the model's delta0
    protocol: mcwf                     # or twa
    initial_state: vacuum              # mcwf: vacuum or a Fock tuple like [1]; twa: vacuum or zero
    schedule: {t_final: 15.0, sample_interval: 0.5, burn_in: 10.0}
    master_seed: 1
    chunk_size: 1024
    twa: {dt: 0.01}
    <experiment block>                 # see the *_SECTION defaults below

Unknown keys are rejected so that typos fail loudly. ``--seed``,
``--workers`` and ``--out-dir`` on the command line override the file.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from ..disorder import DisorderSpec
from ..model import ModelSpec
from ..sampling import Schedule

SCHEMA_VERSION = 1
EXPERIMENTS = ("error-benchmark", "spectrum", "transition-scan", "correlations")

TOP_LEVEL = {
    "schema_version",
    "experiment",
    "description",
    "model",
    "disorder",
    "protocol",
    "initial_state",
    "schedule",
    "master_seed",
    "workers",
    "chunk_size",
    "out_dir",
    "twa",
    "benchmark",
    "spectrum",
    "scan",
    "correlations",
}

BENCHMARK_SECTION = {
    "costs": [128, 512, 2048],
    "trajectories": [1, 8, 64],
    "pool_size": 131072,
    "observable": "density",
    "estimator": "steady",  # steady: time average after burn-in; transient: every sample time
    "oracle": {"method": "quadrature", "nodes_per_site": 8},
    "alpha": None,
    "max_oracle_dim": 4096,
}
SPECTRUM_SECTION = {
    "delta0_grid": {"start": -45.0, "stop": 45.0, "step": 0.5},
    "widths": [0.0, 0.5],
    "configurations": 64,
    "max_particles": 5,
    "observable": "total_number",
    "peak_factor": 3.0,
    "min_prominence": 0.5,
}
SCAN_SECTION = {
    "F_grid": {"start": 1.0, "stop": 2.0, "step": 0.05},
    "widths": [0.0, 0.1, 0.4],
    "configurations": 128,
    "bins": 30,
}
CORRELATIONS_SECTION = {
    "widths": [0.05, 0.1, 0.2],
    "configurations": 128,
    "F": None,  # None: locate F* with a W=0 scan over F_grid
    "F_grid": {"start": 1.0, "stop": 2.0, "step": 0.05},
    "scan_configurations": 64,
    "fit_range": [1.0, None],  # None: L/2
}

SECTION_FOR = {
    "error-benchmark": ("benchmark", BENCHMARK_SECTION),
    "spectrum": ("spectrum", SPECTRUM_SECTION),
    "transition-scan": ("scan", SCAN_SECTION),
    "correlations": ("correlations", CORRELATIONS_SECTION),
}


class ConfigError(ValueError):
    pass


def grid_values(grid) -> list[float]:
    """Expand ``{start, stop, step}`` (inclusive) or pass an explicit list through."""
    if isinstance(grid, dict):
        start, stop, step = float(grid["start"]), float(grid["stop"]), float(grid["step"])
        if step <= 0 or stop < start:
            raise ConfigError(f"invalid grid {grid}")
        n = int(round((stop - start) / step))
        return [round(start + k * step, 12) for k in range(n + 1)]
    values = [float(v) for v in grid]
    if not values:
        raise ConfigError("scan grid is empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError("scan grid must be strictly increasing")
    return values


@dataclass
class ExperimentConfig:
    experiment: str
    model: ModelSpec
    disorder_width: float
    protocol: str
    schedule: Schedule
    master_seed: int
    section: dict
    initial_state: object = "vacuum"
    workers: int = 1
    chunk_size: int = 1024
    twa_dt: float = 0.01
    out_dir: str = "results"
    raw: dict = field(default_factory=dict)

    def disorder(self, mean: float | None = None, width: float | None = None) -> DisorderSpec:
        return DisorderSpec(
            self.model.delta0 if mean is None else float(mean),
            self.disorder_width if width is None else float(width),
        )

    def config_hash(self) -> str:
        """sha256 of the canonical config, excluding execution-only fields."""
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()

    def provenance(self) -> dict:
        from .. import __version__

        return {
            "experiment": self.experiment,
            "config_hash": self.config_hash(),
            "master_seed": self.master_seed,
            "code_version": __version__,
            "schema_version": SCHEMA_VERSION,
            "config": self.raw,
        }


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _merge_defaults(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def parse_config(data: dict, *, seed=None, workers=None, out_dir=None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    experiment = data.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    try:
        model = ModelSpec.from_dict(data["model"])
        sched = data["schedule"]
        schedule = Schedule(float(sched["t_final"]), float(sched["sample_interval"]), float(sched.get("burn_in", 0.0)))
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from exc
    disorder = data.get("disorder", {})
    if disorder.get("distribution", "gaussian") != "gaussian":
        raise ConfigError("only gaussian disorder is supported")
    protocol = data.get("protocol", "mcwf")
    if protocol not in ("mcwf", "twa"):
        raise ConfigError(f"protocol must be mcwf or twa, got {protocol!r}")
    name, defaults = SECTION_FOR[experiment]
    section = _merge_defaults(defaults, data.get(name, {}) or {}, name)
    master_seed = int(data.get("master_seed", 0) if seed is None else seed)

    raw = copy.deepcopy(data)
    raw["master_seed"] = master_seed
    raw[name] = section
    raw.pop("workers", None)
    raw.pop("out_dir", None)
    raw.pop("description", None)
    return ExperimentConfig(
        experiment=experiment,
        model=model,
        disorder_width=float(disorder.get("std_dev", 0.0)),
        protocol=protocol,
        schedule=schedule,
        master_seed=master_seed,
        section=section,
        initial_state=data.get("initial_state", "vacuum"),
        workers=int(data.get("workers", 1) if workers is None else workers),
        chunk_size=int(data.get("chunk_size", 1024)),
        twa_dt=float((data.get("twa") or {}).get("dt", 0.01)),
        out_dir=str(data.get("out_dir", "results") if out_dir is None else out_dir),
        raw=raw,
    )


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return parse_config(data, **overrides)


def preset_names() -> list[str]:
    root = resources.files("qdisorder.cli") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_path(name: str) -> Path:
    path = resources.files("qdisorder.cli") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    return Path(str(path))


def load_preset(name: str, **overrides) -> ExperimentConfig:
    return load_config(preset_path(name), **overrides)
