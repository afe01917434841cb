"""On-site detuning disorder: distribution, seeding and draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DisorderRealization, ModelSpec
from .validation import check_nonnegative, check_positive_int

DISTRIBUTIONS = ("gaussian",)


@dataclass(frozen=True)
class DisorderSpec:
    """Per-site Gaussian detunings with mean ``mean`` and standard deviation ``std_dev``.

    ``std_dev`` is the standard deviation W (the variance is W**2). A zero
    width reproduces the clean system exactly.
    """

    mean: float
    std_dev: float = 0.0
    distribution: str = "gaussian"

    def __post_init__(self):
        check_nonnegative(self.std_dev, "std_dev")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unsupported disorder distribution {self.distribution!r}")

    @classmethod
    def for_model(cls, model: ModelSpec, std_dev: float) -> "DisorderSpec":
        return cls(mean=float(model.delta0), std_dev=float(std_dev))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_dev": self.std_dev, "distribution": self.distribution}


def config_seed(master_seed: int, config_id: int) -> int:
    """Seed of disorder configuration ``config_id`` derived from the master seed."""
    ss = np.random.SeedSequence([int(master_seed), int(config_id)])
    return int(ss.generate_state(1, np.uint64)[0])


def trajectory_seed(cfg_seed: int, trajectory: int) -> int:
    """Seed of trajectory ``trajectory`` within a configuration."""
    ss = np.random.SeedSequence([int(cfg_seed), 0x7472616A, int(trajectory)])
    return int(ss.generate_state(1, np.uint64)[0])


def derive_seed(master_seed: int, *keys: int) -> int:
    """Independent seed for a labelled sub-experiment (e.g. one point of a scan)."""
    ss = np.random.SeedSequence([int(master_seed), 0x73756245, *(int(k) for k in keys)])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_disorder(
    spec: DisorderSpec,
    N: int,
    rng: np.random.Generator | None = None,
    *,
    config_id: int = 0,
    seed: int | None = None,
) -> DisorderRealization:
    """Draw ``N`` independent detunings.

    Either pass a generator or a ``seed``; with a seed the draw is
    reproducible from the returned realization alone.
    """
    N = check_positive_int(N, "N")
    if spec.std_dev == 0.0:
        return DisorderRealization(np.full(N, float(spec.mean)), config_id=config_id, seed=seed)
    if rng is None:
        rng = np.random.default_rng(seed)
    det = spec.mean + spec.std_dev * rng.standard_normal(N)
    return DisorderRealization(det, config_id=config_id, seed=seed)


def realization_for(spec: DisorderSpec, N: int, master_seed: int, config_id: int) -> DisorderRealization:
    """Disorder configuration ``config_id`` of an ensemble seeded by ``master_seed``."""
    seed = config_seed(master_seed, config_id)
    return sample_disorder(spec, N, config_id=config_id, seed=seed)


def gauss_hermite_nodes(spec: DisorderSpec, N: int, nodes_per_site: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Hermite rule over the ``N``-site disorder distribution.

    Returns detuning vectors of shape ``(n**N, N)`` and weights summing to one.
    """
    nodes_per_site = check_positive_int(nodes_per_site, "nodes_per_site")
    if spec.std_dev == 0.0:
        return np.full((1, N), float(spec.mean)), np.ones(1)
    count = nodes_per_site**N
    if count > 200_000:
        raise ValueError(f"quadrature grid with {count} nodes is too large")
    x, w = np.polynomial.hermite_e.hermegauss(nodes_per_site)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * N), indexing="ij")
    points = spec.mean + spec.std_dev * np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.meshgrid(*([w] * N), indexing="ij"), axis=0).ravel()
    return points, weights
