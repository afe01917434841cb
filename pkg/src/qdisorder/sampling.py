"""Disorder-configuration sampling, ensemble runs and the sampling-error model.

An ensemble of cost ``C = R * T`` draws ``R`` disorder configurations and runs
``T`` trajectories in each. The error of the grand mean is modelled as

    eps(R, T) = alpha * sqrt((var_psi + T * var_D) / (R * T)),

where ``var_psi`` is the trajectory variance within a configuration (averaged
over configurations) and ``var_D`` the variance of configuration means. At
fixed cost this grows with ``T`` whenever ``var_D > 0``, so one trajectory per
configuration is optimal.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .disorder import DisorderSpec, config_seed, realization_for, sample_disorder, trajectory_seed
from .mcwf import TrajectoryError, dense_effective_hamiltonians, simulate_jump_batch
from .model import ModelSpec, jump_operators
from .twa import DEFAULT_DT, TWAInstabilityError, WignerEnsembleStats, run_twa_batch
from .validation import check_positive, check_positive_int, check_sorted_grid

__all__ = [
    "ANY_T",
    "DEFAULT_ALPHA",
    "DisorderSpec",
    "EnsembleAccumulator",
    "EnsembleError",
    "ErrorBudget",
    "SamplingErrorModel",
    "SamplingPlan",
    "Schedule",
    "config_seed",
    "mean_absolute_error",
    "optimal_T",
    "predicted_error",
    "run_ensemble",
    "sample_disorder",
    "trajectory_seed",
    "variance_decomposition",
]

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = math.sqrt(2.0 / math.pi)
ANY_T = "any"
DEFAULT_CHUNK = 256
PROTOCOLS = ("mcwf", "twa")
TWA_OBSERVABLES = ("density", "k0_population")


class EnsembleError(RuntimeError):
    """A trajectory of an ensemble failed; carries its configuration and index."""

    def __init__(self, message: str, config_id: int, trajectory: int):
        super().__init__(f"config {config_id}, trajectory {trajectory}: {message}")
        self.config_id = config_id
        self.trajectory = trajectory


@dataclass(frozen=True)
class SamplingPlan:
    R: int
    T: int
    master_seed: int = 0

    def __post_init__(self):
        check_positive_int(self.R, "R")
        check_positive_int(self.T, "T")

    @property
    def cost(self) -> int:
        return self.R * self.T

    @classmethod
    def for_cost(cls, C: int, T: int, master_seed: int = 0) -> "SamplingPlan":
        """Plan with ``R = C / T``; ``T`` must divide ``C``."""
        C, T = check_positive_int(C, "C"), check_positive_int(T, "T")
        if C % T:
            raise ValueError(f"T={T} does not divide the cost C={C}")
        return cls(C // T, T, master_seed)


@dataclass(frozen=True)
class Schedule:
    """Sample times ``0, dt, 2 dt, ... <= t_final`` and the burn-in before steady-state averaging."""

    t_final: float
    sample_interval: float
    burn_in: float = 0.0

    def __post_init__(self):
        check_positive(self.t_final, "t_final")
        check_positive(self.sample_interval, "sample_interval")
        if not 0.0 <= self.burn_in < self.t_final:
            raise ValueError(f"burn-in {self.burn_in} must lie in [0, t_final={self.t_final})")

    def times(self) -> np.ndarray:
        n = int(math.floor(self.t_final / self.sample_interval + 1e-9))
        return np.arange(n + 1) * self.sample_interval


@dataclass
class EnsembleAccumulator:
    """Per-trajectory observable samples grouped by configuration.

    ``samples[name]`` has shape ``(R, T, K)``: configuration, trajectory, and
    sample time. Merging is by configuration id, so the row order is fixed.
    """

    times: np.ndarray
    samples: dict[str, np.ndarray]
    config_ids: np.ndarray
    wigner: WignerEnsembleStats | None = None
    snapshots: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {v.shape for v in self.samples.values()}
        if len(shapes) != 1:
            raise ValueError("all observables must share the (R, T, K) shape")
        (shape,) = shapes
        if len(shape) != 3 or shape[2] != len(self.times):
            raise ValueError(f"samples shape {shape} inconsistent with {len(self.times)} sample times")
        if len(self.config_ids) != shape[0]:
            raise ValueError("one config id per group is required")

    @classmethod
    def from_samples(cls, values, name: str = "value") -> "EnsembleAccumulator":
        """Wrap an ``(R, T)`` array of scalar per-trajectory values."""
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ValueError("expected an (R, T) array")
        return cls(np.zeros(1), {name: values[:, :, None]}, np.arange(values.shape[0]))

    @property
    def R(self) -> int:
        return next(iter(self.samples.values())).shape[0]

    @property
    def T(self) -> int:
        return next(iter(self.samples.values())).shape[1]

    @property
    def count(self) -> int:
        return self.R * self.T

    def _name(self, observable):
        if observable is None:
            if len(self.samples) != 1:
                raise ValueError(f"several observables recorded; choose one of {sorted(self.samples)}")
            return next(iter(self.samples))
        if observable not in self.samples:
            raise KeyError(f"observable {observable!r} was not recorded")
        return observable

    def values(self, observable=None, *, burn_in: float | None = None, time_index: int | None = None) -> np.ndarray:
        """Scalar value per trajectory, shape ``(R, T)``.

        Either the sample at ``time_index`` or, by default, the time average
        over samples at ``t >= burn_in`` (all samples when ``burn_in`` is None).
        """
        data = self.samples[self._name(observable)]
        if time_index is not None:
            return data[:, :, time_index]
        keep = np.ones(len(self.times), bool) if burn_in is None else self.times >= burn_in
        if not keep.any():
            raise ValueError(f"no samples after burn-in {burn_in}")
        return data[:, :, keep].mean(axis=2)

    def grand_mean(self, observable=None, **kw) -> float:
        return float(self.values(observable, **kw).mean())

    def time_series(self, observable=None) -> tuple[np.ndarray, np.ndarray]:
        """Ensemble mean and standard error at each sample time."""
        data = self.samples[self._name(observable)].reshape(self.count, -1)
        err = data.std(axis=0, ddof=1) / np.sqrt(self.count) if self.count > 1 else np.zeros(data.shape[1])
        return data.mean(axis=0), err

    def to_csv(self, path, *, burn_in: float | None = None) -> Path:
        """Rows ``(config_id, trajectory, observable, value)`` with time-reduced values."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config_id", "trajectory", "observable", "value"])
            for name in sorted(self.samples):
                vals = self.values(name, burn_in=burn_in)
                for i, cid in enumerate(self.config_ids):
                    for t in range(self.T):
                        writer.writerow([int(cid), t, name, repr(float(vals[i, t]))])
        return path


@dataclass(frozen=True)
class ErrorBudget:
    var_psi_bar: float
    var_D: float
    alpha: float = DEFAULT_ALPHA
    clamped: bool = False
    var_D_stderr: float | None = None

    def __post_init__(self):
        if self.var_psi_bar < 0 or self.var_D < 0:
            raise ValueError("variance components must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ErrorBudget":
        return cls(**json.loads(text))


def variance_decomposition(
    acc: EnsembleAccumulator,
    observable: str | None = None,
    *,
    burn_in: float | None = None,
    time_index: int | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> ErrorBudget:
    """One-way components-of-variance estimate of ``(var_psi_bar, var_D)``.

    ``var_psi_bar`` is the mean unbiased within-configuration variance;
    ``var_D`` the unbiased variance of configuration means minus
    ``var_psi_bar / T``, clamped at zero (``clamped`` is then set).
    """
    x = acc.values(observable, burn_in=burn_in, time_index=time_index)
    R, T = x.shape
    if T < 2:
        raise ValueError(
            "with T=1 the within- and between-configuration variances are not identifiable; "
            "run a pilot ensemble with T >= 2"
        )
    if R < 2:
        raise ValueError("at least two configurations are needed to estimate var_D")
    within = x.var(axis=1, ddof=1).mean()
    means = x.mean(axis=1)
    s2_means = means.var(ddof=1)
    raw = s2_means - within / T
    # variance of the moment estimator under normality
    stderr = math.sqrt(2 * s2_means**2 / (R - 1) + 2 * within**2 / (R * (T - 1) * T**2))
    return ErrorBudget(float(within), float(max(raw, 0.0)), alpha, bool(raw < 0), stderr)


def predicted_error(budget: ErrorBudget, R: int, T: int) -> float:
    R, T = check_positive_int(R, "R"), check_positive_int(T, "T")
    return budget.alpha * math.sqrt((budget.var_psi_bar + T * budget.var_D) / (R * T))


def optimal_T(budget: ErrorBudget, C: int):
    """Number of trajectories per configuration minimizing the error at cost ``C``.

    Searches every divisor split ``R * T = C``. Returns :data:`ANY_T` when the
    disorder variance vanishes (all splits are equivalent).
    """
    C = check_positive_int(C, "C")
    if budget.var_D == 0:
        return ANY_T
    best_T, best = None, math.inf
    for T in range(1, C + 1):
        if C % T:
            continue
        err = predicted_error(budget, C // T, T)
        if err < best:
            best_T, best = T, err
    return best_T


def mean_absolute_error(samples, exact_value) -> float:
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("need at least one sample")
    return float(np.mean(np.abs(samples - exact_value)))


class SamplingErrorModel(BaseEstimator):
    """Estimator wrapper: fit variance components on an ``(R, T)`` pilot array, predict ``eps``.

    ``predict`` takes rows ``(R, T)`` and returns the modelled error.
    """

    def __init__(self, alpha: float = DEFAULT_ALPHA):
        self.alpha = alpha

    def fit(self, X, y=None):
        self.budget_ = variance_decomposition(EnsembleAccumulator.from_samples(X), alpha=self.alpha)
        return self

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=int))
        return np.array([predicted_error(self.budget_, int(r), int(t)) for r, t in X])

    def optimal_T(self, C: int):
        return optimal_T(self.budget_, C)


# --------------------------------------------------------------------------- runner


@dataclass(frozen=True)
class _Chunk:
    index: int
    configs: np.ndarray  # configuration id of each trajectory
    trajectories: np.ndarray  # trajectory index within its configuration


def _chunks(plan: SamplingPlan, chunk_size: int) -> list[_Chunk]:
    cfg = np.repeat(np.arange(plan.R), plan.T)
    traj = np.tile(np.arange(plan.T), plan.R)
    return [
        _Chunk(k, cfg[s : s + chunk_size], traj[s : s + chunk_size])
        for k, s in enumerate(range(0, plan.cost, chunk_size))
    ]


def _run_chunk(job):
    chunk, ctx = job
    plan, spec, model = ctx["plan"], ctx["spec"], ctx["model"]
    cfg_ids, inverse = np.unique(chunk.configs, return_inverse=True)
    dets = np.stack([realization_for(spec, model.sites, plan.master_seed, int(c)).detunings for c in cfg_ids])
    seeds = [config_seed(plan.master_seed, int(c)) for c in cfg_ids]
    rngs = [
        np.random.default_rng(trajectory_seed(seeds[j], int(t))) for j, t in zip(inverse, chunk.trajectories)
    ]
    times = ctx["times"]
    if ctx["protocol"] == "mcwf":
        heffs = dense_effective_hamiltonians(model, dets)
        try:
            res = simulate_jump_batch(
                heffs, jump_operators(model), ctx["psi0"], times, rngs, ctx["operators"], inverse, record_jumps=False
            )
        except TrajectoryError as exc:
            b = exc.index if exc.index is not None else 0
            raise EnsembleError(str(exc), int(chunk.configs[b]), int(chunk.trajectories[b])) from exc
        return chunk.index, res.observables, None, None
    try:
        res = run_twa_batch(
            model,
            dets[inverse],
            times,
            rngs,
            dt=ctx["dt"],
            initial=ctx["initial"],
            stats_from=ctx["stats_from"],
            snapshot_sites=ctx["snapshots"],
        )
    except TWAInstabilityError as exc:
        raise EnsembleError(str(exc), int(chunk.configs[0]), int(chunk.trajectories[0])) from exc
    obs = {name: res.observables[name] for name in ctx["names"]}
    snaps = res.snapshots[:, -1] if res.snapshots is not None else None
    return chunk.index, obs, res.stats, snaps


def run_ensemble(
    plan: SamplingPlan,
    spec: DisorderSpec,
    model: ModelSpec,
    protocol: str,
    observables: Sequence[str] = ("density",),
    schedule: Schedule | Sequence[float] | None = None,
    *,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
    psi0=None,
    dt: float = DEFAULT_DT,
    initial: str = "vacuum",
    stats_from: float | None = None,
    snapshots: bool = False,
) -> EnsembleAccumulator:
    """Run ``plan.T`` trajectories in each of ``plan.R`` disorder configurations.

    Configuration ``i`` uses ``realization_for(spec, N, master_seed, i)``;
    trajectory ``t`` of it uses the seed ``trajectory_seed(config_seed, t)``.
    Work is cut into chunks of ``chunk_size`` consecutive trajectories that do
    not depend on ``workers``, and results are merged in chunk order, so the
    output is bit-identical for any worker count.

    ``protocol="mcwf"`` takes observable names understood by
    :func:`qdisorder.observables.operator_for` and starts from ``psi0``
    (default: vacuum). ``protocol="twa"`` records ``density`` and/or
    ``k0_population`` and, when ``stats_from`` is set, field moments after that time.
    """
    from .observables import operator_for

    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    workers = check_positive_int(workers, "workers")
    chunk_size = check_positive_int(chunk_size, "chunk_size")
    if schedule is None:
        raise ValueError("a sampling schedule is required")
    times = schedule.times() if isinstance(schedule, Schedule) else check_sorted_grid(schedule, "schedule", strict=False)
    names = list(observables)
    if not names:
        raise ValueError("at least one observable is required")
    ctx = {"plan": plan, "spec": spec, "model": model, "protocol": protocol, "times": times, "names": names}
    if protocol == "mcwf":
        if psi0 is None:
            psi0 = model.space.vacuum()
        ctx["psi0"] = np.asarray(psi0, dtype=complex)
        ctx["operators"] = {name: operator_for(model, name) for name in names}
    else:
        unknown = set(names) - set(TWA_OBSERVABLES)
        if unknown:
            raise ValueError(f"TWA records only {TWA_OBSERVABLES}, not {sorted(unknown)}")
        ctx.update(dt=dt, initial=initial, stats_from=stats_from, snapshots=snapshots)

    jobs = [(chunk, ctx) for chunk in _chunks(plan, chunk_size)]
    if workers == 1 or len(jobs) == 1:
        results = [_run_chunk(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    results.sort(key=lambda r: r[0])

    samples = {
        name: np.concatenate([r[1][name] for r in results]).reshape(plan.R, plan.T, len(times)) for name in names
    }
    wigner = None
    if protocol == "twa" and stats_from is not None:
        wigner = WignerEnsembleStats(model.sites)
        for r in results:
            wigner = wigner.merge(r[2])
    snaps = np.concatenate([r[3] for r in results]) if protocol == "twa" and snapshots else None
    meta = {
        "protocol": protocol,
        "R": plan.R,
        "T": plan.T,
        "master_seed": plan.master_seed,
        "disorder": spec.to_dict(),
        "model": model.to_dict(),
    }
    return EnsembleAccumulator(times, samples, np.arange(plan.R), wigner, snaps, meta)
