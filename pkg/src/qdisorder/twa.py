"""Truncated Wigner trajectories for weakly interacting lattices.

Each trajectory is a complex field ``alpha_j`` obeying

    d alpha_j/dt = -i (Delta_j - U (|alpha_j|^2 - 1)) alpha_j - (gamma/2) alpha_j
                   - i J sum_<j'> alpha_j' + i F + sqrt(gamma/2) chi_j(t)

with complex white noise ``<chi chi*> = delta(t - t')``, ``<chi chi> = 0``.
Damping is the real decay ``-(gamma/2) alpha``. Averages of the fields give
symmetrically ordered moments, hence the ``-1/2`` shifts in
:func:`wigner_observables`.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DisorderRealization, ModelSpec, _detunings
from .validation import check_positive, check_sorted_grid

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3
DEFAULT_OVERFLOW = 1e6
STABILITY_FACTOR = 0.1
_NOISE_BLOCK = 256
_MIDPOINT_ITERATIONS = 2


class TWAInstabilityError(RuntimeError):
    """Field amplitudes exceeded the overflow bound."""


@dataclass
class CoherentField:
    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.ndim != 1:
            raise ValueError("field amplitudes must be a 1-D vector")
        if not np.all(np.isfinite(self.amplitudes)):
            raise TWAInstabilityError("field contains non-finite amplitudes")


@dataclass
class WignerEnsembleStats:
    """Running sums of field moments over trajectories (and sample times)."""

    sites: int
    count: int = 0
    sum_alpha: np.ndarray = None
    sum_abs2: np.ndarray = None
    sum_outer: np.ndarray = None

    def __post_init__(self):
        if self.sum_alpha is None:
            self.sum_alpha = np.zeros(self.sites, dtype=complex)
        if self.sum_abs2 is None:
            self.sum_abs2 = np.zeros(self.sites)
        if self.sum_outer is None:
            self.sum_outer = np.zeros((self.sites, self.sites), dtype=complex)

    def add(self, alpha: np.ndarray) -> None:
        """Accumulate fields of shape ``(B, N)`` (or a single ``(N,)`` field)."""
        alpha = np.atleast_2d(alpha)
        if alpha.shape[1] != self.sites:
            raise ValueError(f"fields have {alpha.shape[1]} sites, stats expect {self.sites}")
        self.count += alpha.shape[0]
        self.sum_alpha += alpha.sum(axis=0)
        self.sum_abs2 += (alpha.real**2 + alpha.imag**2).sum(axis=0)
        # outer[l, m] = sum conj(alpha_l) alpha_m
        self.sum_outer += alpha.conj().T @ alpha

    def merge(self, other: "WignerEnsembleStats") -> "WignerEnsembleStats":
        if other.sites != self.sites:
            raise ValueError("cannot merge statistics of different lattices")
        return WignerEnsembleStats(
            self.sites,
            self.count + other.count,
            self.sum_alpha + other.sum_alpha,
            self.sum_abs2 + other.sum_abs2,
            self.sum_outer + other.sum_outer,
        )


def wigner_observables(stats: WignerEnsembleStats) -> dict[str, np.ndarray]:
    """Quantum expectation values from symmetrically ordered field moments.

    ``density[j] = <|alpha_j|^2> - 1/2``; ``coherence[l, m] = <a_l^+ a_m> =
    <alpha_l* alpha_m> - delta_lm / 2``; ``field[j] = <alpha_j>``.
    """
    if stats.count < 2:
        raise ValueError(f"need at least 2 samples, have {stats.count}")
    n = stats.count
    coherence = stats.sum_outer / n - 0.5 * np.eye(stats.sites)
    return {
        "density": stats.sum_abs2 / n - 0.5,
        "coherence": coherence,
        "field": stats.sum_alpha / n,
    }


def sample_initial_vacuum(N: int, rng: np.random.Generator) -> CoherentField:
    """Vacuum Wigner sample: complex Gaussian with ``<|alpha|^2> = 1/2``."""
    return CoherentField(_vacuum(N, rng))


def _vacuum(N, rng) -> np.ndarray:
    x = rng.standard_normal((2, N))
    return 0.5 * (x[0] + 1j * x[1])


def stability_bound(model: ModelSpec, detunings, n_max: float) -> float:
    """Largest step allowed: ``0.1 / max(|Delta| + z J + U n_max, gamma)``."""
    det = np.max(np.abs(detunings)) if np.size(detunings) else 0.0
    z = model.lattice.coordination
    scale = max(det + z * abs(model.J) + abs(model.U) * n_max, model.gamma)
    return STABILITY_FACTOR / scale


class _Drift:
    def __init__(self, model: ModelSpec):
        self.U, self.J, self.F, self.gamma = model.U, model.J, model.F, model.gamma
        self.adj_t = model.lattice.adjacency().T.tocsr()

    def __call__(self, alpha, det):
        nbr = (self.adj_t.T @ alpha.T).T if self.J != 0.0 else 0.0
        abs2 = alpha.real**2 + alpha.imag**2
        return (
            -1j * (det - self.U * (abs2 - 1.0)) * alpha
            - 0.5 * self.gamma * alpha
            - 1j * self.J * nbr
            + 1j * self.F
        )


def _midpoint_step(drift, alpha, det, dt, kick):
    """Semi-implicit midpoint step with additive noise ``kick``."""
    base = alpha + kick
    new = base + dt * drift(alpha, det)
    for _ in range(_MIDPOINT_ITERATIONS):
        new = base + dt * drift(0.5 * (alpha + new), det)
    return new


def twa_step(
    field: CoherentField,
    model: ModelSpec,
    w: DisorderRealization | None,
    dt: float,
    rng: np.random.Generator | None,
    *,
    noise: bool = True,
    overflow: float = DEFAULT_OVERFLOW,
) -> CoherentField:
    """One stochastic step of a single Wigner trajectory.

    ``rng`` may be None only when ``noise=False``.
    """
    dt = check_positive(dt, "dt")
    det = _detunings(model, w)
    alpha = field.amplitudes
    if alpha.shape != (model.sites,):
        raise ValueError(f"field has {alpha.shape[0]} sites, model has {model.sites}")
    n_max = float(np.max(np.abs(alpha) ** 2)) if alpha.size else 0.0
    bound = stability_bound(model, det, n_max)
    if dt > bound:
        raise ValueError(f"dt={dt} exceeds the stability bound {bound:.4g}")
    kick = np.zeros_like(alpha)
    if noise:
        x = rng.standard_normal((2, model.sites))
        kick = np.sqrt(model.gamma / 2) * np.sqrt(dt / 2) * (x[0] + 1j * x[1])
    new = _midpoint_step(_Drift(model), alpha[None], det[None], dt, kick[None])[0]
    if np.max(np.abs(new)) > overflow or not np.all(np.isfinite(new)):
        raise TWAInstabilityError(f"field amplitude exceeded {overflow} at t={field.time + dt:.6g}")
    return CoherentField(new, field.time + dt)


@dataclass
class TWABatchResult:
    sample_times: np.ndarray
    observables: dict[str, np.ndarray]
    stats: WignerEnsembleStats | None
    final_fields: np.ndarray
    snapshots: np.ndarray | None = field(default=None)


def run_twa_batch(
    model: ModelSpec,
    detunings: np.ndarray,
    times,
    rngs,
    *,
    dt: float = DEFAULT_DT,
    initial: str = "vacuum",
    stats_from: float | None = None,
    snapshot_sites: bool = False,
    noise: bool = True,
    overflow: float = DEFAULT_OVERFLOW,
) -> TWABatchResult:
    """Integrate a batch of Wigner trajectories, one row of ``detunings`` each.

    Every trajectory draws its initial vacuum sample and then its noise from
    its own generator, in that order, so a trajectory's stream is independent
    of its detunings and of the batch composition.

    Per-trajectory observables at each sample time: ``density`` (site average
    of ``|alpha|^2 - 1/2``) and ``k0_population`` (``|sum alpha|^2 / N - 1/2``).
    When ``stats_from`` is given, fields at sample times ``>= stats_from`` are
    accumulated into a :class:`WignerEnsembleStats`.
    """
    dt = check_positive(dt, "dt")
    detunings = np.atleast_2d(np.asarray(detunings, dtype=float))
    B, N = detunings.shape
    if N != model.sites:
        raise ValueError(f"detunings have {N} sites, model has {model.sites}")
    if len(rngs) != B:
        raise ValueError("need one generator per trajectory")
    times = check_sorted_grid(times, "times", strict=False)
    steps_at = np.rint(times / dt).astype(np.int64)
    if np.any(np.abs(steps_at * dt - times) > 1e-9 * np.maximum(1.0, times)):
        raise ValueError("sample times must be integer multiples of dt")
    if initial == "vacuum":
        alpha = np.stack([_vacuum(N, rng) for rng in rngs])
    elif initial == "zero":
        alpha = np.zeros((B, N), dtype=complex)
    else:
        raise ValueError(f"unknown initial state {initial!r}")

    n_max = max(float(np.max(np.abs(alpha) ** 2)), 0.5)
    bound = stability_bound(model, detunings, n_max)
    if dt > bound:
        raise ValueError(f"dt={dt} exceeds the stability bound {bound:.4g}")

    drift = _Drift(model)
    amp = np.sqrt(model.gamma / 2) * np.sqrt(dt / 2)
    stats = WignerEnsembleStats(N) if stats_from is not None else None
    obs = {"density": np.empty((B, len(times))), "k0_population": np.empty((B, len(times)))}
    snaps = np.empty((B, len(times), N)) if snapshot_sites else None

    noise_buf = None
    buf_pos = _NOISE_BLOCK
    step = 0
    warned = False
    for k, target in enumerate(steps_at):
        while step < target:
            if noise:
                if buf_pos == _NOISE_BLOCK:
                    noise_buf = np.stack([rng.standard_normal((_NOISE_BLOCK, 2, N)) for rng in rngs], axis=1)
                    buf_pos = 0
                x = noise_buf[buf_pos]
                buf_pos += 1
                kick = amp * (x[:, 0] + 1j * x[:, 1])
            else:
                kick = 0.0
            alpha = _midpoint_step(drift, alpha, detunings, dt, kick)
            step += 1
        abs2 = alpha.real**2 + alpha.imag**2
        peak = float(np.max(abs2)) if abs2.size else 0.0
        if not np.isfinite(peak) or peak > overflow**2:
            raise TWAInstabilityError(f"field amplitude exceeded {overflow} by t={times[k]:.6g}")
        if not warned and dt > stability_bound(model, detunings, peak):
            logger.warning("dt=%g exceeds the stability bound at t=%g (max |alpha|^2 = %.3g)", dt, times[k], peak)
            warned = True
        obs["density"][:, k] = abs2.mean(axis=1) - 0.5
        total = alpha.sum(axis=1)
        obs["k0_population"][:, k] = (total.real**2 + total.imag**2) / N - 0.5
        if snaps is not None:
            snaps[:, k] = abs2 - 0.5
        if stats is not None and times[k] >= stats_from:
            stats.add(alpha)
    return TWABatchResult(times, obs, stats, alpha, snaps)


def save_stats_csv(stats: WignerEnsembleStats, path) -> Path:
    """Per-site table ``(site, density, field_re, field_im)`` of an ensemble."""
    obs = wigner_observables(stats)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site", "density", "field_re", "field_im"])
        for j in range(stats.sites):
            f = obs["field"][j]
            writer.writerow([j, repr(float(obs["density"][j])), repr(float(f.real)), repr(float(f.imag))])
    return path


def save_snapshots(stem, snapshots, lattice, meta: dict | None = None) -> tuple[Path, Path]:
    """Site-resolved densities as a flat CSV plus a JSON sidecar with the lattice shape.

    ``snapshots`` has shape ``(S, N)``; row ``s`` of the CSV holds snapshot
    ``s`` flattened in site order, which reshapes to ``lattice.shape``.
    """
    snaps = np.atleast_2d(np.asarray(snapshots, dtype=float))
    if snaps.shape[1] != lattice.sites:
        raise ValueError(f"snapshots have {snaps.shape[1]} sites, lattice has {lattice.sites}")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.parent / f"{stem.name}.csv", stem.parent / f"{stem.name}.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"n_{j}" for j in range(lattice.sites)])
        for row in snaps:
            writer.writerow([repr(float(v)) for v in row])
    side = {"shape": list(lattice.shape), "lattice": lattice.to_dict(), "count": int(snaps.shape[0])}
    side.update(meta or {})
    json_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
