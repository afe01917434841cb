"""Quantum-jump (Monte Carlo wavefunction) trajectories.

Between jumps a trajectory follows ``d|psi>/dt = -i H_eff |psi>`` with
``H_eff = H - (i/2) sum_j gamma_j L_j^+ L_j``. A jump happens when the squared
norm decays to a uniform random threshold; the crossing time is located by a
bracketing root search. The channel is drawn with probability proportional to
``gamma_j ||L_j psi||^2`` and the state is renormalized afterwards.

``H_eff`` is time independent, so the no-jump evolution is evaluated exactly
in its eigenbasis instead of by time stepping. Many trajectories are advanced
together; each owns its random generator, so its result does not depend on
which other trajectories share the batch.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .hilbert import normalize
from .model import DisorderRealization, ModelSpec, _detunings, hamiltonian_parts, jump_operators
from .validation import check_sorted_grid

ROOT_RTOL = 1e-10
EIG_RECONSTRUCTION_TOL = 1e-9
_MAX_ROOT_ITER = 400


class TrajectoryError(RuntimeError):
    """A trajectory failed; ``index`` is its position within the batch."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass
class TrajectoryRecord:
    """Observables of one trajectory at the requested sample times."""

    seed: int | None
    config_id: int
    sample_times: np.ndarray
    observables: dict[str, np.ndarray]
    jump_log: list[tuple[float, int]] = field(default_factory=list)
    states: np.ndarray | None = None

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` (time and observables) and ``<stem>.json`` (seed, config, jumps)."""
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        names = sorted(self.observables)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", *names])
            for k, t in enumerate(self.sample_times):
                writer.writerow([repr(float(t)), *(_fmt(self.observables[n][k]) for n in names)])
        meta = {
            "seed": self.seed,
            "config_id": self.config_id,
            "jump_log": [[repr(float(t)), int(ch)] for t, ch in self.jump_log],
        }
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return csv_path, json_path

    @classmethod
    def load(cls, stem) -> "TrajectoryRecord":
        stem = Path(stem)
        with open(stem.with_suffix(".csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        names = rows[0][1:]
        body = rows[1:]
        times = np.array([float(r[0]) for r in body])
        obs = {n: np.array([complex(r[i + 1]) for r in body]) for i, n in enumerate(names)}
        obs = {n: (v.real if not np.any(v.imag) else v) for n, v in obs.items()}
        meta = json.loads(stem.with_suffix(".json").read_text())
        jumps = [(float(t), int(ch)) for t, ch in meta["jump_log"]]
        return cls(meta["seed"], meta["config_id"], times, obs, jumps)


def _fmt(x) -> str:
    if np.iscomplexobj(x):
        return repr(complex(x))
    return repr(float(x))


def effective_hamiltonian(H, jumps: Sequence[tuple] = ()) -> sp.csr_matrix:
    """``H - (i/2) sum_j gamma_j L_j^+ L_j``."""
    H = sp.csr_matrix(H, dtype=complex)
    out = H.copy()
    for op, rate in jumps:
        op = sp.csr_matrix(op, dtype=complex)
        if op.shape != H.shape:
            raise ValueError(f"jump operator shape {op.shape} does not match Hamiltonian {H.shape}")
        out = out - 0.5j * rate * (op.conj().T @ op)
    return out.tocsr()


def dense_effective_hamiltonians(model: ModelSpec, detunings: np.ndarray) -> np.ndarray:
    """Stack of dense ``H_eff`` matrices, one per row of ``detunings``."""
    h0, numbers = hamiltonian_parts(model)
    base = effective_hamiltonian(h0, jump_operators(model)).toarray()
    detunings = np.atleast_2d(detunings)
    out = np.broadcast_to(base, (detunings.shape[0], *base.shape)).copy()
    diag = -(detunings @ numbers)
    idx = np.arange(base.shape[0])
    out[:, idx, idx] += diag
    return out


_GATHER_LIMIT = 2**24  # complex entries of per-trajectory eigenvector copies


class _EigenPropagator:
    """Exact no-jump propagation through the eigendecomposition of ``H_eff``.

    Methods address trajectories by index (``ALL`` for the whole batch);
    ``cfg`` maps each trajectory to its configuration.
    """

    def __init__(self, heffs: np.ndarray, cfg: np.ndarray):
        lam, vecs = np.linalg.eig(heffs)
        inv = np.linalg.inv(vecs)
        recon = np.einsum("bij,bj,bjk->bik", vecs, lam, inv)
        scale = np.max(np.abs(heffs), axis=(1, 2)) + 1.0
        err = np.max(np.abs(recon - heffs), axis=(1, 2)) / scale
        self.ok = bool(np.all(err < EIG_RECONSTRUCTION_TOL))
        self.cfg = cfg
        self.lam = lam[cfg]
        # copying the matrices per trajectory avoids a gather on every call
        self.pregathered = cfg.size * vecs.shape[1] ** 2 <= _GATHER_LIMIT
        self.vecs, self.inv = (vecs[cfg], inv[cfg]) if self.pregathered else (vecs, inv)

    def _mats(self, mats, idx):
        return mats[idx] if self.pregathered else mats[self.cfg[idx]]

    def to_coords(self, psi, idx):
        return np.matmul(self._mats(self.inv, idx), psi[..., None])[..., 0]

    def to_state(self, coords, idx):
        return np.matmul(self._mats(self.vecs, idx), coords[..., None])[..., 0]

    def advance(self, coords, idx, dt):
        return coords * np.exp(-1j * self.lam[idx] * dt[:, None])


class _ExpmPropagator:
    """Fallback for a numerically defective ``H_eff``: matrix exponentials per call."""

    def __init__(self, heffs: np.ndarray, cfg: np.ndarray):
        self.heffs, self.cfg = heffs, cfg

    def to_coords(self, psi, idx):
        return psi.copy()

    def to_state(self, coords, idx):
        return coords.copy()

    def advance(self, coords, idx, dt):
        out = np.empty_like(coords)
        cfg = self.cfg[idx]
        for b in range(coords.shape[0]):
            out[b] = scipy.linalg.expm(-1j * dt[b] * self.heffs[cfg[b]]) @ coords[b]
        return out


def _propagator(heffs: np.ndarray, cfg: np.ndarray):
    prop = _EigenPropagator(heffs, cfg)
    return prop if prop.ok else _ExpmPropagator(heffs, cfg)


def _operator_is_hermitian(op) -> bool:
    diff = op - op.conj().T
    return (abs(diff).max() if diff.nnz else 0.0) < 1e-12


@dataclass
class BatchResult:
    """Raw output of :func:`simulate_jump_batch`."""

    sample_times: np.ndarray
    observables: dict[str, np.ndarray]
    jump_logs: list[list[tuple[float, int]]]
    states: np.ndarray | None


def simulate_jump_batch(
    heffs: np.ndarray,
    jumps: Sequence[tuple],
    psi0,
    times,
    rngs: Sequence[np.random.Generator],
    observables: Mapping[str, object] | None = None,
    config_index=None,
    *,
    record_states: bool = False,
    record_jumps: bool = True,
) -> BatchResult:
    """Advance a batch of jump trajectories and sample observables.

    Args:
        heffs: dense effective Hamiltonians, shape ``(n_configs, dim, dim)``.
        jumps: ``(operator, rate)`` pairs shared by all configurations.
        psi0: normalized initial state.
        times: non-negative, non-decreasing sample times.
        rngs: one generator per trajectory.
        observables: name -> operator; Hermitian operators give real series.
        config_index: configuration row of every trajectory (default: all 0).

    Returns:
        BatchResult with observable arrays of shape ``(B, len(times))``.
    """
    heffs = np.asarray(heffs, dtype=complex)
    if heffs.ndim == 2:
        heffs = heffs[None]
    dim = heffs.shape[1]
    B = len(rngs)
    cfg_all = np.zeros(B, dtype=int) if config_index is None else np.asarray(config_index, dtype=int)
    if cfg_all.shape != (B,):
        raise ValueError("config_index must give one configuration per trajectory")
    times = check_sorted_grid(times, "times", strict=False)
    if times[0] < 0:
        raise ValueError("sample times must be non-negative")
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (dim,):
        raise ValueError(f"initial state has shape {psi0.shape}, expected ({dim},)")
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ValueError("initial state must be normalized")
    observables = dict(observables or {})
    hermitian = {name: _operator_is_hermitian(sp.csr_matrix(op)) for name, op in observables.items()}
    jump_ops = [(sp.csr_matrix(op, dtype=complex), float(rate)) for op, rate in jumps]

    prop = _propagator(heffs, cfg_all)
    everyone = slice(None)
    coords = prop.to_coords(np.broadcast_to(psi0, (B, dim)), everyone)
    t_ref = np.zeros(B)
    log_r = np.array([np.log1p(-rng.random()) for rng in rngs])

    out_obs = {name: np.empty((B, len(times)), dtype=float if hermitian[name] else complex) for name in observables}
    out_states = np.empty((B, len(times), dim), dtype=complex) if record_states else None
    jump_logs: list[list[tuple[float, int]]] = [[] for _ in range(B)]

    # d log||psi||^2 / dt = -<sum_j gamma_j L_j^+ L_j>
    decay = sp.csr_matrix((dim, dim), dtype=complex)
    for op, rate in jump_ops:
        decay = decay + rate * (op.conj().T @ op)
    decay = decay.tocsr()

    def log_norm(idx, coords_sub, t, slope=False):
        psi = prop.to_state(prop.advance(coords_sub, idx, t - t_ref[idx]), idx)
        n2 = np.einsum("bi,bi->b", psi.conj(), psi).real
        if not slope:
            return np.log(n2)
        rate = np.einsum("ib,ib->b", psi.T.conj(), decay @ psi.T).real / n2
        return np.log(n2), -rate

    for k, s in enumerate(times):
        pending = everyone
        while True:
            ln = log_norm(pending, coords[pending], np.full(coords[pending].shape[0], s))
            crossed = ln <= log_r[pending]
            if not crossed.any():
                break
            jumpers = np.flatnonzero(crossed) if pending is everyone else pending[crossed]
            tau = _find_crossing(log_norm, jumpers, coords[jumpers], t_ref[jumpers], s, log_r[jumpers])
            _apply_jumps(prop, jump_ops, jumpers, tau, coords, t_ref, log_r, rngs, jump_logs, record_jumps)
            pending = jumpers

        ct = prop.advance(coords, everyone, s - t_ref)
        psi = prop.to_state(ct, everyone)
        norm2 = np.einsum("bi,bi->b", psi.conj(), psi).real
        if np.any(~np.isfinite(norm2)) or np.any(norm2 <= 0):
            bad = int(np.flatnonzero(~(norm2 > 0))[0])
            raise TrajectoryError(f"state norm vanished or overflowed at t={s}", bad)
        psi_n = psi / np.sqrt(norm2)[:, None]
        cols = psi_n.T
        for name, op in observables.items():
            vals = np.einsum("ib,ib->b", cols.conj(), op @ cols)
            out_obs[name][:, k] = vals.real if hermitian[name] else vals
        if record_states:
            out_states[:, k] = psi_n
        coords = ct / np.sqrt(norm2)[:, None]
        log_r = log_r - np.log(norm2)
        t_ref = np.full(B, s)

    return BatchResult(times, out_obs, jump_logs, out_states)


def _find_crossing(log_norm, idx, coords_sub, t_lo, t_hi, log_r):
    """Time at which ``log ||psi||^2`` falls to ``log_r`` within ``(t_lo, t_hi]``.

    Newton iteration on the (monotonically decreasing) log-norm, safeguarded
    by the bracket: a step that would leave the bracket, or that fails to
    halve the previous step, is replaced by bisection. Runs per trajectory to a relative time accuracy of
    ``ROOT_RTOL``; only unconverged entries are re-evaluated.
    """
    a = t_lo.copy()
    b = np.full_like(a, t_hi)
    tol = ROOT_RTOL * np.maximum(1.0, np.abs(b))
    x = b.copy()
    fx, dfx = log_norm(idx, coords_sub, x, slope=True)
    fx = fx - log_r
    root = x.copy()
    done = (-log_r) <= 0.0
    root[done] = a[done]
    done |= np.abs(fx) <= tol * np.abs(dfx)
    last_step = b - a
    for _ in range(_MAX_ROOT_ITER):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        a_, b_, x_, f_, df_ = a[act], b[act], x[act], fx[act], dfx[act]
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x_ - f_ / df_
        bisect = ~((df_ < 0) & (xn > a_) & (xn < b_)) | (np.abs(2 * f_) > np.abs(last_step[act] * df_))
        xn = np.where(bisect, 0.5 * (a_ + b_), xn)
        last_step[act] = np.abs(xn - x_)
        f_new, df_new = log_norm(idx[act], coords_sub[act], xn, slope=True)
        f_new = f_new - log_r[act]
        above = f_new > 0
        a[act] = np.where(above, xn, a_)
        b[act] = np.where(above, b_, xn)
        x[act], fx[act], dfx[act] = xn, f_new, df_new
        root[act] = xn
        converged = (np.abs(xn - x_) <= tol[act]) & ~bisect
        converged |= (b[act] - a[act]) <= tol[act]
        # Newton estimate of the remaining distance to the root
        converged |= np.abs(f_new) <= tol[act] * np.abs(df_new)
        done[act[converged]] = True
    else:
        raise TrajectoryError("jump-time search did not converge", int(idx[np.flatnonzero(~done)[0]]))
    return root


def _apply_jumps(prop, jump_ops, idx, tau, coords, t_ref, log_r, rngs, jump_logs, record_jumps):
    ct = prop.advance(coords[idx], idx, tau - t_ref[idx])
    cols = prop.to_state(ct, idx).T
    candidates = [op @ cols for op, _ in jump_ops]
    weights = np.stack([rate * np.einsum("ib,ib->b", v.conj(), v).real for v, (_, rate) in zip(candidates, jump_ops)])
    totals = weights.sum(axis=0)
    cum = np.cumsum(weights, axis=0)
    new_states = np.empty((idx.size, cols.shape[0]), dtype=complex)
    for n, b in enumerate(idx):
        if not totals[n] > 0:
            raise TrajectoryError(f"no jump channel has weight at t={tau[n]:.6g} (truncation too small?)", int(b))
        u = rngs[b].random() * totals[n]
        # first channel whose cumulative weight exceeds u; it has non-zero weight
        channel = min(int(np.searchsorted(cum[:, n], u, side="right")), len(jump_ops) - 1)
        vec = candidates[channel][:, n]
        new_states[n] = vec / np.sqrt(weights[channel, n] / jump_ops[channel][1])
        log_r[b] = np.log1p(-rngs[b].random())
        if record_jumps:
            jump_logs[b].append((float(tau[n]), channel))
    coords[idx] = prop.to_coords(new_states, idx)
    t_ref[idx] = tau


def run_trajectory(
    model: ModelSpec,
    w: DisorderRealization | None,
    psi0,
    schedule,
    rng: np.random.Generator,
    observables: Mapping[str, object] | None = None,
    *,
    seed: int | None = None,
    record_states: bool = False,
) -> TrajectoryRecord:
    """Run one quantum-jump trajectory of ``model`` under disorder ``w``.

    ``observables`` defaults to the mean density. Expectation values are taken
    in the renormalized state at every time of ``schedule``.
    """
    from .observables import operator_for

    if observables is None:
        observables = {"density": operator_for(model, "density")}
    det = _detunings(model, w)
    heffs = dense_effective_hamiltonians(model, det[None])
    res = simulate_jump_batch(
        heffs, jump_operators(model), psi0, schedule, [rng], observables, record_states=record_states
    )
    config_id = w.config_id if isinstance(w, DisorderRealization) else 0
    return TrajectoryRecord(
        seed=seed,
        config_id=config_id,
        sample_times=res.sample_times,
        observables={k: v[0] for k, v in res.observables.items()},
        jump_log=res.jump_logs[0],
        states=None if res.states is None else res.states[0],
    )


def ensemble_density(states, index: int | None = None) -> np.ndarray:
    """``(1/T) sum_i |psi_i><psi_i|`` over normalized trajectory states.

    ``states`` is either an array of shape ``(T, dim)`` or a sequence of
    :class:`TrajectoryRecord` recorded with states, in which case ``index``
    selects the sample time.
    """
    if isinstance(states, np.ndarray):
        arr = states
    else:
        records = list(states)
        if not records:
            raise ValueError("empty ensemble")
        if index is None:
            raise ValueError("index is required when passing trajectory records")
        if any(r.states is None for r in records):
            raise ValueError("trajectory records were not run with record_states=True")
        arr = np.stack([r.states[index] for r in records])
    arr = np.atleast_2d(np.asarray(arr, dtype=complex))
    if arr.shape[0] == 0:
        raise ValueError("empty ensemble")
    arr = np.stack([normalize(psi) for psi in arr])
    rho = arr.T @ arr.conj() / arr.shape[0]
    return 0.5 * (rho + rho.conj().T)
