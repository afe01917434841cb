"""Exact master-equation integration and steady states.

Density matrices are vectorized by column stacking, ``vec(rho)[j*dim + i] =
rho[i, j]``, so that ``vec(A rho B) = (B^T kron A) vec(rho)``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .disorder import DisorderSpec, gauss_hermite_nodes, sample_disorder
from .model import ModelSpec, _detunings, build_hamiltonian, hamiltonian_parts, jump_operators
from .validation import check_density_matrix, check_positive_int, check_sorted_grid

logger = logging.getLogger(__name__)

INVARIANT_ABORT_TOL = 1e-6
DEFAULT_RTOL = 1e-8
DEFAULT_STEADY_TOL = 1e-6
SNAPSHOT_MAGIC = b"QDRHO\x00\x01\x00"


@dataclass(frozen=True)
class Liouvillian:
    """Sparse superoperator acting on column-stacked density matrices."""

    matrix: sp.csr_matrix
    dim: int

    def apply(self, rho: np.ndarray) -> np.ndarray:
        return (self.matrix @ vec(rho)).reshape(self.dim, self.dim, order="F")


def vec(rho) -> np.ndarray:
    return np.asarray(rho, dtype=complex).reshape(-1, order="F")


def unvec(v, dim: int) -> np.ndarray:
    return np.asarray(v).reshape(dim, dim, order="F")


def _dissipator(jumps, dim: int) -> sp.csr_matrix:
    eye = sp.identity(dim, dtype=complex, format="csr")
    out = sp.csr_matrix((dim * dim, dim * dim), dtype=complex)
    for op, rate in jumps:
        if rate < 0:
            raise ValueError(f"jump rate must be non-negative, got {rate}")
        op = sp.csr_matrix(op, dtype=complex)
        if op.shape != (dim, dim):
            raise ValueError(f"jump operator shape {op.shape} does not match Hamiltonian dimension {dim}")
        ldl = (op.conj().T @ op).tocsr()
        out = out + 0.5 * rate * (
            2.0 * sp.kron(op.conj(), op, format="csr") - sp.kron(eye, ldl, format="csr") - sp.kron(ldl.T, eye, format="csr")
        )
    return out.tocsr()


def build_liouvillian(H, jumps: Sequence[tuple] = ()) -> Liouvillian:
    """``L rho = -i[H, rho] + sum_j gamma_j/2 (2 L_j rho L_j^+ - {L_j^+ L_j, rho})``."""
    H = sp.csr_matrix(H, dtype=complex)
    if H.shape[0] != H.shape[1]:
        raise ValueError(f"Hamiltonian must be square, got {H.shape}")
    dim = H.shape[0]
    eye = sp.identity(dim, dtype=complex, format="csr")
    mat = -1j * (sp.kron(eye, H, format="csr") - sp.kron(H.T, eye, format="csr"))
    if jumps:
        mat = mat + _dissipator(jumps, dim)
    mat = mat.tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return Liouvillian(mat, dim)


@lru_cache(maxsize=8)
def _liouvillian_parts(model: ModelSpec) -> tuple[sp.csr_matrix, np.ndarray]:
    h0, numbers = hamiltonian_parts(model)
    base = build_liouvillian(h0, jump_operators(model)).matrix
    return base, numbers


def model_liouvillian(model: ModelSpec, w=None) -> Liouvillian:
    """Liouvillian of the Bose-Hubbard model for one disorder realization.

    Equivalent to ``build_liouvillian(build_hamiltonian(model, w),
    jump_operators(model))`` but reuses the detuning-free part.
    """
    base, numbers = _liouvillian_parts(model)
    diag_h = -(_detunings(model, w) @ numbers)
    dim = diag_h.shape[0]
    # -i [D, rho]_ij = -i (D_i - D_j) rho_ij
    commutator = (-1j * (diag_h[:, None] - diag_h[None, :])).reshape(-1, order="F")
    return Liouvillian((base + sp.diags(commutator, format="csr")).tocsr(), dim)


def _checked_snapshot(rho: np.ndarray, t: float) -> np.ndarray:
    herm = np.max(np.abs(rho - rho.conj().T))
    trace = np.trace(rho)
    if herm > INVARIANT_ABORT_TOL or abs(trace - 1.0) > INVARIANT_ABORT_TOL:
        raise RuntimeError(
            f"density operator invariants violated at t={t:.6g}: Hermiticity error {herm:.3e}, trace {trace:.12g}"
        )
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def evolve_master(
    liouvillian: Liouvillian,
    rho0,
    times,
    *,
    rtol: float = DEFAULT_RTOL,
    atol: float | None = None,
) -> np.ndarray:
    """Integrate ``d rho/dt = L rho`` and return snapshots at ``times``.

    Uses an adaptive 8th-order Runge-Kutta scheme with relative tolerance
    ``rtol``. ``times`` must start at or after 0 and be increasing; a snapshot
    at ``t = 0`` is ``rho0`` itself. Returns an array of shape
    ``(len(times), dim, dim)``.
    """
    dim = liouvillian.dim
    rho0 = check_density_matrix(rho0, dim, positivity_tol=None)
    times = check_sorted_grid(times, "times", strict=False)
    if times[0] < 0:
        raise ValueError("times must be non-negative")
    out = np.empty((len(times), dim, dim), dtype=complex)
    zero = times == 0.0
    out[zero] = rho0
    later = times[~zero]
    if later.size == 0:
        return out
    if atol is None:
        atol = rtol * 1e-2
    mat = liouvillian.matrix
    sol = solve_ivp(
        lambda t, y: mat @ y,
        (0.0, float(later[-1])),
        vec(rho0),
        method="DOP853",
        t_eval=later,
        rtol=rtol,
        atol=atol,
    )
    if sol.status != 0:
        raise RuntimeError(f"master-equation integration failed: {sol.message}")
    for k, (t, y) in enumerate(zip(sol.t, sol.y.T)):
        out[np.flatnonzero(~zero)[k]] = _checked_snapshot(unvec(y, dim), t)
    return out


def residual(liouvillian: Liouvillian, rho) -> float:
    """Largest entry of ``|L rho|``."""
    return float(np.max(np.abs(liouvillian.matrix @ vec(rho))))


def _constrained_system(liouvillian: Liouvillian):
    dim = liouvillian.dim
    size = dim * dim
    # the (0,0) population equation is redundant given trace conservation:
    # replace it by the unit-trace condition
    keep = np.ones(size)
    keep[0] = 0.0
    diag = np.arange(dim) * (dim + 1)
    trace_row = sp.csr_matrix((np.ones(dim, dtype=complex), (np.zeros(dim, dtype=int), diag)), shape=(size, size))
    mat = sp.diags(keep) @ liouvillian.matrix + trace_row
    rhs = np.zeros(size, dtype=complex)
    rhs[0] = 1.0
    return mat.tocsc(), rhs


def _to_density(sol, dim: int) -> np.ndarray:
    rho = unvec(sol, dim)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def _nullspace_steady_state(liouvillian: Liouvillian) -> np.ndarray:
    mat, rhs = _constrained_system(liouvillian)
    return _to_density(spla.spsolve(mat, rhs), liouvillian.dim)


def _iterative_steady_state(liouvillian: Liouvillian) -> np.ndarray:
    mat, rhs = _constrained_system(liouvillian)
    ilu = spla.spilu(mat, drop_tol=1e-3, fill_factor=5)
    precond = spla.LinearOperator(mat.shape, ilu.solve, dtype=complex)
    sol, info = spla.gmres(mat, rhs, M=precond, rtol=1e-12, restart=100, maxiter=200)
    if info != 0:
        raise RuntimeError(f"GMRES did not converge (info={info})")
    return _to_density(sol, liouvillian.dim)


def steady_state(
    liouvillian: Liouvillian,
    rho0=None,
    *,
    tol: float = DEFAULT_STEADY_TOL,
    method: str = "integrate",
    max_time: float = 1e4,
    chunk_time: float = 10.0,
    rtol: float = DEFAULT_RTOL,
) -> np.ndarray:
    """Steady state of ``L``, assumed unique.

    ``method="integrate"`` evolves ``rho0`` (default: the first basis
    projector) in chunks of ``chunk_time`` until the residual ``max|L rho|``
    drops below ``tol``. ``method="nullspace"`` solves ``L rho = 0`` with a
    unit-trace constraint by sparse LU; LU fill-in makes it practical only
    for small spaces. ``method="iterative"`` solves the same system by
    ILU-preconditioned GMRES, which scales further.
    """
    dim = liouvillian.dim
    if method in ("nullspace", "iterative"):
        solver = _nullspace_steady_state if method == "nullspace" else _iterative_steady_state
        rho = solver(liouvillian)
        res = residual(liouvillian, rho)
        if res > tol:
            raise RuntimeError(f"{method} steady state has residual {res:.3e} > {tol:.3e}")
        return rho
    if method != "integrate":
        raise ValueError(f"unknown steady-state method {method!r}")
    if rho0 is None:
        rho0 = np.zeros((dim, dim), dtype=complex)
        rho0[0, 0] = 1.0
    rho = check_density_matrix(rho0, dim, positivity_tol=None)
    elapsed = 0.0
    while elapsed < max_time:
        rho = evolve_master(liouvillian, rho, [chunk_time], rtol=rtol)[-1]
        elapsed += chunk_time
        res = residual(liouvillian, rho)
        if res < tol:
            return rho
    raise RuntimeError(f"steady state not reached within t={max_time} (residual {res:.3e})")


def exact_state(
    model: ModelSpec,
    w=None,
    *,
    time: float | None = None,
    rho0=None,
    method: str = "integrate",
    tol: float = DEFAULT_STEADY_TOL,
) -> np.ndarray:
    """Exact state of one disorder realization: steady if ``time`` is None, else ``rho(time)``."""
    lv = model_liouvillian(model, w)
    if time is None:
        return steady_state(lv, rho0, tol=tol, method=method)
    if rho0 is None:
        rho0 = np.zeros((lv.dim, lv.dim), dtype=complex)
        rho0[0, 0] = 1.0
    return evolve_master(lv, rho0, [time])[-1]


def disorder_averaged_state(
    model: ModelSpec,
    disorder: DisorderSpec,
    R: int,
    rng: np.random.Generator,
    *,
    time: float | None = None,
    rho0=None,
    method: str = "integrate",
    tol: float = DEFAULT_STEADY_TOL,
) -> np.ndarray:
    """Average of exact states over ``R`` random disorder draws."""
    R = check_positive_int(R, "R")
    acc = None
    for i in range(R):
        w = sample_disorder(disorder, model.sites, rng, config_id=i)
        rho = exact_state(model, w, time=time, rho0=rho0, method=method, tol=tol)
        acc = rho if acc is None else acc + rho
    return acc / R


def disorder_quadrature_state(
    model: ModelSpec,
    disorder: DisorderSpec,
    nodes_per_site: int,
    *,
    time: float | None = None,
    rho0=None,
    method: str = "nullspace",
    tol: float = DEFAULT_STEADY_TOL,
) -> np.ndarray:
    """Disorder average evaluated on a tensor Gauss-Hermite grid.

    Deterministic counterpart of :func:`disorder_averaged_state`; accurate
    when observables vary smoothly with the detunings.
    """
    points, weights = gauss_hermite_nodes(disorder, model.sites, nodes_per_site)
    acc = None
    for det, wt in zip(points, weights):
        rho = exact_state(model, det, time=time, rho0=rho0, method=method, tol=tol)
        acc = wt * rho if acc is None else acc + wt * rho
    return acc


def save_density(path, rho) -> None:
    """Write a density operator: magic, little-endian uint64 dimension, row-major complex128."""
    rho = np.asarray(rho, dtype="<c16")
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {rho.shape}")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<Q", rho.shape[0]))
        fh.write(np.ascontiguousarray(rho).tobytes(order="C"))


def load_density(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path} is not a density snapshot file")
        (dim,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<c16")
    if data.size != dim * dim:
        raise ValueError(f"snapshot holds {data.size} entries, header says {dim}x{dim}")
    return data.reshape(dim, dim).astype(complex)
