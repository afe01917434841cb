"""Lattices, truncated bosonic Fock spaces and sparse operators.

Basis ordering is site-major: site 0 is the slowest-varying tensor factor, so
the basis index of occupations ``(n_0, ..., n_{N-1})`` is
``sum_j n_j * d**(N - 1 - j)``. Every module builds operators through
:func:`site_operator` and therefore shares this convention.

States are plain numpy arrays: a 1-D complex vector is a pure state, a 2-D
square array is a density operator.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .validation import check_operator, check_positive_int

GEOMETRIES = ("chain", "square")
BOUNDARIES = ("periodic", "open")
OPERATOR_KINDS = ("annihilate", "create", "number")


@dataclass(frozen=True)
class LatticeSpec:
    """Lattice geometry with its nearest-neighbour edge list.

    Square lattices index site ``(row, col)`` as ``row * L + col``.
    """

    geometry: str
    extent: int
    boundary: str
    sites: int
    edges: tuple[tuple[int, int], ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.extent, self.extent) if self.geometry == "square" else (self.extent,)

    @property
    def coordination(self) -> int:
        """Largest site degree."""
        degree = np.zeros(self.sites, dtype=int)
        for i, j in self.edges:
            degree[i] += 1
            degree[j] += 1
        return int(degree.max()) if self.sites else 0

    def coordinates(self) -> np.ndarray:
        """Integer coordinates of every site, shape ``(N, ndim)``."""
        idx = np.arange(self.sites)
        if self.geometry != "square":
            return idx[:, None]
        return np.stack(np.divmod(idx, self.extent), axis=1)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix."""
        if not self.edges:
            return sp.csr_matrix((self.sites, self.sites))
        i, j = np.array(self.edges).T
        data = np.ones(2 * len(i))
        adj = sp.coo_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(self.sites, self.sites))
        return adj.tocsr()

    def to_dict(self) -> dict:
        return {"geometry": self.geometry, "extent": self.extent, "boundary": self.boundary}


def build_lattice(geometry: str, L: int, boundary: str = "periodic") -> LatticeSpec:
    """Build a chain of ``L`` sites or an ``L x L`` square lattice.

    Every nearest-neighbour pair appears exactly once as ``(i, j)`` with
    ``i < j``. For ``L = 2`` the periodic wrap bond coincides with the open
    bond and is kept only once, so a periodic 2-site chain has a single edge.
    """
    if geometry not in GEOMETRIES:
        raise ValueError(f"unknown geometry {geometry!r}; expected one of {GEOMETRIES}")
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary {boundary!r}; expected one of {BOUNDARIES}")
    L = check_positive_int(L, "L", minimum=2)
    periodic = boundary == "periodic"

    edges: set[tuple[int, int]] = set()

    def add(i, j):
        if i != j:
            edges.add((min(i, j), max(i, j)))

    if geometry == "chain":
        n_sites = L
        for x in range(L):
            if x + 1 < L:
                add(x, x + 1)
            elif periodic:
                add(x, 0)
    else:
        n_sites = L * L
        for r in range(L):
            for c in range(L):
                here = r * L + c
                if c + 1 < L:
                    add(here, r * L + c + 1)
                elif periodic:
                    add(here, r * L)
                if r + 1 < L:
                    add(here, (r + 1) * L + c)
                elif periodic:
                    add(here, c)
    return LatticeSpec(geometry, L, boundary, n_sites, tuple(sorted(edges)))


def single_site() -> LatticeSpec:
    """A lone mode without neighbours (``geometry="site"``)."""
    return LatticeSpec("site", 1, "open", 1, ())


def lattice_from_dict(data: dict) -> LatticeSpec:
    """Inverse of :meth:`LatticeSpec.to_dict`."""
    if data["geometry"] == "site":
        return single_site()
    return build_lattice(data["geometry"], data["extent"], data.get("boundary", "periodic"))


@dataclass(frozen=True)
class FockSpace:
    """Tensor product of ``sites`` bosonic modes truncated to ``local_dim`` levels."""

    sites: int
    local_dim: int

    def __post_init__(self):
        check_positive_int(self.sites, "sites")
        check_positive_int(self.local_dim, "local_dim", minimum=2)

    @property
    def total_dim(self) -> int:
        return self.local_dim**self.sites

    def index(self, occupations: Sequence[int]) -> int:
        occupations = tuple(int(n) for n in occupations)
        if len(occupations) != self.sites:
            raise ValueError(f"expected {self.sites} occupations, got {len(occupations)}")
        if any(n < 0 or n >= self.local_dim for n in occupations):
            raise ValueError(f"occupations {occupations} outside [0, {self.local_dim})")
        return int(np.ravel_multi_index(occupations, (self.local_dim,) * self.sites))

    def occupations(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.total_dim:
            raise ValueError(f"basis index {index} outside [0, {self.total_dim})")
        return tuple(int(n) for n in np.unravel_index(index, (self.local_dim,) * self.sites))

    def basis_state(self, occupations: Sequence[int]) -> np.ndarray:
        psi = np.zeros(self.total_dim, dtype=complex)
        psi[self.index(occupations)] = 1.0
        return psi

    def vacuum(self) -> np.ndarray:
        return self.basis_state((0,) * self.sites)

    def site_occupations(self) -> np.ndarray:
        """Occupation of every site in every basis state, shape ``(N, total_dim)``."""
        return _occupation_table(self.sites, self.local_dim)


@lru_cache(maxsize=32)
def _occupation_table(sites: int, local_dim: int) -> np.ndarray:
    grid = np.indices((local_dim,) * sites).reshape(sites, -1)
    grid.setflags(write=False)
    return grid


def _ladder(d: int) -> sp.csr_matrix:
    return sp.diags(np.sqrt(np.arange(1, d, dtype=float)), 1, shape=(d, d), format="csr", dtype=complex)


@lru_cache(maxsize=256)
def _site_operator(sites: int, local_dim: int, site: int, kind: str) -> sp.csr_matrix:
    a = _ladder(local_dim)
    local = {"annihilate": a, "create": a.T.conj().tocsr(), "number": (a.T.conj() @ a).tocsr()}[kind]
    left = sp.identity(local_dim**site, dtype=complex, format="csr")
    right = sp.identity(local_dim ** (sites - site - 1), dtype=complex, format="csr")
    op = sp.kron(sp.kron(left, local, format="csr"), right, format="csr")
    op.sort_indices()
    return op


def site_operator(space: FockSpace, site: int, kind: str) -> sp.csr_matrix:
    """Annihilation, creation or number operator of one site in the full space.

    Returns a new CSR matrix; mutating it does not affect later calls.
    """
    if kind not in OPERATOR_KINDS:
        raise ValueError(f"unknown operator kind {kind!r}; expected one of {OPERATOR_KINDS}")
    if not 0 <= site < space.sites:
        raise ValueError(f"site {site} outside [0, {space.sites})")
    return _site_operator(space.sites, space.local_dim, int(site), kind).copy()


def expectation(state, op) -> complex:
    """``<psi|O|psi>/<psi|psi>`` for a vector, ``Tr[O rho]`` for a matrix."""
    state = np.asarray(state)
    check_operator(op)
    if state.ndim == 1:
        if state.shape[0] != op.shape[0]:
            raise ValueError(f"state dimension {state.shape[0]} does not match operator {op.shape[0]}")
        norm = np.vdot(state, state).real
        if norm == 0.0:
            raise ValueError("cannot take an expectation value in a zero-norm state")
        return complex(np.vdot(state, op @ state) / norm)
    if state.ndim == 2:
        if state.shape != op.shape:
            raise ValueError(f"density operator shape {state.shape} does not match operator {op.shape}")
        if sp.issparse(op):
            # Tr[O rho] = sum_ij O_ij rho_ji
            coo = op.tocoo()
            return complex(np.sum(coo.data * state[coo.col, coo.row]))
        return complex(np.trace(op @ state))
    raise ValueError(f"state must be 1-D or 2-D, got shape {state.shape}")


def normalize(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    norm = np.linalg.norm(psi)
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return psi / norm


def projector(psi) -> np.ndarray:
    psi = normalize(psi)
    return np.outer(psi, psi.conj())


def cutoff_convergence(
    compute: Callable[[int], float],
    start: int = 2,
    *,
    tol: float = 1e-3,
    max_dim: int = 12,
) -> tuple[int, dict[int, float]]:
    """Increase the local cutoff until an observable stops changing.

    ``compute(d)`` evaluates the observable with local dimension ``d``. The
    search stops at the first ``d`` where ``|compute(d + 1) - compute(d)|`` is
    below ``tol`` and returns that ``d`` with every value computed so far.
    Raises RuntimeError if ``max_dim`` is reached first.
    """
    values = {start: float(compute(start))}
    d = start
    while d < max_dim:
        values[d + 1] = float(compute(d + 1))
        if abs(values[d + 1] - values[d]) < tol:
            return d, values
        d += 1
    raise RuntimeError(f"observable not converged to {tol} up to local dimension {max_dim}: {values}")
