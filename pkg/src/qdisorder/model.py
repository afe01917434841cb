"""Driven-dissipative Bose-Hubbard model and hard-core resonance catalogue.

All energies and rates are in units of the loss rate ``gamma`` unless stated
otherwise; ``gamma`` itself is a model field so other units remain possible.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .hilbert import FockSpace, LatticeSpec, lattice_from_dict, site_operator
from .validation import check_nonnegative, check_positive, check_positive_int

MAX_CATALOG_SITES = 20
MAX_CATALOG_PARTICLES_LARGE = 3


@dataclass(frozen=True)
class ModelSpec:
    """Parameters of the driven-dissipative Bose-Hubbard lattice.

    ``delta0`` is the mean pump detuning; per-site detunings come from a
    :class:`DisorderRealization`. ``local_dim`` is the Fock cutoff ``d``
    (``d = 2`` is the hard-core limit).
    """

    lattice: LatticeSpec
    delta0: float
    U: float
    F: float
    J: float
    gamma: float = 1.0
    local_dim: int = 2

    def __post_init__(self):
        check_positive(self.gamma, "gamma")
        check_nonnegative(self.F, "F")
        check_positive_int(self.local_dim, "local_dim", minimum=2)

    @property
    def sites(self) -> int:
        return self.lattice.sites

    @property
    def space(self) -> FockSpace:
        return FockSpace(self.lattice.sites, self.local_dim)

    def replace(self, **changes) -> "ModelSpec":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return ModelSpec(**values)

    def to_dict(self) -> dict:
        return {
            "lattice": self.lattice.to_dict(),
            "delta0": self.delta0,
            "U": self.U,
            "F": self.F,
            "J": self.J,
            "gamma": self.gamma,
            "local_dim": self.local_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        lattice = lattice_from_dict(data["lattice"])
        return cls(
            lattice=lattice,
            delta0=float(data["delta0"]),
            U=float(data["U"]),
            F=float(data["F"]),
            J=float(data["J"]),
            gamma=float(data.get("gamma", 1.0)),
            local_dim=int(data.get("local_dim", 2)),
        )


@dataclass(frozen=True)
class DisorderRealization:
    """One draw of the per-site detunings ``Delta_j``."""

    detunings: np.ndarray = field(compare=False)
    config_id: int = 0
    seed: int | None = None

    def __post_init__(self):
        det = np.array(self.detunings, dtype=float)
        det.setflags(write=False)
        object.__setattr__(self, "detunings", det)

    def __len__(self):
        return self.detunings.shape[0]

    @classmethod
    def uniform(cls, model: ModelSpec) -> "DisorderRealization":
        return cls(np.full(model.sites, float(model.delta0)))


@lru_cache(maxsize=16)
def hamiltonian_parts(model: ModelSpec) -> tuple[sp.csr_matrix, np.ndarray]:
    """Detuning-free Hamiltonian and the diagonal of every number operator.

    ``H(w) = H0 - sum_j w_j * diag(numbers[j])``. Cached per model; callers
    must not mutate the returned objects.
    """
    space = model.space
    N = space.sites
    a = [site_operator(space, j, "annihilate") for j in range(N)]
    ad = [op.T.conj().tocsr() for op in a]
    h0 = sp.csr_matrix((space.total_dim, space.total_dim), dtype=complex)
    for j in range(N):
        h0 = h0 + 0.5 * model.U * (ad[j] @ ad[j] @ a[j] @ a[j]) + model.F * (ad[j] + a[j])
    for i, j in model.lattice.edges:
        h0 = h0 - model.J * (ad[i] @ a[j] + ad[j] @ a[i])
    h0 = h0.tocsr()
    h0.sum_duplicates()
    h0.eliminate_zeros()
    numbers = space.site_occupations().astype(float)
    return h0, numbers


def _detunings(model: ModelSpec, w) -> np.ndarray:
    if w is None:
        return np.full(model.sites, float(model.delta0))
    det = np.asarray(w.detunings if isinstance(w, DisorderRealization) else w, dtype=float)
    if det.shape != (model.sites,):
        raise ValueError(f"disorder realization has {det.shape} detunings, lattice has {model.sites} sites")
    return det


def build_hamiltonian(model: ModelSpec, w: DisorderRealization | None = None) -> sp.csr_matrix:
    """Sparse Bose-Hubbard Hamiltonian for one disorder realization.

    ``H = sum_j [-Delta_j n_j + U/2 a+_j a+_j a_j a_j + F (a+_j + a_j)]
    - J sum_<ij> (a+_i a_j + a+_j a_i)``. Each undirected edge contributes both
    hopping directions so ``H`` is Hermitian. ``w=None`` means no disorder
    (every ``Delta_j = delta0``).
    """
    det = _detunings(model, w)
    h0, numbers = hamiltonian_parts(model)
    diag = -(det @ numbers)
    return (h0 + sp.diags(diag.astype(complex), format="csr")).tocsr()


def dense_hamiltonian(model: ModelSpec, w=None) -> np.ndarray:
    det = _detunings(model, w)
    h0, numbers = hamiltonian_parts(model)
    h = h0.toarray()
    h[np.diag_indices_from(h)] -= det @ numbers
    return h


def jump_operators(model: ModelSpec) -> list[tuple[sp.csr_matrix, float]]:
    """Local loss channels ``(a_j, gamma)`` for every site."""
    space = model.space
    return [(site_operator(space, j, "annihilate"), float(model.gamma)) for j in range(space.sites)]


@dataclass(frozen=True)
class ResonanceEntry:
    """Many-body resonance of the fermionized hard-core chain.

    ``resonant_detuning`` is in units of ``gamma`` and ``J`` records the
    hopping (also in units of ``gamma``) used to compute it.
    """

    momenta: tuple[float, ...]
    particle_count: int
    total_momentum: float
    resonant_detuning: float
    drive_allowed: bool
    J: float

    @property
    def mode_labels(self) -> tuple[float, ...]:
        """Momenta as multiples of pi."""
        return tuple(k / math.pi for k in self.momenta)


def _wrap_momentum(k: float) -> float:
    """Reduce a momentum to the interval (-pi, pi]."""
    k = math.remainder(k, 2 * math.pi)
    if k <= -math.pi + 1e-12:
        k += 2 * math.pi
    if abs(k) < 1e-12:
        k = 0.0
    return k


def fermion_momenta(L: int, particle_count: int) -> list[float]:
    """Allowed single-fermion momenta for ``particle_count`` hard-core bosons.

    The Jordan-Wigner string turns periodic bosonic boundary conditions into
    periodic fermionic ones for an odd particle number and antiperiodic ones
    for an even number, so ``k = 2 pi m / L`` or ``k = 2 pi (m + 1/2) / L``.
    """
    shift = 0.0 if particle_count % 2 == 1 else 0.5
    return sorted(_wrap_momentum(2 * math.pi * (m + shift) / L) for m in range(L))


def resonance_catalog(L: int, J: float, max_particles: int, gamma: float = 1.0) -> list[ResonanceEntry]:
    """All ``N_p``-body resonances of a hard-core periodic chain, sorted by detuning.

    For each set of distinct fermion momenta the pump is resonant when
    ``Delta0 = -(2 J / N_p) sum_i cos k_i``. Only sets with zero total
    momentum are reachable by a homogeneous drive (``drive_allowed``).
    """
    L = check_positive_int(L, "L", minimum=2)
    max_particles = check_positive_int(max_particles, "max_particles")
    if max_particles > L:
        raise ValueError(f"max_particles={max_particles} exceeds chain length {L}")
    if L > MAX_CATALOG_SITES and max_particles > MAX_CATALOG_PARTICLES_LARGE:
        raise ValueError(
            f"catalogue for L={L} with up to {max_particles} particles is too large; "
            f"use max_particles <= {MAX_CATALOG_PARTICLES_LARGE}"
        )
    gamma = check_positive(gamma, "gamma")
    entries = []
    for n_p in range(1, max_particles + 1):
        ks = fermion_momenta(L, n_p)
        for combo in itertools.combinations(ks, n_p):
            total = _wrap_momentum(sum(combo))
            energy = -(2.0 * J / n_p) * sum(math.cos(k) for k in combo)
            entries.append(
                ResonanceEntry(
                    momenta=tuple(combo),
                    particle_count=n_p,
                    total_momentum=total,
                    resonant_detuning=energy / gamma,
                    drive_allowed=abs(total) < 1e-9,
                    J=float(J) / gamma,
                )
            )
    entries.sort(key=lambda e: (e.resonant_detuning, e.particle_count, e.momenta))
    return entries


def write_resonance_csv(entries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["momenta", "N_p", "K", "delta0_star", "drive_allowed"])
        for e in entries:
            momenta = " ".join(repr(k) for k in e.momenta)
            writer.writerow([momenta, e.particle_count, repr(e.total_momentum), repr(e.resonant_detuning), int(e.drive_allowed)])
