"""Physical observables: densities, k=0 fraction, connected correlators, histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.signal import find_peaks

from .hilbert import FockSpace, LatticeSpec, expectation, site_operator
from .model import ModelSpec
from .twa import WignerEnsembleStats, wigner_observables


@dataclass
class ObservableSeries:
    name: str
    times: np.ndarray
    values: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values)
        self.errors = np.asarray(self.errors, dtype=float)
        if not (self.times.shape == self.values.shape == self.errors.shape):
            raise ValueError("times, values and errors must have equal shapes")
        if np.any(self.errors < 0):
            raise ValueError("statistical errors must be non-negative")

    @classmethod
    def from_samples(cls, name, times, samples) -> "ObservableSeries":
        """Mean and standard error over the first axis of ``samples`` (shape ``(n, len(times))``)."""
        samples = np.asarray(samples)
        n = samples.shape[0]
        err = samples.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(samples.shape[1])
        return cls(name, times, samples.mean(axis=0), err)


def operator_for(model: ModelSpec | FockSpace, name: str) -> sp.csr_matrix:
    """Sparse operator for a named observable.

    Names: ``density`` (site-averaged occupation), ``total_number``,
    ``n_<j>`` (occupation of site j), ``a_<j>`` (field of site j).
    """
    space = model.space if isinstance(model, ModelSpec) else model
    if name in ("density", "total_number"):
        total = sum(site_operator(space, j, "number") for j in range(space.sites))
        return (total / space.sites if name == "density" else total).tocsr()
    prefix, _, index = name.partition("_")
    if index.isdigit():
        if prefix == "n":
            return site_operator(space, int(index), "number")
        if prefix == "a":
            return site_operator(space, int(index), "annihilate")
    raise ValueError(f"unknown observable {name!r}")


def site_densities(state, space: FockSpace) -> np.ndarray:
    return np.array([expectation(state, site_operator(space, j, "number")).real for j in range(space.sites)])


def mean_density(state, space: FockSpace | ModelSpec | None = None) -> float:
    """Site-averaged boson density of a state or of a Wigner ensemble.

    For :class:`WignerEnsembleStats` the symmetric-ordering shift ``-1/2`` is
    applied per site.
    """
    if isinstance(state, WignerEnsembleStats):
        return float(np.mean(wigner_observables(state)["density"]))
    if space is None:
        raise ValueError("a Fock space (or model) is required for state vectors and density matrices")
    space = space.space if isinstance(space, ModelSpec) else space
    return float(np.mean(site_densities(state, space)))


def coherence_matrix(state, space: FockSpace) -> np.ndarray:
    """``C[l, m] = <a_l^+ a_m>`` of a pure state or density matrix."""
    a = [site_operator(space, j, "annihilate") for j in range(space.sites)]
    out = np.empty((space.sites, space.sites), dtype=complex)
    for l in range(space.sites):
        for m in range(space.sites):
            out[l, m] = expectation(state, a[l].conj().T @ a[m])
    return out


def field_means(state, space: FockSpace) -> np.ndarray:
    return np.array([expectation(state, site_operator(space, j, "annihilate")) for j in range(space.sites)])


def k0_fraction(coherence) -> float:
    """Fraction of the population in the homogeneous mode.

    ``f0 = sum_lm C[l, m] / (N sum_l C[l, l])``: the k=0 occupation
    ``sum_lm C_lm / N`` divided by the total population. Equals 1 for a fully
    coherent uniform state and 1/N without off-site coherence.
    """
    coherence = np.asarray(coherence)
    if coherence.ndim != 2 or coherence.shape[0] != coherence.shape[1]:
        raise ValueError("coherence matrix must be square")
    N = coherence.shape[0]
    total = np.trace(coherence).real
    if total <= 0:
        raise ValueError("total density is zero; k=0 fraction undefined")
    return float(np.sum(coherence).real / (N * total))


def torus_distances(lattice: LatticeSpec) -> np.ndarray:
    """Euclidean minimum-image distance between every pair of sites."""
    if lattice.boundary != "periodic":
        raise ValueError("distance binning needs a periodic lattice")
    coords = lattice.coordinates()
    L = lattice.extent
    delta = np.abs(coords[:, None, :] - coords[None, :, :])
    delta = np.minimum(delta, L - delta)
    return np.sqrt(np.sum(delta.astype(float) ** 2, axis=-1))


@dataclass
class G1Profile:
    """Connected one-body correlator averaged over site pairs at each distance."""

    r: np.ndarray
    real: np.ndarray
    modulus: np.ndarray
    pairs: np.ndarray

    def restrict(self, r_min: float, r_max: float) -> "G1Profile":
        keep = (self.r >= r_min - 1e-9) & (self.r <= r_max + 1e-9)
        return G1Profile(self.r[keep], self.real[keep], self.modulus[keep], self.pairs[keep])


def g1_connected(coherence, field, lattice: LatticeSpec, *, decimals: int = 1) -> G1Profile:
    """``g1(r) = <a_l^+ a_m> - <a_l>* <a_m>`` averaged over ordered pairs at distance r.

    Distances are Euclidean minimum-image distances rounded to ``decimals``;
    only ``0 < r <= L/2`` is reported. ``real`` is the pair average of the real
    part, ``modulus`` the pair average of the absolute value.
    """
    coherence = np.asarray(coherence)
    field = np.asarray(field)
    N = lattice.sites
    if coherence.shape != (N, N) or field.shape != (N,):
        raise ValueError("coherence/field shapes do not match the lattice")
    dist = np.round(torus_distances(lattice), decimals)
    connected = coherence - np.outer(field.conj(), field)
    off = ~np.eye(N, dtype=bool)
    mask = off & (dist <= lattice.extent / 2 + 1e-9)
    rs = np.unique(dist[mask])
    real = np.empty(rs.size)
    modulus = np.empty(rs.size)
    pairs = np.empty(rs.size, dtype=int)
    for i, r in enumerate(rs):
        sel = mask & (dist == r)
        vals = connected[sel]
        real[i] = vals.real.mean()
        modulus[i] = np.abs(vals).mean()
        pairs[i] = vals.size
    return G1Profile(rs, real, modulus, pairs)


@dataclass
class DensityHistogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    mean: float

    def __post_init__(self):
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if int(np.sum(self.counts)) != self.total:
            raise ValueError("histogram counts do not sum to the total")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def density(self) -> np.ndarray:
        return self.counts / (self.total * np.diff(self.edges))

    def modes(self, min_prominence: float = 0.1) -> np.ndarray:
        """Bin centres of local maxima with prominence above ``min_prominence`` of the tallest bin."""
        padded = np.r_[0, self.counts, 0]
        peaks, _ = find_peaks(padded, prominence=min_prominence * max(self.counts.max(), 1))
        return self.centers[peaks - 1]


def density_histogram(values, bins=30, range=None) -> DensityHistogram:
    """Histogram of per-trajectory steady-state densities with their mean."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("no samples to histogram")
    if range is None and np.ptp(values) == 0:
        centre = values[0]
        range = (centre - 0.5, centre + 0.5)
    counts, edges = np.histogram(values, bins=bins, range=range)
    return DensityHistogram(edges, counts, int(counts.sum()), float(values.mean()))


def time_average(times, values, t_min: float, t_max: float | None = None) -> np.ndarray:
    """Average ``values[..., k]`` over sample times in ``[t_min, t_max]``."""
    times = np.asarray(times)
    keep = times >= t_min
    if t_max is not None:
        keep &= times <= t_max
    if not keep.any():
        raise ValueError(f"no samples after burn-in t={t_min}")
    return np.asarray(values)[..., keep].mean(axis=-1)


def is_stationary(times, mean_series, errors, t_min: float, n_sigma: float = 3.0) -> bool:
    """Compare first- and second-half means of a post-burn-in series."""
    times = np.asarray(times)
    vals = np.asarray(mean_series)[times >= t_min]
    errs = np.asarray(errors)[times >= t_min]
    if vals.size < 4:
        return True
    half = vals.size // 2
    a, b = vals[:half].mean(), vals[half:].mean()
    ea = np.sqrt(np.sum(errs[:half] ** 2)) / half
    eb = np.sqrt(np.sum(errs[half:] ** 2)) / (vals.size - half)
    return bool(abs(a - b) <= n_sigma * np.hypot(ea, eb) + 1e-12)
