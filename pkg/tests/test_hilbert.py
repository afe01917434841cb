import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdisorder.hilbert import (
    FockSpace,
    build_lattice,
    cutoff_convergence,
    expectation,
    normalize,
    site_operator,
)


def test_periodic_chain_is_a_ring():
    lat = build_lattice("chain", 5, "periodic")
    assert lat.sites == 5 and len(lat.edges) == 5
    degree = np.bincount(np.ravel(lat.edges), minlength=5)
    assert np.all(degree == 2)


def test_periodic_square_torus_edges():
    lat = build_lattice("square", 14, "periodic")
    assert lat.sites == 196 and len(lat.edges) == 392
    assert len(set(lat.edges)) == 392
    assert all(0 <= i < 196 and 0 <= j < 196 and i != j for i, j in lat.edges)


def test_two_site_ring_has_a_single_edge():
    assert build_lattice("chain", 2, "periodic").edges == ((0, 1),)


def test_open_chain_and_errors():
    assert len(build_lattice("chain", 4, "open").edges) == 3
    with pytest.raises(ValueError):
        build_lattice("chain", 1)
    with pytest.raises(ValueError):
        build_lattice("hexagon", 4)


def test_hardcore_ladder():
    a = site_operator(FockSpace(1, 2), 0, "annihilate").toarray()
    np.testing.assert_array_equal(a, [[0, 1], [0, 0]])


def test_number_operator_on_fock_two():
    space = FockSpace(1, 3)
    n = site_operator(space, 0, "number")
    psi = space.basis_state([2])
    np.testing.assert_allclose(n @ psi, 2 * psi)


def test_distinct_sites_commute():
    space = FockSpace(2, 2)
    a0, a1 = (site_operator(space, j, "annihilate") for j in (0, 1))
    assert abs(a0 @ a1 - a1 @ a0).max() == 0


def test_create_is_adjoint_and_number_is_product():
    space = FockSpace(2, 3)
    for j in range(2):
        a = site_operator(space, j, "annihilate")
        ad = site_operator(space, j, "create")
        assert abs(ad - a.conj().T).max() == 0
        assert abs(site_operator(space, j, "number") - ad @ a).max() < 1e-14
    with pytest.raises(ValueError):
        site_operator(space, 2, "number")


@pytest.mark.parametrize("d", [2, 3, 5])
def test_commutator_is_identity_below_cutoff(d):
    space = FockSpace(2, d)
    a = site_operator(space, 1, "annihilate")
    comm = (a @ a.conj().T - a.conj().T @ a).toarray()
    occ = space.site_occupations()[1]
    low = occ < d - 1
    np.testing.assert_allclose(comm[np.ix_(low, low)], np.eye(low.sum()), atol=1e-14)


def test_expectation_values():
    space = FockSpace(1, 3)
    n = site_operator(space, 0, "number")
    assert expectation(space.vacuum(), n) == 0
    assert expectation(space.basis_state([1]), n) == pytest.approx(1)
    assert expectation(2 * space.basis_state([1]), n) == pytest.approx(1)
    rho = np.diag([0.5, 0.5, 0.0]).astype(complex)
    assert expectation(rho, n) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        expectation(np.zeros(3), n)
    with pytest.raises(ValueError):
        expectation(np.ones(4), n)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(2, 4), st.data())
def test_index_round_trip(sites, d, data):
    space = FockSpace(sites, d)
    idx = data.draw(st.integers(0, space.total_dim - 1))
    assert space.index(space.occupations(idx)) == idx
    assert space.total_dim == d**sites


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=8, max_size=8), st.floats(0.1, 10))
def test_expectation_scale_invariant(parts, scale):
    psi = np.array(parts[:4]) + 1j * np.array(parts[4:])
    if np.linalg.norm(psi) < 1e-3:
        return
    n = site_operator(FockSpace(2, 2), 0, "number")
    assert expectation(scale * psi, n) == pytest.approx(expectation(psi, n), rel=1e-12, abs=1e-12)
    assert abs(expectation(psi, n).imag) < 1e-10
    assert np.linalg.norm(normalize(psi)) == pytest.approx(1, abs=1e-12)


def test_cutoff_convergence_helper():
    d, values = cutoff_convergence(lambda d: 1 - 2.0**-d, tol=1e-2)
    assert d == 6 and set(values) == set(range(2, 8))
    with pytest.raises(RuntimeError):
        cutoff_convergence(lambda d: float(d), max_dim=4)
