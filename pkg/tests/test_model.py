import math

import numpy as np
import pytest
import scipy.sparse as sp

from qdisorder.hilbert import build_lattice, single_site
from qdisorder.model import (
    DisorderRealization,
    ModelSpec,
    build_hamiltonian,
    dense_hamiltonian,
    fermion_momenta,
    jump_operators,
    resonance_catalog,
    write_resonance_csv,
)


def test_single_site_matrix_elements():
    m = ModelSpec(single_site(), delta0=0.7, U=1.3, F=0.4, J=0.0, local_dim=3)
    H = dense_hamiltonian(m)
    np.testing.assert_allclose(np.diag(H).real, [0, -0.7, -1.4 + 1.3])
    assert H[0, 1] == pytest.approx(0.4)
    assert H[1, 2] == pytest.approx(math.sqrt(2) * 0.4)


def test_single_particle_band():
    L, J, d0 = 5, 0.8, 0.3
    m = ModelSpec(build_lattice("chain", L), delta0=d0, U=0.0, F=0.0, J=J, local_dim=2)
    H = dense_hamiltonian(m)
    one = [m.space.index(tuple(int(i == j) for i in range(L))) for j in range(L)]
    ev = np.sort(np.linalg.eigvalsh(H[np.ix_(one, one)]))
    expected = np.sort([-d0 - 2 * J * math.cos(2 * math.pi * k / L) for k in range(L)])
    np.testing.assert_allclose(ev, expected, atol=1e-12)


def test_decoupled_sites_direct_sum():
    one = ModelSpec(single_site(), 0.5, 0.2, 0.3, 0.0, local_dim=3)
    two = ModelSpec(build_lattice("chain", 2, "open"), 0.5, 0.2, 0.3, 0.0, local_dim=3)
    h1 = dense_hamiltonian(one)
    expected = np.kron(h1, np.eye(3)) + np.kron(np.eye(3), h1)
    np.testing.assert_allclose(dense_hamiltonian(two), expected, atol=1e-14)


def test_hermitian_and_disorder_is_diagonal():
    m = ModelSpec(build_lattice("chain", 3), 1.0, 1.0, 2.0, 0.5, local_dim=3)
    w = DisorderRealization(np.array([0.2, -1.1, 0.4]))
    H = build_hamiltonian(m, w)
    assert abs(H - H.conj().T).max() < 1e-12
    diff = (H - build_hamiltonian(m)).toarray()
    assert np.allclose(diff - np.diag(np.diag(diff)), 0)
    with pytest.raises(ValueError):
        build_hamiltonian(m, DisorderRealization(np.zeros(2)))


def test_jump_operators():
    m = ModelSpec(build_lattice("chain", 3), 0, 0, 0, 0, gamma=0.7, local_dim=2)
    jumps = jump_operators(m)
    assert len(jumps) == 3 and all(rate == 0.7 for _, rate in jumps)
    for op, _ in jumps:
        assert abs(op - op.conj().T).max() > 0
        assert sp.linalg.norm(op @ op) == 0


def test_catalog_single_particle():
    cat = resonance_catalog(5, 20.0, 1)
    assert len(cat) == 5
    allowed = [e for e in cat if e.drive_allowed]
    assert len(allowed) == 1 and allowed[0].resonant_detuning == pytest.approx(-40.0)
    assert sorted(e.resonant_detuning for e in cat) == [e.resonant_detuning for e in cat]


def test_catalog_two_body_entry():
    cat = resonance_catalog(5, 20.0, 2)
    (entry,) = [
        e for e in cat
        if e.particle_count == 2 and np.allclose(sorted(e.mode_labels), [-0.2, 0.6])
    ]
    assert entry.resonant_detuning == pytest.approx(-10.0)
    assert entry.total_momentum == pytest.approx(2 * math.pi / 5)
    assert not entry.drive_allowed


def test_even_particle_numbers_use_antiperiodic_momenta():
    ks = fermion_momenta(4, 2)
    np.testing.assert_allclose(sorted(np.array(ks) / math.pi), [-0.75, -0.25, 0.25, 0.75])


def test_catalog_reflection_symmetry():
    cat = resonance_catalog(6, 1.0, 3)
    index = {tuple(np.round(sorted(e.momenta), 9)): e for e in cat}
    for e in cat:
        mirrored = tuple(np.round(sorted(-k if abs(k - math.pi) > 1e-9 else k for k in e.momenta), 9))
        other = index[mirrored]
        assert other.resonant_detuning == pytest.approx(e.resonant_detuning)
        if abs(abs(e.total_momentum) - math.pi) > 1e-9:
            assert other.total_momentum == pytest.approx(-e.total_momentum, abs=1e-9)


def test_catalog_guards_and_csv(tmp_path):
    with pytest.raises(ValueError):
        resonance_catalog(5, 1.0, 6)
    with pytest.raises(ValueError):
        resonance_catalog(24, 1.0, 4)
    path = tmp_path / "cat.csv"
    write_resonance_csv(resonance_catalog(3, 1.0, 2), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "momenta,N_p,K,delta0_star,drive_allowed" and len(lines) == 1 + 3 + 3


def test_model_round_trip():
    m = ModelSpec(build_lattice("square", 3), 0.1, 0.1, 1.5, 0.225, local_dim=2)
    assert ModelSpec.from_dict(m.to_dict()) == m
    with pytest.raises(ValueError):
        ModelSpec(single_site(), 0, 0, 0, 0, gamma=0.0)
