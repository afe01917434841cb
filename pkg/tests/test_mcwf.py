import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from qdisorder.hilbert import build_lattice, single_site, site_operator
from qdisorder.lindblad import evolve_master, model_liouvillian
from qdisorder.mcwf import (
    TrajectoryRecord,
    dense_effective_hamiltonians,
    effective_hamiltonian,
    ensemble_density,
    run_trajectory,
    simulate_jump_batch,
)
from qdisorder.model import DisorderRealization, ModelSpec, build_hamiltonian, jump_operators
from qdisorder.observables import operator_for


def rngs(n, seed=0):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def decay_model(gamma=1.0):
    return ModelSpec(single_site(), 0.0, 0.0, 0.0, 0.0, gamma=gamma, local_dim=2)


def test_effective_hamiltonian_examples():
    m = decay_model(0.6)
    heff = effective_hamiltonian(np.zeros((2, 2)), jump_operators(m)).toarray()
    np.testing.assert_allclose(heff, np.diag([0, -0.3j]))
    H = build_hamiltonian(ModelSpec(build_lattice("chain", 2), 0.4, 1.0, 0.5, 0.3, local_dim=3))
    assert abs(effective_hamiltonian(H) - H).max() == 0
    anti = effective_hamiltonian(H, jump_operators(ModelSpec(build_lattice("chain", 2), 0.4, 1.0, 0.5, 0.3,
                                                             local_dim=3)))
    anti = ((anti - anti.conj().T) / 2j).toarray()
    assert np.linalg.eigvalsh(anti).max() <= 1e-12


def test_dense_effective_hamiltonians_include_detunings():
    m = ModelSpec(build_lattice("chain", 2), 0.4, 1.0, 0.5, 0.3, local_dim=2)
    det = np.array([[0.1, 0.7], [1.0, -1.0]])
    heffs = dense_effective_hamiltonians(m, det)
    for row, h in zip(det, heffs):
        expected = effective_hamiltonian(build_hamiltonian(m, DisorderRealization(row)), jump_operators(m))
        np.testing.assert_allclose(h, expected.toarray(), atol=1e-14)


@pytest.fixture(scope="module")
def decay_batch():
    m = decay_model()
    psi0 = m.space.basis_state([1])
    heffs = dense_effective_hamiltonians(m, np.zeros((1, 1)))
    return simulate_jump_batch(heffs, jump_operators(m), psi0, [0.0, 1.0, 40.0], rngs(10_000, 7))


def test_exactly_one_jump_with_exponential_waiting_time(decay_batch):
    counts = [len(log) for log in decay_batch.jump_logs]
    assert set(counts) == {1}
    times = np.array([log[0][0] for log in decay_batch.jump_logs])
    ks = stats.kstest(times, "expon")
    critical = 1.63 / math.sqrt(times.size)  # 1% level
    assert ks.statistic < critical


def test_no_jump_survival(decay_batch):
    survived = np.mean([log[0][0] > 1.0 for log in decay_batch.jump_logs])
    p = math.exp(-1.0)
    assert abs(survived - p) < 3 * math.sqrt(p * (1 - p) / 10_000)


def test_equal_channels_split_evenly():
    m = ModelSpec(build_lattice("chain", 2, "open"), 0.0, 0.0, 0.0, 0.0, local_dim=2)
    space = m.space
    psi0 = (space.basis_state([1, 0]) + space.basis_state([0, 1])) / math.sqrt(2)
    heffs = dense_effective_hamiltonians(m, np.zeros((1, 2)))
    res = simulate_jump_batch(heffs, jump_operators(m), psi0, [0.0, 30.0], rngs(4000, 3))
    channels = np.array([log[0][1] for log in res.jump_logs])
    assert abs(channels.mean() - 0.5) < 3 * 0.5 / math.sqrt(4000)


def two_site():
    return ModelSpec(build_lattice("chain", 2), 0.5, 1.0, 1.0, 0.5, local_dim=3), DisorderRealization(
        np.array([0.3, 0.9])
    )


def test_unraveling_matches_master_equation():
    m, w = two_site()
    times = np.array([0.0, 0.5, 1.0, 2.0, 4.0])
    psi0 = m.space.vacuum()
    n_op = operator_for(m, "density")
    T = 600
    heffs = dense_effective_hamiltonians(m, w.detunings[None])
    res = simulate_jump_batch(heffs, jump_operators(m), psi0, times, rngs(T, 11), {"n": n_op})
    rhos = evolve_master(model_liouvillian(m, w), np.outer(psi0, psi0.conj()), times)
    exact = np.array([np.trace(n_op @ r).real for r in rhos])
    mean = res.observables["n"].mean(axis=0)
    sd = res.observables["n"].std(axis=0, ddof=1)
    assert np.all(np.abs(mean - exact) <= 5 * sd / math.sqrt(T) + 1e-12)


def test_jump_rate_matches_integrated_density():
    m, w = two_site()
    times = np.linspace(0, 6, 121)
    T = 400
    heffs = dense_effective_hamiltonians(m, w.detunings[None])
    res = simulate_jump_batch(heffs, jump_operators(m), m.space.vacuum(), times, rngs(T, 5),
                              {"N": operator_for(m, "total_number")})
    expected = trapezoid(res.observables["N"], times, axis=1) * m.gamma
    counts = np.array([len(log) for log in res.jump_logs])
    diff = counts - expected
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / math.sqrt(T)


def test_jump_times_increase_and_samples_exact():
    m, w = two_site()
    rec = run_trajectory(m, w, m.space.vacuum(), [0.0, 0.7, 3.0, 9.0], np.random.default_rng(1))
    np.testing.assert_array_equal(rec.sample_times, [0.0, 0.7, 3.0, 9.0])
    jt = [t for t, _ in rec.jump_log]
    assert len(jt) > 0 and all(b > a for a, b in zip(jt, jt[1:]))


def test_trajectory_determinism_and_batch_independence():
    m, w = two_site()
    times = np.linspace(0, 5, 11)
    a = run_trajectory(m, w, m.space.vacuum(), times, np.random.default_rng(42))
    b = run_trajectory(m, w, m.space.vacuum(), times, np.random.default_rng(42))
    np.testing.assert_array_equal(a.observables["density"], b.observables["density"])
    assert a.jump_log == b.jump_log
    heffs = dense_effective_hamiltonians(m, np.stack([w.detunings, w.detunings + 1]))
    gens = [np.random.default_rng(9), np.random.default_rng(42)]
    batch = simulate_jump_batch(heffs, jump_operators(m), m.space.vacuum(), times, gens,
                                {"density": operator_for(m, "density")}, [1, 0])
    np.testing.assert_allclose(batch.observables["density"][1], a.observables["density"], rtol=1e-9, atol=1e-12)


def test_record_round_trip(tmp_path):
    m, w = two_site()
    rec = run_trajectory(m, w, m.space.vacuum(), [0.0, 1.0, 2.5], np.random.default_rng(3), seed=3)
    rec.save(tmp_path / "traj")
    back = TrajectoryRecord.load(tmp_path / "traj")
    np.testing.assert_array_equal(back.observables["density"], rec.observables["density"])
    assert back.jump_log == rec.jump_log and back.seed == 3


def test_ensemble_density_properties():
    m, w = two_site()
    psi = m.space.vacuum()
    rho1 = ensemble_density(psi[None])
    assert np.trace(rho1 @ rho1).real == pytest.approx(1)
    np.testing.assert_allclose(ensemble_density(np.stack([psi, psi, psi])), np.outer(psi, psi.conj()))
    with pytest.raises(ValueError):
        ensemble_density(np.empty((0, 9)))
    with pytest.raises(ValueError):
        ensemble_density([])


def test_input_validation():
    m = decay_model()
    heffs = dense_effective_hamiltonians(m, np.zeros((1, 1)))
    with pytest.raises(ValueError):
        simulate_jump_batch(heffs, jump_operators(m), np.array([1.0, 1.0]), [0, 1], rngs(1))
    with pytest.raises(ValueError):
        simulate_jump_batch(heffs, jump_operators(m), np.array([1.0, 0.0]), [1, 0], rngs(1))
