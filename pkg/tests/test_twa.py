import json
import math

import numpy as np
import pytest

from qdisorder.hilbert import build_lattice, single_site
from qdisorder.model import DisorderRealization, ModelSpec
from qdisorder.twa import (
    CoherentField,
    TWAInstabilityError,
    WignerEnsembleStats,
    run_twa_batch,
    sample_initial_vacuum,
    save_snapshots,
    save_stats_csv,
    stability_bound,
    twa_step,
    wigner_observables,
)


def site(**kw):
    p = dict(delta0=0.0, U=0.0, F=0.0, J=0.0)
    p.update(kw)
    return ModelSpec(single_site(), **p)


def gens(n, seed=0):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def test_vacuum_sampling_moments():
    alpha = sample_initial_vacuum(100_000, np.random.default_rng(0)).amplitudes
    abs2 = np.abs(alpha) ** 2
    assert abs(abs2.mean() - 0.5) < 0.005
    assert abs(alpha.mean()) < 3 * math.sqrt(0.5 / alpha.size)
    np.testing.assert_allclose([alpha.real.var(), alpha.imag.var()], [0.25, 0.25], rtol=0.02)


def test_noiseless_linear_damping():
    m = site(gamma=0.8)
    f = CoherentField(np.array([1.0 + 0.5j]))
    for _ in range(1000):
        f = twa_step(f, m, None, 1e-3, None, noise=False)
    assert f.time == pytest.approx(1.0)
    assert abs(f.amplitudes[0]) == pytest.approx(abs(1 + 0.5j) * math.exp(-0.4), rel=1e-8)


def test_single_step_matches_batch_integrator():
    m = ModelSpec(build_lattice("chain", 3), 0.3, 0.1, 0.5, 0.2)
    w = DisorderRealization(np.array([0.1, 0.4, -0.2]))
    f = CoherentField(np.zeros(3))
    for _ in range(50):
        f = twa_step(f, m, w, 0.01, None, noise=False)
    res = run_twa_batch(m, w.detunings[None], [0.5], [np.random.default_rng(0)], dt=0.01, initial="zero",
                        noise=False)
    np.testing.assert_allclose(res.final_fields[0], f.amplitudes, atol=1e-12)


def test_linear_steady_state_with_noise():
    m = site(delta0=0.3, F=0.5)
    res = run_twa_batch(m, np.full((2000, 1), 0.3), np.arange(0, 16.5, 0.5), gens(2000, 1), dt=0.01,
                        stats_from=10.0)
    per_traj = res.observables["density"][:, 20:].mean(axis=1)
    exact = 0.25 / (0.09 + 0.25)
    assert abs(per_traj.mean() - exact) < 3 * per_traj.std(ddof=1) / math.sqrt(per_traj.size)


def test_pure_loss_keeps_vacuum_stationary():
    m = site()
    res = run_twa_batch(m, np.zeros((4000, 1)), [0.0, 2.0, 5.0], gens(4000, 2), dt=0.01)
    dens = res.observables["density"][:, -1]
    assert abs(dens.mean()) < 3 * dens.std(ddof=1) / math.sqrt(dens.size)


def test_drive_sign_only_flips_the_field():
    # F -> -F is the map alpha -> -alpha: <alpha> flips, densities are unchanged.
    from qdisorder.twa import _Drift, _midpoint_step

    m = ModelSpec(build_lattice("square", 3), 0.1, 0.1, 1.2, 0.225)
    det = np.full((1, 9), 0.1)
    plus, minus = _Drift(m), _Drift(m)
    minus.F = -m.F
    a = b = np.zeros((1, 9), dtype=complex)
    for _ in range(300):
        a = _midpoint_step(plus, a, det, 0.01, 0.0)
        b = _midpoint_step(minus, b, det, 0.01, 0.0)
    np.testing.assert_allclose(b, -a, atol=1e-12)
    np.testing.assert_allclose(np.abs(b) ** 2, np.abs(a) ** 2, atol=1e-12)


def test_disorder_does_not_change_the_noise_stream():
    m = ModelSpec(build_lattice("chain", 4), 0.1, 0.1, 0.5, 0.2)
    a_gens, b_gens = gens(3, 5), gens(3, 5)
    clean = run_twa_batch(m, np.full((3, 4), 0.1), [0.0, 1.0], a_gens, dt=0.01)
    dirty = run_twa_batch(m, 0.1 + np.random.default_rng(0).normal(size=(3, 4)), [0.0, 1.0], b_gens, dt=0.01)
    np.testing.assert_array_equal(clean.observables["density"][:, 0], dirty.observables["density"][:, 0])
    for a, b in zip(a_gens, b_gens):
        assert a.random() == b.random()


def test_step_size_convergence():
    m = site(delta0=0.3, U=0.05, F=0.5)
    out = []
    for dt in (0.02, 0.01):
        res = run_twa_batch(m, np.full((1500, 1), 0.3), np.arange(0, 16.0, 1.0), gens(1500, 3), dt=dt)
        x = res.observables["density"][:, 8:].mean(axis=1)
        out.append((x.mean(), x.std(ddof=1) / math.sqrt(x.size)))
    (m1, e1), (m2, e2) = out
    assert abs(m1 - m2) < 3 * math.hypot(e1, e2)


def test_stability_and_overflow_guards():
    m = site(delta0=0.3, F=0.5)
    with pytest.raises(ValueError):
        run_twa_batch(m, np.zeros((1, 1)), [1.0], gens(1), dt=0.5)
    with pytest.raises(ValueError):
        run_twa_batch(m, np.zeros((1, 1)), [0.015], gens(1), dt=0.01)
    with pytest.raises(TWAInstabilityError):
        run_twa_batch(site(F=50.0), np.zeros((1, 1)), [1.0], gens(1), dt=0.001, overflow=5.0)
    assert stability_bound(ModelSpec(build_lattice("square", 4), 0.1, 0.1, 1, 0.225), [0.1], 2.0) == pytest.approx(
        0.1 / max(0.1 + 4 * 0.225 + 0.2, 1.0)
    )
    with pytest.raises(TWAInstabilityError):
        CoherentField(np.array([np.inf]))


def test_wigner_observables_shift_only_the_diagonal():
    stats = WignerEnsembleStats(2)
    with pytest.raises(ValueError):
        wigner_observables(stats)
    stats.add(np.array([[1.0, 1j], [1.0, -1j]]))
    obs = wigner_observables(stats)
    np.testing.assert_allclose(obs["density"], [0.5, 0.5])
    np.testing.assert_allclose(obs["coherence"], [[0.5, 0], [0, 0.5]], atol=1e-15)
    np.testing.assert_allclose(obs["field"], [1.0, 0.0])


def test_stats_merge_and_cauchy_schwarz():
    rng = np.random.default_rng(4)
    fields = rng.normal(size=(50, 3)) + 1j * rng.normal(size=(50, 3)) + 0.7
    a, b, whole = WignerEnsembleStats(3), WignerEnsembleStats(3), WignerEnsembleStats(3)
    a.add(fields[:20])
    b.add(fields[20:])
    whole.add(fields)
    merged = a.merge(b)
    assert merged.count == 50
    np.testing.assert_allclose(merged.sum_outer, whole.sum_outer)
    obs = wigner_observables(merged)
    assert np.all(obs["density"] + 0.5 >= np.abs(obs["field"]) ** 2)


def test_exports(tmp_path):
    stats = WignerEnsembleStats(4)
    stats.add(np.ones((3, 4)) * (1 + 1j))
    lines = save_stats_csv(stats, tmp_path / "stats.csv").read_text().splitlines()
    assert lines[0] == "site,density,field_re,field_im" and len(lines) == 5
    lat = build_lattice("square", 2)
    csv_path, json_path = save_snapshots(tmp_path / "snap", np.arange(8.0).reshape(2, 4), lat, {"W": 0.1})
    meta = json.loads(json_path.read_text())
    assert meta["shape"] == [2, 2] and meta["count"] == 2 and meta["W"] == 0.1
    rows = csv_path.read_text().splitlines()
    assert np.array(rows[2].split(","), dtype=float).reshape(meta["shape"]).tolist() == [[4, 5], [6, 7]]
