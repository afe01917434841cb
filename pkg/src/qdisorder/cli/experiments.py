"""The four canonical experiments.

Each ``run_*`` function takes an :class:`ExperimentConfig`, writes CSV tables
and a JSON report into ``config.out_dir`` and returns the report as a dict.
Every CSV starts with ``#`` comment lines carrying the provenance (config
hash, master seed, code version); the JSON report carries the same block.
Nothing time- or worker-dependent is written, so reruns are byte-identical.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from ..analysis import fit_exponential, fit_power_law, transition_slope
from ..disorder import DisorderSpec, derive_seed, gauss_hermite_nodes, sample_disorder
from ..lindblad import evolve_master, exact_state, model_liouvillian
from ..model import resonance_catalog
from ..observables import (
    density_histogram,
    g1_connected,
    is_stationary,
    k0_fraction,
    mean_density,
    operator_for,
)
from ..sampling import (
    EnsembleAccumulator,
    ErrorBudget,
    SamplingPlan,
    predicted_error,
    run_ensemble,
    variance_decomposition,
)
from ..twa import save_snapshots, wigner_observables
from .config import ConfigError, ExperimentConfig, grid_values
from .output import write_csv, write_json

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------- helpers


def _out(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def _write_table(cfg: ExperimentConfig, name: str, header, rows) -> Path:
    prov = cfg.provenance()
    keys = ("experiment", "config_hash", "master_seed", "code_version", "schema_version")
    return write_csv(_out(cfg, name), header, rows, comments=[f"{k}: {prov[k]}" for k in keys])


def _finish(cfg: ExperimentConfig, report: dict, files: list[Path]) -> dict:
    report = {"provenance": cfg.provenance(), **report, "files": sorted(p.name for p in files)}
    write_json(_out(cfg, "report.json"), report)
    return report


def _initial_state(cfg: ExperimentConfig):
    """MCWF start vector and density matrix from ``initial_state``."""
    space = cfg.model.space
    if cfg.initial_state in (None, "vacuum"):
        psi = space.vacuum()
    else:
        try:
            psi = space.basis_state([int(n) for n in cfg.initial_state])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid initial_state {cfg.initial_state!r}: {exc}") from exc
    return psi, np.outer(psi, psi.conj())


def _twa_initial(cfg: ExperimentConfig) -> str:
    initial = cfg.initial_state or "vacuum"
    if initial not in ("vacuum", "zero"):
        raise ConfigError(f"TWA initial_state must be 'vacuum' or 'zero', got {initial!r}")
    return initial


def _series_stationary(acc: EnsembleAccumulator, name: str, burn_in: float) -> bool:
    mean, err = acc.time_series(name)
    keep = acc.times >= burn_in
    if keep.sum() < 4:
        return True
    return is_stationary(acc.times[keep], mean[keep], err[keep], burn_in)


# --------------------------------------------------------------------------- error benchmark


def _oracle(cfg: ExperimentConfig, rho0) -> dict:
    """Exact disorder-averaged reference: a scalar (steady) or one value per sample time."""
    sec = cfg.section
    model, spec = cfg.model, cfg.disorder()
    op = operator_for(model, sec["observable"])
    opts = sec["oracle"]
    method = opts.get("method", "quadrature")
    transient = sec["estimator"] == "transient"

    def value(rho):
        return float(np.real(np.trace(op @ rho)))

    def one(det):
        if transient:
            rhos = evolve_master(model_liouvillian(model, det), rho0, cfg.schedule.times())
            return np.array([value(r) for r in rhos])
        return value(exact_state(model, det, method="nullspace"))

    if spec.std_dev == 0.0:
        return {"method": "exact", "value": one(None), "stderr": 0.0}
    if method == "quadrature":
        points, weights = gauss_hermite_nodes(spec, model.sites, int(opts.get("nodes_per_site", 8)))
        vals = np.array([one(p) for p in points])
        return {"method": "quadrature", "value": np.tensordot(weights, vals, axes=1), "stderr": 0.0,
                "nodes": int(len(points))}
    if method == "sampled":
        R = int(opts.get("configurations", 500))
        rng = np.random.default_rng(derive_seed(cfg.master_seed, 0x6F72))
        vals = np.array([one(sample_disorder(spec, model.sites, rng, config_id=i).detunings) for i in range(R)])
        return {"method": "sampled", "value": vals.mean(axis=0), "stderr": vals.std(axis=0, ddof=1) / math.sqrt(R),
                "configurations": R}
    raise ConfigError(f"unknown oracle method {method!r}")


def _block_errors(values: np.ndarray, R_block: int, exact) -> np.ndarray:
    """|estimate - exact| of disjoint blocks of ``R_block`` configurations.

    ``values`` is ``(R, T)`` (steady) or ``(R, T, K)`` (transient; the error is
    averaged over sample times).
    """
    M = values.shape[0] // R_block
    blocks = values[: M * R_block].reshape(M, R_block * values.shape[1], *values.shape[2:])
    err = np.abs(blocks.mean(axis=1) - exact)
    return err.reshape(M, -1).mean(axis=1)


def run_error_benchmark(cfg: ExperimentConfig) -> dict:
    """Measured and modelled sampling error across a grid of costs and trajectory counts.

    For every ``T`` a pool of ``pool_size`` trajectories (``pool_size / T``
    configurations) is simulated once. At cost ``C`` the pool is cut into
    disjoint blocks of ``C / T`` configurations; the MAE is the mean absolute
    deviation of the block estimates from the oracle. The prediction uses the
    variance budget of the ``T >= 2`` pool with the most configurations (or
    the total variance when only ``T = 1`` is run).
    """
    sec = cfg.section
    model = cfg.model
    if cfg.protocol != "mcwf":
        raise ConfigError("the error benchmark runs MCWF trajectories")
    dim = model.space.total_dim
    if dim > int(sec["max_oracle_dim"]):
        raise ConfigError(f"Hilbert-space dimension {dim} exceeds the oracle guard {sec['max_oracle_dim']}")
    costs = [int(c) for c in sec["costs"]]
    Ts = [int(t) for t in sec["trajectories"]]
    pool = int(sec["pool_size"])
    transient = sec["estimator"] == "transient"
    if sec["estimator"] not in ("steady", "transient"):
        raise ConfigError(f"estimator must be steady or transient, got {sec['estimator']!r}")
    alpha = math.sqrt(2 / math.pi) if sec["alpha"] is None else float(sec["alpha"])
    burn_in = cfg.schedule.burn_in
    psi0, rho0 = _initial_state(cfg)

    oracle = _oracle(cfg, rho0)
    times = cfg.schedule.times()
    keep = times >= burn_in
    exact = oracle["value"][keep] if transient else oracle["value"]
    logger.info("oracle (%s): %s", oracle["method"], np.round(np.atleast_1d(exact)[:5], 6))

    obs = sec["observable"]
    pools = {}
    for T in Ts:
        if pool % T:
            raise ConfigError(f"T={T} does not divide pool_size={pool}")
        plan = SamplingPlan(pool // T, T, derive_seed(cfg.master_seed, T))
        logger.info("pool T=%d: %d configurations x %d trajectories", T, plan.R, T)
        acc = run_ensemble(plan, cfg.disorder(), model, "mcwf", [obs], cfg.schedule,
                           workers=cfg.workers, chunk_size=cfg.chunk_size, psi0=psi0)
        pools[T] = acc.samples[obs][:, :, keep] if transient else acc.values(obs, burn_in=burn_in)

    # variance budget, per sample time when transient
    def budget_of(values):
        if values.ndim == 2:
            values = values[:, :, None]
        out = []
        for k in range(values.shape[2]):
            x = values[:, :, k]
            if x.shape[1] >= 2:
                out.append(variance_decomposition(EnsembleAccumulator.from_samples(x), alpha=alpha))
            else:
                out.append(ErrorBudget(float(x.var(ddof=1)), 0.0, alpha))
        return out

    multi = [T for T in Ts if T >= 2]
    ref_T = min(multi) if multi else min(Ts)
    budgets = budget_of(pools[ref_T])

    def predict(R, T):
        return float(np.mean([predicted_error(b, R, T) for b in budgets]))

    rows = []
    for C in costs:
        for T in Ts:
            if C % T:
                raise ConfigError(f"T={T} does not divide the cost C={C}")
            R = C // T
            errs = _block_errors(pools[T], R, exact)
            M = len(errs)
            if M == 0:
                raise ConfigError(f"pool of {pool} trajectories is smaller than the cost C={C}")
            mae = float(errs.mean())
            mae_err = float(errs.std(ddof=1) / math.sqrt(M)) if M > 1 else math.nan
            pred = predict(R, T)
            rows.append([C, T, R, M, mae, mae_err, pred, mae / pred if pred > 0 else math.nan])
    files = [_write_table(cfg, "error_benchmark.csv",
                          ["C", "T", "R", "repetitions", "mae", "mae_err", "predicted", "ratio"], rows)]
    if transient:
        files.append(_write_table(cfg, "oracle.csv", ["t", "exact"], zip(times, oracle["value"])))
    b0 = budgets[0] if not transient else None
    report = {
        "oracle": {k: (v if np.ndim(v) == 0 else list(np.ravel(v))) for k, v in oracle.items()},
        "budget": None if b0 is None else {"var_psi_bar": b0.var_psi_bar, "var_D": b0.var_D, "alpha": b0.alpha,
                                           "clamped": b0.clamped, "var_D_stderr": b0.var_D_stderr,
                                           "from_T": ref_T},
        "rows": [dict(zip(["C", "T", "R", "repetitions", "mae", "mae_err", "predicted", "ratio"], r)) for r in rows],
    }
    return _finish(cfg, report, files)


# --------------------------------------------------------------------------- spectrum


def _peaks(values: np.ndarray, factor: float, prominence: float) -> np.ndarray:
    """Local maxima above ``factor`` times the median with prominence ``prominence`` times the median."""
    baseline = float(np.median(values))
    idx, _ = find_peaks(np.r_[-np.inf, values, -np.inf], height=factor * baseline, prominence=prominence * baseline)
    return idx - 1


def run_spectrum(cfg: ExperimentConfig) -> dict:
    """Steady total occupation versus pump detuning with resonance annotations.

    Every grid point runs ``configurations`` disorder draws with one MCWF
    trajectory each. Grid point ``g`` uses the same seed for every width, so
    spectra at different widths share their random numbers.
    """
    sec = cfg.section
    model = cfg.model
    lat = model.lattice
    if model.local_dim != 2 or lat.geometry != "chain" or lat.boundary != "periodic":
        raise ConfigError("the spectrum experiment needs a hard-core (local_dim 2) periodic chain")
    if cfg.protocol != "mcwf":
        raise ConfigError("the spectrum experiment runs MCWF trajectories")
    grid = grid_values(sec["delta0_grid"])
    widths = [float(w) for w in sec["widths"]]
    R = int(sec["configurations"])
    obs = sec["observable"]
    psi0, _ = _initial_state(cfg)
    catalog = resonance_catalog(lat.extent, model.J, int(sec["max_particles"]), model.gamma)

    spectra = {}
    rows = []
    for W in widths:
        vals = np.empty(len(grid))
        for g, d0 in enumerate(grid):
            m = model.replace(delta0=d0)
            plan = SamplingPlan(R, 1, derive_seed(cfg.master_seed, g))
            acc = run_ensemble(plan, DisorderSpec(d0, W), m, "mcwf", [obs], cfg.schedule,
                               workers=cfg.workers, chunk_size=cfg.chunk_size, psi0=psi0)
            x = acc.values(obs, burn_in=cfg.schedule.burn_in).ravel()
            vals[g] = x.mean()
            rows.append([W, d0, x.mean(), x.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else 0.0])
        spectra[W] = vals
        logger.info("spectrum W=%g done (max %.4g)", W, vals.max())

    positions = np.array([e.resonant_detuning for e in catalog])
    peak_rows, peak_report = [], {}
    for W, vals in spectra.items():
        found = []
        for g in _peaks(vals, float(sec["peak_factor"]), float(sec["min_prominence"])):
            j = int(np.argmin(np.abs(positions - grid[g])))
            e = catalog[j]
            entry = {"delta0": grid[g], "value": float(vals[g]), "nearest": float(e.resonant_detuning),
                     "distance": float(abs(grid[g] - e.resonant_detuning)), "N_p": e.particle_count,
                     "K": float(e.total_momentum), "drive_allowed": bool(e.drive_allowed)}
            found.append(entry)
            peak_rows.append([W, *entry.values()])
        peak_report[repr(W)] = found

    def at(vals, x):
        return float(vals[int(np.argmin(np.abs(np.asarray(grid) - x)))])

    def peaked(W, x):
        return any(abs(p["delta0"] - x) <= model.gamma for p in peak_report[repr(W)])

    entry_rows = []
    for e in catalog:
        row = [" ".join(repr(k) for k in e.momenta), e.particle_count, e.total_momentum,
               e.resonant_detuning, e.drive_allowed]
        for W in widths:
            row += [at(spectra[W], e.resonant_detuning), peaked(W, e.resonant_detuning)]
        entry_rows.append(row)
    entry_header = ["momenta", "N_p", "K", "delta0_star", "drive_allowed"]
    for W in widths:
        entry_header += [f"value_W{W!r}", f"peak_W{W!r}"]

    files = [
        _write_table(cfg, "spectrum.csv", ["W", "delta0", "N", "N_err"], rows),
        _write_table(cfg, "peaks.csv", ["W", "delta0", "value", "nearest", "distance", "N_p", "K", "drive_allowed"],
                     peak_rows),
        _write_table(cfg, "catalog.csv", entry_header, entry_rows),
    ]
    return _finish(cfg, {"peaks": peak_report, "widths": widths}, files)


# --------------------------------------------------------------------------- transition scan


def _twa_point(cfg, model, W, R, seed, *, snapshots=False):
    plan = SamplingPlan(R, 1, seed)
    return run_ensemble(plan, DisorderSpec(model.delta0, W), model, "twa", ["density"], cfg.schedule,
                        workers=cfg.workers, chunk_size=cfg.chunk_size, dt=cfg.twa_dt,
                        initial=_twa_initial(cfg), stats_from=cfg.schedule.burn_in, snapshots=snapshots)


def _scan(cfg, F_grid, W, R):
    """Mean density, its error, f0 and the per-trajectory densities along an F grid."""
    out = []
    for g, F in enumerate(F_grid):
        acc = _twa_point(cfg, cfg.model.replace(F=F), W, R, derive_seed(cfg.master_seed, g), snapshots=True)
        per_traj = acc.values("density", burn_in=cfg.schedule.burn_in).ravel()
        coh = wigner_observables(acc.wigner)["coherence"]
        try:
            f0 = k0_fraction(coh)
        except ValueError:
            f0 = math.nan
        stationary = _series_stationary(acc, "density", cfg.schedule.burn_in)
        if not stationary:
            logger.warning("density not stationary after burn-in at F=%g, W=%g; consider a longer run", F, W)
        out.append({"F": F, "n": float(per_traj.mean()),
                    "n_err": float(per_traj.std(ddof=1) / math.sqrt(per_traj.size)) if per_traj.size > 1 else 0.0,
                    "f0": f0, "stationary": stationary, "samples": per_traj, "snapshot": acc.snapshots[0]})
    return out


def _require_twa_2d(cfg):
    if cfg.protocol != "twa":
        raise ConfigError(f"{cfg.experiment} runs TWA trajectories")
    if cfg.model.lattice.geometry != "square":
        raise ConfigError(f"{cfg.experiment} needs a square lattice")


def run_transition_scan(cfg: ExperimentConfig) -> dict:
    """Density, k=0 fraction and histograms along an F scan for each disorder width.

    The slope ``S = max dn/dF`` and its location ``F*`` are extracted per
    width; with at least three positive widths ``1/S`` is fitted by a power
    law in ``W``.
    """
    _require_twa_2d(cfg)
    sec = cfg.section
    F_grid = grid_values(sec["F_grid"])
    widths = [float(w) for w in sec["widths"]]
    R = int(sec["configurations"])
    bins = int(sec["bins"])

    scan_rows, hist_rows, slope_rows, slopes, snap_files = [], [], [], {}, []
    for W in widths:
        points = _scan(cfg, F_grid, W, R)
        for p in points:
            scan_rows.append([W, p["F"], p["n"], p["n_err"], p["f0"], p["stationary"]])
            h = density_histogram(p["samples"], bins=bins)
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                hist_rows.append([W, p["F"], lo, hi, int(c)])
        res = transition_slope(F_grid, [p["n"] for p in points])
        slopes[W] = res
        slope_rows.append([W, res.slope, res.F_star, res.pronounced])
        near = int(np.argmin(np.abs(np.asarray(F_grid) - res.F_star)))
        snap_files += save_snapshots(_out(cfg, f"snapshot_W{W!r}"), points[near]["snapshot"], cfg.model.lattice,
                                     {"W": W, "F": F_grid[near], "config_id": 0, "time": cfg.schedule.t_final,
                                      "provenance": cfg.provenance()})
        logger.info("W=%g: S=%.4g at F*=%.4g", W, res.slope, res.F_star)

    files = [
        _write_table(cfg, "scan.csv", ["W", "F", "n", "n_err", "f0", "stationary"], scan_rows),
        _write_table(cfg, "histograms.csv", ["W", "F", "bin_lo", "bin_hi", "count"], hist_rows),
        _write_table(cfg, "slopes.csv", ["W", "S", "F_star", "pronounced"], slope_rows),
        *snap_files,
    ]
    report = {"slopes": {repr(W): {"S": r.slope, "F_star": r.F_star, "pronounced": r.pronounced}
                         for W, r in slopes.items()}}
    positive = [W for W in widths if W > 0 and slopes[W].slope > 0]
    if len(positive) >= 3:
        fit = fit_power_law(positive, [1.0 / slopes[W].slope for W in positive])
        write_json(_out(cfg, "inverse_slope_fit.json"), {"provenance": cfg.provenance(), "fit": fit.__dict__,
                                                         "formatted": fit.format()})
        files.append(_out(cfg, "inverse_slope_fit.json"))
        report["inverse_slope_fit"] = {"formatted": fit.format(), "exponent": fit.exponent,
                                       "exponent_err": fit.exponent_err}
    return _finish(cfg, report, files)


# --------------------------------------------------------------------------- correlations


def run_correlations(cfg: ExperimentConfig) -> dict:
    """Connected one-body correlator ``g1(r)`` near the transition and its decay.

    ``F`` is taken from the config or located as ``F*`` of a clean scan. For
    each width the pair-averaged modulus ``|g1(r)|`` is fitted by an
    exponential and a power law over the fit range; the decay lengths are
    then fitted by a power law in ``W``.
    """
    _require_twa_2d(cfg)
    sec = cfg.section
    lat = cfg.model.lattice
    files = []
    report = {}
    F = sec["F"]
    if F is None:
        F_grid = grid_values(sec["F_grid"])
        points = _scan(cfg, F_grid, 0.0, int(sec["scan_configurations"]))
        res = transition_slope(F_grid, [p["n"] for p in points])
        F = res.F_star
        files.append(_write_table(cfg, "clean_scan.csv", ["F", "n", "n_err", "f0"],
                                  [[p["F"], p["n"], p["n_err"], p["f0"]] for p in points]))
        report["clean_scan"] = {"S": res.slope, "F_star": res.F_star, "pronounced": res.pronounced}
        logger.info("clean scan: F*=%.4g", F)
    F = float(F)
    report["F"] = F
    r_lo, r_hi = sec["fit_range"]
    r_lo = float(r_lo)
    r_hi = lat.extent / 2 if r_hi is None else float(r_hi)

    g1_rows, fit_rows, lam = [], [], {}
    model = cfg.model.replace(F=F)
    widths = [float(w) for w in sec["widths"]]
    report["fits"] = {}
    for i, W in enumerate(widths):
        acc = _twa_point(cfg, model, W, int(sec["configurations"]), derive_seed(cfg.master_seed, 0x6731, i))
        wo = wigner_observables(acc.wigner)
        prof = g1_connected(wo["coherence"], wo["field"], lat)
        for r, re, mod, n in zip(prof.r, prof.real, prof.modulus, prof.pairs):
            g1_rows.append([W, r, re, mod, int(n)])
        sub = prof.restrict(r_lo, r_hi)
        entry = {"density": mean_density(acc.wigner)}
        try:
            ex = fit_exponential(sub.r, sub.modulus)
            pl = fit_power_law(sub.r, sub.modulus)
        except ValueError as exc:
            logger.warning("W=%g: decay fits failed: %s", W, exc)
            report["fits"][repr(W)] = {**entry, "error": str(exc)}
            continue
        for fit in (ex, pl):
            fit_rows.append([W, fit.model, fit.amplitude, fit.amplitude_err, fit.exponent, fit.exponent_err,
                             fit.length if fit.length is not None else math.nan,
                             fit.length_err if fit.length_err is not None else math.nan, fit.residual_norm,
                             fit.n_points])
        lam[W] = (ex.length, ex.length_err)
        entry.update(exponential_residual=ex.residual_norm, power_law_residual=pl.residual_norm,
                     length=ex.length, length_err=ex.length_err, power_law_exponent=pl.exponent,
                     exponential_wins=bool(ex.residual_norm < pl.residual_norm))
        report["fits"][repr(W)] = entry
        logger.info("W=%g: lambda=%.3g, residuals exp %.3g vs power %.3g", W, ex.length,
                    ex.residual_norm, pl.residual_norm)

    files += [
        _write_table(cfg, "g1.csv", ["W", "r", "g1_real", "g1_modulus", "pairs"], g1_rows),
        _write_table(cfg, "g1_fits.csv", ["W", "model", "amplitude", "amplitude_err", "exponent", "exponent_err",
                                          "length", "length_err", "residual_norm", "n_points"], fit_rows),
        _write_table(cfg, "decay_lengths.csv", ["W", "lambda", "lambda_err"],
                     [[W, l, e] for W, (l, e) in lam.items()]),
    ]
    usable = [W for W, (l, _) in lam.items() if W > 0 and 0 < l < math.inf]
    if len(usable) >= 3:
        fit = fit_power_law(usable, [lam[W][0] for W in usable])
        report["lambda_fit"] = {"formatted": fit.format(), "exponent": fit.exponent, "exponent_err": fit.exponent_err}
    return _finish(cfg, report, files)


EXPERIMENT_RUNNERS = {
    "error-benchmark": run_error_benchmark,
    "spectrum": run_spectrum,
    "transition-scan": run_transition_scan,
    "correlations": run_correlations,
}


def run_experiment(cfg: ExperimentConfig) -> dict:
    return EXPERIMENT_RUNNERS[cfg.experiment](cfg)
