"""Input validation helpers shared across the package."""

from __future__ import annotations

import numbers

import numpy as np
import scipy.sparse as sp

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
POSITIVITY_TOL = 1e-8


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be finite and >= 0, got {value}")
    return value


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be finite and > 0, got {value}")
    return value


def check_pure_state(psi, dim: int | None = None) -> np.ndarray:
    """Return ``psi`` as a 1-D complex array, checking its length and norm."""
    psi = np.asarray(psi, dtype=complex)
    if psi.ndim != 1:
        raise ValueError(f"pure state must be a 1-D vector, got shape {psi.shape}")
    if dim is not None and psi.shape[0] != dim:
        raise ValueError(f"state has dimension {psi.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(psi)):
        raise ValueError("state contains non-finite amplitudes")
    if np.vdot(psi, psi).real == 0.0:
        raise ValueError("state has zero norm")
    return psi


def check_density_matrix(
    rho,
    dim: int | None = None,
    *,
    hermitian_tol: float = HERMITIAN_TOL,
    trace_tol: float = TRACE_TOL,
    positivity_tol: float | None = POSITIVITY_TOL,
) -> np.ndarray:
    """Validate a density operator: square, Hermitian, unit trace, positive.

    Positivity is only checked when ``positivity_tol`` is not None; it needs a
    full eigendecomposition.
    """
    rho = np.asarray(rho.toarray() if sp.issparse(rho) else rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density operator must be square, got shape {rho.shape}")
    if dim is not None and rho.shape[0] != dim:
        raise ValueError(f"density operator has dimension {rho.shape[0]}, expected {dim}")
    herm_err = np.max(np.abs(rho - rho.conj().T)) if rho.size else 0.0
    if herm_err > hermitian_tol:
        raise ValueError(f"density operator not Hermitian (max deviation {herm_err:.3e})")
    trace = np.trace(rho)
    if abs(trace - 1.0) > trace_tol:
        raise ValueError(f"density operator trace is {trace:.12g}, expected 1")
    if positivity_tol is not None:
        lowest = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
        if lowest < -positivity_tol:
            raise ValueError(f"density operator has negative eigenvalue {lowest:.3e}")
    return rho


def check_operator(op, dim: int | None = None):
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ValueError(f"operator must be square, got shape {op.shape}")
    if dim is not None and op.shape[0] != dim:
        raise ValueError(f"operator has dimension {op.shape[0]}, expected {dim}")
    return op


def check_sorted_grid(values, name: str, *, strict: bool = True) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D sequence")
    steps = np.diff(values)
    if strict and np.any(steps <= 0):
        raise ValueError(f"{name} must be strictly increasing")
    if not strict and np.any(steps < 0):
        raise ValueError(f"{name} must be sorted")
    return values
