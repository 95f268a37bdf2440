"""Dense f64 linear algebra primitives: SVD, symmetric eigendecomposition,
norms, log-domain pseudo-determinants, and power iteration for implicit
linear operators.

Everything is pure and operates on immutable float64 arrays, so all
functions are safe to call concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractViolation, NumericFailure

SVD_RECONSTRUCTION_TOL = 1e-10
EIG_TRACE_TOL = 1e-9
GRAM_EIG_FLOOR = -1e-12
UNDERFLOW_FLOOR = 1e-300


def check_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite float64 2-D array (row-major)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ContractViolation(f"{name} must be 2-D with positive shape, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return a


def check_vector(v, name: str = "vector") -> np.ndarray:
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return v


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD with singular values sorted descending."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of a symmetric matrix, sorted descending."""

    eigenvalues: np.ndarray


def svd(a) -> SvdResult:
    """Thin SVD of a dense matrix.

    Raises NumericFailure (carrying the residual) if LAPACK does not converge
    or the factors fail to reconstruct within 1e-10 relative Frobenius error.
    """
    a = check_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"SVD did not converge: {exc}") from exc
    norm_a = np.linalg.norm(a)
    residual = np.linalg.norm(u @ np.diag(s) @ vt - a)
    rel = residual / norm_a if norm_a > 0 else residual
    if rel > SVD_RECONSTRUCTION_TOL:
        raise NumericFailure("SVD reconstruction exceeded tolerance", residual=rel)
    return SvdResult(u=u, sigma=s, vt=vt)


def sym_eig(a, gram_psd: bool = False) -> Spectrum:
    """Eigenvalues of a symmetric matrix, descending.

    With gram_psd=True the input is analytically positive semidefinite
    (a Gram matrix J.J^T): tiny negative eigenvalues down to -1e-12 relative
    are clamped to zero, anything below that is a contract violation.
    """
    a = check_matrix(a)
    n, m = a.shape
    if n != m:
        raise ContractViolation(f"sym_eig needs a square matrix, got {a.shape}")
    scale = 1.0 + np.max(np.abs(a))
    asym = np.max(np.abs(a - a.T))
    if asym > 1e-10 * scale:
        raise ContractViolation(f"matrix asymmetry {asym:.3e} exceeds tolerance")
    lam = np.linalg.eigvalsh(a)[::-1].copy()
    tr = np.trace(a)
    err = abs(float(np.sum(lam)) - tr)
    if err > EIG_TRACE_TOL * (1.0 + abs(tr)):
        raise NumericFailure("eigenvalue sum does not match trace", residual=err)
    if gram_psd:
        lam_max = np.max(np.abs(lam)) if lam.size else 0.0
        if np.min(lam) < GRAM_EIG_FLOOR * lam_max:
            raise ContractViolation(
                f"Gram matrix has eigenvalue {np.min(lam):.3e} below the PSD floor")
        lam = np.maximum(lam, 0.0)
    return Spectrum(eigenvalues=lam)


def _probe_linearity(matvec: Callable, in_dim: int, rng: np.random.Generator) -> None:
    x = rng.standard_normal(in_dim)
    y = rng.standard_normal(in_dim)
    a, b = 0.7, -1.3
    lhs = matvec(a * x + b * y)
    rhs = a * matvec(x) + b * matvec(y)
    scale = np.linalg.norm(rhs) + 1.0
    if np.linalg.norm(lhs - rhs) > 1e-8 * scale:
        raise ContractViolation("operator failed the linearity probe")


def spectral_norm_operator(matvec: Callable, rmatvec: Callable, in_dim: int,
                           out_dim: int, tol: float = 1e-9, max_iter: int = 500,
                           seed: int = 0) -> float:
    """Largest singular value of an implicit linear operator.

    Power iteration on the normal operator A^T A; matvec/rmatvec map 1-D
    arrays of length in_dim/out_dim. Linearity and adjoint consistency are
    probed on random vectors before iterating. If the iteration cap is hit
    before the relative tolerance, a warning reports the last residual.
    """
    if in_dim < 1 or out_dim < 1:
        raise ContractViolation("operator dimensions must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, in_dim, out_dim]))
    _probe_linearity(matvec, in_dim, rng)
    xp = rng.standard_normal(in_dim)
    up = rng.standard_normal(out_dim)
    ax = matvec(xp)
    aty = rmatvec(up)
    pair_err = abs(float(ax @ up) - float(xp @ aty))
    if pair_err > 1e-8 * (1.0 + abs(float(ax @ up))):
        raise ContractViolation("rmatvec is not the adjoint of matvec")

    v = rng.standard_normal(in_dim)
    vnorm = np.linalg.norm(v)
    v /= vnorm
    sigma = 0.0
    residual = np.inf
    for _ in range(max_iter):
        av = matvec(v)
        s_new = float(np.linalg.norm(av))
        if s_new == 0.0:
            return 0.0
        residual = abs(s_new - sigma)
        sigma = s_new
        if residual <= tol * sigma:
            return sigma
        w = rmatvec(av)
        wnorm = np.linalg.norm(w)
        if wnorm == 0.0:
            return sigma
        v = w / wnorm
    warnings.warn(
        f"power iteration hit the {max_iter}-iteration cap, residual={residual:.3e}",
        RuntimeWarning, stacklevel=2)
    return sigma


def spectral_norm_dense(a) -> float:
    """Largest singular value of an explicit matrix."""
    return float(svd(a).sigma[0]) if np.any(a) else 0.0


def log_pseudo_det_gram(j) -> float:
    """Sum of log singular values over the min(N, M) values of j.

    Equals 0.5*log det(J J^T) for a wide N x M Jacobian. Returns -inf when
    any singular value underflows below 1e-300 (callers count the sentinel).
    """
    j = check_matrix(j, "jacobian")
    s = svd(j).sigma
    k = min(j.shape)
    s = s[:k]
    if np.any(s < UNDERFLOW_FLOOR):
        return float("-inf")
    return float(np.sum(np.log(s)))


def vector_p_norm(v, p) -> float:
    """Standard p-norm for p >= 1 or p = inf."""
    v = check_vector(v)
    if p != np.inf and p < 1:
        raise ContractViolation(f"p-norm requires p >= 1 or p = inf, got {p}")
    if p == np.inf:
        return float(np.max(np.abs(v))) if v.size else 0.0
    return float(np.sum(np.abs(v) ** p) ** (1.0 / p))


def log_mean_exp(logs) -> float:
    """log((1/n) sum exp(l_i)), tolerating -inf entries (zero contributions)."""
    logs = np.asarray(logs, dtype=np.float64)
    if logs.size == 0:
        raise ContractViolation("log_mean_exp of an empty set")
    m = np.max(logs)
    if m == float("-inf"):
        return float("-inf")
    return float(m + np.log(np.mean(np.exp(logs - m))))
