"""Dense linear-algebra kernels.

Everything here works in float64. Factorizations and solves are thin,
checked wrappers over LAPACK (via scipy); power iteration, the spectral
norm oracle and the matrix exponential are implemented directly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas, lapack

from .errors import NotPositiveDefinite, SingularMatrix, SingularTriangular

SYMMETRY_RTOL = 1e-10
JITTER = 1e-10


def as_matrix(a, name="matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array, rejecting NaN/Inf."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} has non-finite entries")
    return m


def cholesky(sigma) -> np.ndarray:
    """Lower-triangular L with L @ L.T == sigma.

    One retry with ``1e-10 * trace/n`` added to the diagonal before giving up.
    """
    s = as_matrix(sigma, "sigma")
    n, m = s.shape
    if n != m:
        raise ValueError(f"cholesky needs a square matrix, got {s.shape}")
    scale = np.linalg.norm(s)
    if np.linalg.norm(s - s.T) > SYMMETRY_RTOL * max(scale, 1e-300):
        raise ValueError("cholesky input is not symmetric")
    try:
        return sla.cholesky(s, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER * max(np.trace(s) / n, 0.0)
    try:
        if jitter <= 0.0:
            raise np.linalg.LinAlgError
        return sla.cholesky(s + jitter * np.eye(n), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("matrix is not positive definite (after jitter retry)") from None


def solve_triangular(l, b, *, lower=True, trans=False) -> np.ndarray:
    """Solve L X = B (or L.T X = B with ``trans``) for triangular L."""
    l = as_matrix(l, "l")
    b = np.asarray(b, dtype=np.float64)
    if l.shape[0] != l.shape[1]:
        raise ValueError(f"triangular factor must be square, got {l.shape}")
    diag = np.abs(np.diag(l))
    if diag.size and diag.min() <= 1e-14 * np.linalg.norm(l):
        raise SingularTriangular("tiny pivot on the triangular diagonal")
    return sla.solve_triangular(l, b, lower=lower, trans=1 if trans else 0, check_finite=False)


def orthonormalize_rows(a) -> np.ndarray:
    """L^-1 A with L L^T = A A^T, for a wide or square ``a`` (rows <= cols).

    Same result as the composed cholesky/solve_triangular path but calls BLAS
    directly: syrk for the Gram matrix, potrf on its lower triangle, and a
    right-sided trsm on A^T so no layout copies are made.
    """
    a = as_matrix(a, "a")
    rows, cols = a.shape
    if rows > cols:
        raise ValueError("orthonormalize_rows needs rows <= cols")
    g = blas.dsyrk(1.0, a, lower=1)
    l, info = lapack.dpotrf(g, lower=1, clean=1)
    if info > 0:
        jitter = JITTER * max(np.trace(g) / rows, 0.0)
        l, info = lapack.dpotrf(g + jitter * np.eye(rows), lower=1, clean=1)
        if info > 0 or jitter <= 0.0:
            raise NotPositiveDefinite("Gram matrix is not positive definite (after jitter retry)")
    diag = np.abs(np.diag(l))
    if diag.min() <= 1e-14 * np.linalg.norm(l):
        raise SingularTriangular("tiny pivot on the triangular diagonal")
    # X L^T = A^T  =>  X = (L^-1 A)^T
    return blas.dtrsm(1.0, l, a.T, side=1, lower=1, trans_a=1).T


def lu_factor(a):
    """Partial-pivot LU with the singularity check used by ``solve_general``."""
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"solve_general needs a square matrix, got {a.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, check_finite=False)
    if a.size and np.abs(np.diag(lu)).min() < 1e-12 * np.linalg.norm(a):
        raise SingularMatrix("pivot below 1e-12 * ||A||")
    return lu, piv


def solve_general(a, b, *, trans=False) -> np.ndarray:
    """X with A X = B (or A.T X = B)."""
    factors = lu_factor(a)
    return sla.lu_solve(factors, np.asarray(b, dtype=np.float64), trans=1 if trans else 0,
                        check_finite=False)


def _value(x):
    return np.asarray(getattr(x, "value", x))


def mat_exp(v, order=18, threshold=0.5):
    """exp(V) by scaling and squaring with a truncated Taylor series.

    Works on plain arrays and on autodiff variables alike (only ``@``, ``+`` and
    scalar ``*`` are used), so the gradient flows through the same graph.
    """
    val = _value(v)
    if val.ndim != 2 or val.shape[0] != val.shape[1]:
        raise ValueError(f"mat_exp needs a square matrix, got {val.shape}")
    n = val.shape[0]
    norm = float(np.linalg.norm(val))
    s = max(0, math.ceil(math.log2(norm / threshold))) if norm > threshold else 0
    x = v * (1.0 / 2 ** s) if s else v
    eye = np.eye(n)
    p = eye + x * (1.0 / order)
    for k in range(order - 1, 0, -1):
        p = eye + (x @ p) * (1.0 / k)
    for _ in range(s):
        p = p @ p
    return p


@dataclass
class SpectralEstimate:
    """Warm-startable power-iteration state for one linear operator."""

    sigma: float
    u: np.ndarray
    v: np.ndarray
    iterations_run: int = 0
    converged: bool = False

    @classmethod
    def fresh(cls, in_shape, out_shape, rng=None) -> "SpectralEstimate":
        rng = np.random.default_rng(0) if rng is None else rng
        v = rng.standard_normal(in_shape)
        u = rng.standard_normal(out_shape)
        return cls(0.0, u / np.linalg.norm(u), v / np.linalg.norm(v))


def power_iteration(apply: Callable, apply_transpose: Callable, state: SpectralEstimate,
                    max_iters=100, tol=1e-6) -> SpectralEstimate:
    """Estimate the largest singular value of a linear operator in place.

    ``sigma`` is the Rayleigh estimate u.(A v) = ||A v|| with unit v, so it is
    always a lower bound on the spectral norm.
    """
    v = state.v
    prev = None
    state.converged = False
    state.iterations_run = 0
    for it in range(max_iters):
        av = np.asarray(apply(v), dtype=np.float64)
        s = float(np.linalg.norm(av))
        state.iterations_run = it + 1
        if s == 0.0:
            state.sigma = 0.0
            state.converged = True
            break
        u = av / s
        atu = np.asarray(apply_transpose(u), dtype=np.float64)
        t = float(np.linalg.norm(atu))
        state.sigma, state.u = s, u
        if t > 0.0:
            v = atu / t
            state.v = v
        if prev is not None and abs(s - prev) <= tol * s:
            state.converged = True
            break
        prev = s
    return state


def spectral_norm_oracle(a, restarts=10, iters=10_000, seed=0) -> float:
    """Reference spectral norm: power iteration on A^T A, best of several restarts.

    Independent of ``power_iteration``; used by tests as ground truth.
    """
    a = as_matrix(a, "a")
    if not a.any():
        return 0.0
    gram = a.T @ a
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        x = rng.standard_normal(gram.shape[0])
        x /= np.linalg.norm(x)
        lam = 0.0
        for _ in range(iters):
            y = gram @ x
            new = float(x @ y)
            ny = np.linalg.norm(y)
            if ny == 0.0:
                break
            x = y / ny
            if abs(new - lam) <= 1e-16 * new:
                lam = new
                break
            lam = new
        best = max(best, lam)
    return math.sqrt(best)
