"""Dense complex linear algebra for small Hermitian positive definite matrices.

All matrices are numpy arrays of complex128 (row-major (real, imag) float64
pairs). Dimensions are small (d <= 16 in every consumer), so the routines
here are plain unblocked O(d^3) loops over vectorized rows; no external
factorization library is used.

Sample matrices follow the rows-are-samples convention: a window is an
(n, d) array whose row r is the sample z_r, and ``gram`` accumulates
sum_r z_r z_r^H.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NotPositiveDefinite

HERMITIAN_RTOL = 1e-12


def require_finite(a: np.ndarray, name: str = "array") -> None:
    if not np.isfinite(a).all():
        from .errors import NonFiniteValue

        raise NonFiniteValue(f"{name} contains NaN or Inf")


def symmetrize(h: np.ndarray) -> np.ndarray:
    """(H + H^H) / 2, absorbing accumulated round-off before factorizing."""
    return 0.5 * (h + np.conj(np.swapaxes(h, -1, -2)))


def is_hermitian(h: np.ndarray, rtol: float = HERMITIAN_RTOL) -> bool:
    scale = np.abs(h).max()
    if scale == 0.0:
        return True
    return np.abs(h - np.conj(h.T)).max() <= rtol * max(scale, 1.0)


def cholesky(h: np.ndarray) -> np.ndarray:
    """Lower-triangular L with real positive diagonal and L L^H = h.

    The input is symmetrized first. Raises NotPositiveDefinite on a
    non-positive pivot, which certifies the input was singular or indefinite.
    """
    a = symmetrize(np.asarray(h, dtype=np.complex128))
    d = a.shape[0]
    if a.shape != (d, d):
        raise ValueError(f"expected square matrix, got {a.shape}")
    lower = np.zeros((d, d), dtype=np.complex128)
    for j in range(d):
        pivot = a[j, j].real - np.sum((lower[j, :j] * lower[j, :j].conj()).real)
        if not pivot > 0.0 or not math.isfinite(pivot):
            raise NotPositiveDefinite(f"non-positive pivot {pivot!r} at column {j}")
        ljj = math.sqrt(pivot)
        lower[j, j] = ljj
        if j + 1 < d:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j].conj()) / ljj
    return lower


def logdet_from_factor(lower: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diagonal(lower).real)))


def logdet(h: np.ndarray) -> float:
    """log|h| for Hermitian positive definite h, via the Cholesky diagonal."""
    return logdet_from_factor(cholesky(h))


def solve_triangular_lower(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L y = b by forward substitution (b is (d,) or (d, k))."""
    d = lower.shape[0]
    y = np.array(b, dtype=np.complex128, copy=True)
    for i in range(d):
        if i:
            y[i] -= lower[i, :i] @ y[:i]
        y[i] /= lower[i, i]
    return y


def solve_triangular_upper_conj(lower: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Solve L^H x = y by back substitution."""
    d = lower.shape[0]
    x = np.array(y, dtype=np.complex128, copy=True)
    for i in range(d - 1, -1, -1):
        if i + 1 < d:
            x[i] -= lower[i + 1 :, i].conj() @ x[i + 1 :]
        x[i] /= lower[i, i].conj()
    return x


def solve_factored(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    return solve_triangular_upper_conj(lower, solve_triangular_lower(lower, b))


def solve_hpd(h: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve h x = b for Hermitian positive definite h."""
    b = np.asarray(b, dtype=np.complex128)
    if b.shape[0] != h.shape[0]:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix is {h.shape[0]}x{h.shape[1]}")
    return solve_factored(cholesky(h), b)


def inverse_hpd(h: np.ndarray) -> np.ndarray:
    inv = solve_hpd(h, np.eye(h.shape[0], dtype=np.complex128))
    return symmetrize(inv)


def gram(x: np.ndarray) -> np.ndarray:
    """sum_r x_r x_r^H over the sample rows of x (supports stacked (..., n, d)).

    Hermitian PSD by construction; the (i, j) entry is sum_r x[r, i] conj(x[r, j]).
    """
    x = np.asarray(x, dtype=np.complex128)
    return np.swapaxes(x, -1, -2) @ np.conj(x)


def quad_form(z: np.ndarray, s: np.ndarray, imag_rtol: float = 1e-10) -> float:
    """z^H s z for Hermitian s, asserted real up to a small imaginary residue."""
    val = complex(np.conj(z) @ (s @ z))
    scale = max(abs(val), 1.0)
    if abs(val.imag) > imag_rtol * scale:
        raise ValueError(f"quadratic form has imaginary residue {val.imag!r}")
    return val.real
