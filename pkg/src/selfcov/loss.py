"""Gaussian negative log-likelihood loss and covariance-quality metrics.

The training loss for a sample z and covariance C is

    z^H C^{-1} z + log|C|

evaluated here in both parameterizations: directly on C, or on the
precision S = C^{-1} (then z^H S z - log|S|). These are the evaluation
versions; training differentiates the equivalent graph built from the
autodiff primitives. Quadratic forms are real by construction and asserted
real to a 1e-10 imaginary residue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import NotPositiveDefinite


@dataclass(frozen=True)
class LossValue:
    value: float
    quadratic: float
    logdet_part: float


def nll_inverse_param(z: np.ndarray, s: np.ndarray) -> LossValue:
    """Loss for a precision estimate S: z^H S z - log|S|."""
    quadratic = linalg.quad_form(z, linalg.symmetrize(s))
    logdet_part = -linalg.logdet(s)
    return LossValue(quadratic + logdet_part, quadratic, logdet_part)


def nll_covariance_param(z: np.ndarray, c: np.ndarray) -> LossValue:
    """Loss for a covariance estimate C: z^H C^{-1} z + log|C|."""
    lower = linalg.cholesky(c)
    u = linalg.solve_factored(lower, np.asarray(z, dtype=np.complex128))
    quadratic = float(np.real(np.conj(z) @ u))
    logdet_part = linalg.logdet_from_factor(lower)
    return LossValue(quadratic + logdet_part, quadratic, logdet_part)


def mse_frobenius(c_hat: np.ndarray, c_true: np.ndarray) -> float:
    """Squared Frobenius deviation normalized per entry (divided by d^2)."""
    if c_hat.shape != c_true.shape:
        raise ValueError(f"shape mismatch: {c_hat.shape} vs {c_true.shape}")
    d = c_hat.shape[0]
    delta = c_hat - c_true
    return float(np.sum(np.abs(delta) ** 2)) / float(d * d)


def avg_nll(pairs) -> float:
    """Mean precision-parameterized loss over (z, S) pairs."""
    total = 0.0
    count = 0
    for i, (z, s) in enumerate(pairs):
        try:
            total += nll_inverse_param(z, s).value
        except NotPositiveDefinite as exc:
            raise NotPositiveDefinite(f"pair {i}: {exc}") from None
        count += 1
    if count == 0:
        raise ValueError("avg_nll needs at least one pair")
    return total / count
