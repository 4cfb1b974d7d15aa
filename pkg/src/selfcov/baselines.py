"""Classical per-window covariance estimators and shrinkage tuning.

The Toeplitz estimator here is a stand-in for the structured baseline it
emulates: plain alternating projections between the Hermitian Toeplitz
subspace (diagonal averaging) and the PSD cone (eigenvalue clipping),
started from the window's sample covariance. It is not the specific
algorithm published elsewhere under that role; comparisons in this repo
are against this documented procedure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg

PSD_FLOOR = 1e-8


@dataclass(frozen=True)
class ShrinkageGrid:
    alphas: tuple[float, ...]

    def __post_init__(self):
        if not self.alphas:
            raise ValueError("grid must be nonempty")
        if any(a < 0.0 or a > 1.0 for a in self.alphas):
            raise ValueError("grid values must lie in [0, 1]")
        if list(self.alphas) != sorted(self.alphas):
            raise ValueError("grid must be sorted ascending")

    @classmethod
    def default(cls) -> "ShrinkageGrid":
        return cls(tuple(round(0.05 * i, 2) for i in range(21)))


def scm(window: np.ndarray) -> np.ndarray:
    """Local sample covariance: mean of z z^H over the window rows."""
    window = np.asarray(window, dtype=np.complex128)
    return linalg.gram(window) / window.shape[0]


def rscm(window: np.ndarray, alpha: float) -> np.ndarray:
    """Sample covariance shrunk toward the identity by weight alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    c = scm(window)
    return (1.0 - alpha) * c + alpha * np.eye(c.shape[0])


def ka_shrink(window: np.ndarray, alpha: float, global_cov: np.ndarray) -> np.ndarray:
    """Sample covariance shrunk toward a global covariance by weight alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * scm(window) + alpha * np.asarray(global_cov, dtype=np.complex128)


def global_scm(pairs) -> np.ndarray:
    """Sample covariance over every sample (labels and features) of a dataset."""
    total = None
    count = 0
    for p in pairs:
        g = linalg.gram(p.features) + np.outer(p.label, np.conj(p.label))
        total = g if total is None else total + g
        count += p.features.shape[0] + 1
    if total is None:
        raise ValueError("global_scm needs at least one window")
    return total / count


def toeplitz_project(a: np.ndarray) -> np.ndarray:
    """Frobenius projection onto Hermitian Toeplitz matrices (diagonal averaging)."""
    a = np.asarray(a, dtype=np.complex128)
    d = a.shape[0]
    out = np.zeros_like(a)
    for k in range(d):
        upper = np.diagonal(a, offset=k)
        lowr = np.diagonal(a, offset=-k)
        t_k = 0.5 * (upper.mean() + np.conj(lowr).mean())
        if k == 0:
            t_k = t_k.real
        idx = np.arange(d - k)
        out[idx, idx + k] = t_k
        if k:
            out[idx + k, idx] = np.conj(t_k)
    return out


def psd_project(a: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    """Eigenvalue clipping at floor (Hermitian input)."""
    vals, vecs = np.linalg.eigh(linalg.symmetrize(a))
    clipped = np.maximum(vals, floor)
    return linalg.symmetrize((vecs * clipped) @ np.conj(vecs.T))


@dataclass(frozen=True)
class ToeplitzResult:
    matrix: np.ndarray
    iterations: int
    converged: bool


def toeplitz_ap_from(start: np.ndarray, max_iters: int = 200, tol: float = 1e-9) -> ToeplitzResult:
    """Alternate Toeplitz and PSD projections from a given Hermitian start."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    current = linalg.symmetrize(np.asarray(start, dtype=np.complex128))
    for it in range(1, max_iters + 1):
        nxt = psd_project(toeplitz_project(current))
        delta = float(np.sqrt(np.sum(np.abs(nxt - current) ** 2)))
        current = nxt
        if delta < tol:
            return ToeplitzResult(matrix=current, iterations=it, converged=True)
    return ToeplitzResult(matrix=current, iterations=max_iters, converged=False)


def toeplitz_ap(window: np.ndarray, max_iters: int = 200, tol: float = 1e-9) -> ToeplitzResult:
    """Toeplitz-structured covariance estimate via alternating projections from the SCM."""
    return toeplitz_ap_from(scm(window), max_iters=max_iters, tol=tol)


METRIC_SENSE = {"mse": "min", "nll": "min", "err": "min", "pauc01": "max"}


@dataclass(frozen=True)
class AlphaTable:
    alphas: tuple[float, ...]
    scores: dict  # metric -> list of scores aligned with alphas
    best: dict  # metric -> alpha

    def score_at(self, metric: str, alpha: float) -> float:
        return self.scores[metric][self.alphas.index(alpha)]


def tune_alpha(evaluate_fn, grid: ShrinkageGrid, metrics=("nll",)) -> AlphaTable:
    """Score every grid point and pick the best alpha per metric.

    ``evaluate_fn(alpha)`` returns {metric: score}. Larger-is-better metrics
    are taken from METRIC_SENSE; ties break toward the larger alpha.
    """
    rows = [evaluate_fn(alpha) for alpha in grid.alphas]
    scores = {m: [row[m] for row in rows] for m in metrics}
    best = {}
    for m in metrics:
        sense = METRIC_SENSE.get(m, "min")
        chosen = grid.alphas[0]
        chosen_score = scores[m][0]
        for alpha, score in zip(grid.alphas[1:], scores[m][1:]):
            better = score >= chosen_score if sense == "max" else score <= chosen_score
            if better:
                chosen, chosen_score = alpha, score
        best[m] = chosen
    return AlphaTable(alphas=grid.alphas, scores=scores, best=best)


def oracle_estimator(pair) -> np.ndarray:
    """Ground-truth covariance reported through the same interface."""
    if pair.truth is None:
        raise ValueError("oracle estimator needs ground-truth covariance")
    return pair.truth
