"""Synthetic non-stationary environments with ground-truth covariances.

Two generators, both emitting (label, features, truth) window pairs of
i.i.d. zero-mean circular complex Gaussians:

* clutter environments: C = sum_k sigma2_k v_k v_k^H + noise_var * I with
  unit-modulus steering vectors v_k, per-environment Dirichlet-sparse
  powers sigma2_k = A * s_k, A ~ U(0, amp_max), and phases drawn fresh per
  environment.
* knowledge-aided environments: C drawn from a complex inverse-Wishart
  prior around a global scale matrix, so the Bayes-optimal window
  predictor is an affine function of the window scatter with known
  closed-form coefficients (see ka_closed_form).

Sampling convention: z = L u with L the Cholesky factor of C and
u = (g1 + i g2)/sqrt(2), so E[z z^H] = C and the white case has unit
per-entry variance. Streams are reproducible: one Generator per stream,
derived from (seed, stream_id) via numpy SeedSequence spawn keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import linalg
from .errors import NotPositiveDefinite, ParseError

DATASET_FORMAT = "selfcov-dataset"
DATASET_VERSION = 1


def default_omegas(k: int) -> tuple[float, ...]:
    """k equispaced angular frequencies 2*pi*j/(k+2), j = 1..k (alias-free at small d)."""
    return tuple(2.0 * np.pi * j / (k + 2) for j in range(1, k + 1))


@dataclass(frozen=True)
class SyntheticConfig:
    dim: int = 6
    window: int = 20
    n_freqs: int = 5
    dirichlet_alpha: float = 0.1
    amp_max: float = 2.0
    noise_var: float = 0.1
    omegas: tuple[float, ...] = ()
    n_envs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2 or self.n_freqs < 1 or self.window < 1:
            raise ValueError(f"invalid synthetic config: {self}")
        if self.noise_var <= 0 or self.dirichlet_alpha <= 0 or self.amp_max < 0:
            raise ValueError(f"invalid synthetic config: {self}")
        if self.n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        if not self.omegas:
            object.__setattr__(self, "omegas", default_omegas(self.n_freqs))
        if len(self.omegas) != self.n_freqs:
            raise ValueError(f"expected {self.n_freqs} frequencies, got {len(self.omegas)}")


@dataclass(frozen=True)
class KaConfig:
    dim: int = 4
    window: int = 20
    nu: int = 10
    scale: Optional[np.ndarray] = None
    n_envs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.nu != int(self.nu):
            raise ValueError("nu must be an integer (Wishart draws sum outer products)")
        if self.nu <= self.dim + 1:
            raise ValueError(f"nu must exceed dim + 1 for a finite mean, got nu={self.nu} dim={self.dim}")
        if self.window < 1 or self.dim < 1:
            raise ValueError(f"invalid knowledge-aided config: {self}")
        if self.scale is None:
            object.__setattr__(self, "scale", np.eye(self.dim, dtype=np.complex128))
        else:
            object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.complex128))
        if self.scale.shape != (self.dim, self.dim):
            raise ValueError(f"scale must be {self.dim}x{self.dim}")


@dataclass
class WindowPair:
    """One training or evaluation unit: a masked label sample, its feature
    window (rows are samples), and the generating covariance when known."""

    label: np.ndarray
    features: np.ndarray
    truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.features.shape[1] != self.label.shape[0]:
            raise ValueError(
                f"feature columns {self.features.shape[1]} != label dim {self.label.shape[0]}"
            )


def stream_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent generator for (seed, stream_id); the documented splitting rule."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream_id,)))


def gen_steering(omega: float, phi: float, dim: int) -> np.ndarray:
    """Unit-modulus steering vector with entry t equal to exp(i(omega t + phi))."""
    t = np.arange(dim)
    return np.exp(1j * (omega * t + phi))


def clutter_covariance(cfg: SyntheticConfig, powers: np.ndarray, phis: np.ndarray) -> np.ndarray:
    c = cfg.noise_var * np.eye(cfg.dim, dtype=np.complex128)
    for k in range(cfg.n_freqs):
        v = gen_steering(cfg.omegas[k], phis[k], cfg.dim)
        c += powers[k] * np.outer(v, np.conj(v))
    return c


def sample_gaussian(lower: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n rows of CN(0, L L^H): z = L (g1 + i g2)/sqrt(2)."""
    d = lower.shape[0]
    u = (rng.standard_normal((n, d)) + 1j * rng.standard_normal((n, d))) / np.sqrt(2.0)
    return u @ lower.T


def gen_environment(cfg: SyntheticConfig, rng: np.random.Generator) -> WindowPair:
    """One clutter environment: fresh powers/phases, |E|+1 samples, truth attached."""
    s = rng.dirichlet(np.full(cfg.n_freqs, cfg.dirichlet_alpha))
    amp = rng.uniform(0.0, cfg.amp_max)
    phis = rng.uniform(0.0, 2.0 * np.pi, cfg.n_freqs)
    truth = clutter_covariance(cfg, amp * s, phis)
    samples = sample_gaussian(linalg.cholesky(truth), cfg.window + 1, rng)
    return WindowPair(label=samples[0], features=samples[1:], truth=truth)


def draw_inverse_wishart(nu: int, scale: np.ndarray, rng: np.random.Generator,
                         retries: int = 10) -> np.ndarray:
    """Complex inverse-Wishart draw whose window-conditional mean matches the
    knowledge-aided closed form (see ka_closed_form).

    Construction: with m = nu - 1 degrees of freedom, accumulate m outer
    products of CN(0, (nu*scale)^{-1}) rows and invert. The prior mean is
    nu*scale/(nu - dim - 1).
    """
    m = int(nu) - 1
    lower_inv = linalg.cholesky(linalg.inverse_hpd(nu * scale))
    for _ in range(retries):
        g = sample_gaussian(lower_inv, m, rng)
        try:
            return linalg.inverse_hpd(linalg.gram(g))
        except NotPositiveDefinite:
            continue
    raise NotPositiveDefinite(f"singular Wishart draw persisted over {retries} retries")


def gen_ka_environment(cfg: KaConfig, rng: np.random.Generator) -> WindowPair:
    truth = draw_inverse_wishart(cfg.nu, cfg.scale, rng)
    samples = sample_gaussian(linalg.cholesky(truth), cfg.window + 1, rng)
    return WindowPair(label=samples[0], features=samples[1:], truth=truth)


def ka_closed_form(nu: int, window: int, dim: int, scale: np.ndarray):
    """Asymptotic optimum (prior matrix, scatter weight) for knowledge-aided data:
    A = nu/(nu + |E| - d - 1) * scale and alpha = 1/(nu + |E| - d - 1)."""
    denom = nu + window - dim - 1
    return (nu / denom) * np.asarray(scale, dtype=np.complex128), 1.0 / denom


def environment_stream(cfg, stream_id: int = 0):
    """Infinite reproducible stream of fresh environments."""
    rng = stream_rng(cfg.seed, stream_id)
    gen = gen_environment if isinstance(cfg, SyntheticConfig) else gen_ka_environment
    while True:
        yield gen(cfg, rng)


def generate_dataset(cfg) -> list[WindowPair]:
    """cfg.n_envs environments from the (seed, 0) stream."""
    stream = environment_stream(cfg)
    return [next(stream) for _ in range(cfg.n_envs)]


# -- dataset files ------------------------------------------------------------


def _config_dict(cfg) -> dict:
    out = asdict(cfg)
    if isinstance(cfg, KaConfig):
        out["scale"] = [[float(v.real), float(v.imag)] for v in cfg.scale.ravel()]
        out["kind"] = "ka"
    else:
        out["omegas"] = [float(w) for w in cfg.omegas]
        out["kind"] = "clutter"
    return out


def write_dataset(path, pairs: list[WindowPair], config=None) -> None:
    """Dataset file: one JSON header line, then packed little-endian float64
    (re, im) pairs per record (label, features, optional truth)."""
    if not pairs:
        raise ValueError("refusing to write an empty dataset")
    dim = pairs[0].label.shape[0]
    window = pairs[0].features.shape[0]
    has_truth = pairs[0].truth is not None
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "count": len(pairs),
        "dim": dim,
        "window": window,
        "has_truth": has_truth,
        "config": _config_dict(config) if config is not None else None,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for i, p in enumerate(pairs):
            if p.label.shape != (dim,) or p.features.shape != (window, dim):
                raise ValueError(f"record {i} has inconsistent shapes")
            if (p.truth is not None) != has_truth:
                raise ValueError(f"record {i} truth presence differs from header")
            fh.write(np.ascontiguousarray(p.label.astype("<c16")).tobytes())
            fh.write(np.ascontiguousarray(p.features.astype("<c16")).tobytes())
            if has_truth:
                fh.write(np.ascontiguousarray(p.truth.astype("<c16")).tobytes())


def read_dataset(path):
    """Returns (pairs, header). Raises ParseError with a byte offset on damage."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad dataset header: {exc}") from None
        if header.get("format") != DATASET_FORMAT:
            raise ParseError(f"not a dataset file: format={header.get('format')!r}")
        count, dim, window = header["count"], header["dim"], header["window"]
        has_truth = header["has_truth"]
        record_items = dim + window * dim + (dim * dim if has_truth else 0)
        record_bytes = record_items * 16
        pairs = []
        for i in range(count):
            raw = fh.read(record_bytes)
            if len(raw) != record_bytes:
                raise ParseError(f"truncated dataset at byte {fh.tell()}: record {i}")
            flat = np.frombuffer(raw, dtype="<c16").astype(np.complex128)
            label = flat[:dim]
            features = flat[dim : dim + window * dim].reshape(window, dim)
            truth = flat[dim + window * dim :].reshape(dim, dim) if has_truth else None
            pairs.append(WindowPair(label=label, features=features, truth=truth))
        if fh.read(1):
            raise ParseError(f"trailing bytes after {count} records at byte {fh.tell() - 1}")
    return pairs, header
