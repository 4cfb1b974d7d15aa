"""Window-to-precision estimator architectures.

Two architectures map a feature window (n samples of dimension d, rows are
samples) to a matrix estimate:

* AttentionModel: P parallel towers, each a stack of L self-attention
  layers whose query/key/value embeddings are separate fully connected
  complex networks. Attention logits are the modulus of Q K^H scaled by
  1/sqrt(d); tower outputs are row-Gram matrices normalized by the window
  size, averaged over towers and ridged. The output is an inverse
  covariance (precision) matrix, Hermitian PD by construction.
* KnowledgeAidedModel: a global Hermitian PSD matrix plus a learned
  positive scale on the window's scatter sum; predicts the covariance
  itself.

Tower parameters are stored stacked along a leading axis of size P, one
array per affine map, so a whole layer executes as a few batched matmuls.
``forward`` is a plain numpy inference path; ``loss_tape`` builds the
equivalent differentiable graph for training. The two paths are coded
independently and cross-checked in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import linalg
from .autodiff import Tape
from .errors import ParseError

CHECKPOINT_FORMAT = "selfcov-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    hidden_layers: int = 3
    width: int = 50
    depth: int = 2
    towers: int = 10
    ridge: float = 1e-6

    def __post_init__(self):
        if self.dim < 2 or self.depth < 1 or self.towers < 1 or self.hidden_layers < 1:
            raise ValueError(f"invalid attention config: {self}")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    @property
    def layer_widths(self) -> list[int]:
        return [self.dim] + [self.width] * self.hidden_layers + [self.dim]


_ROLES = ("query", "key", "value")


class AttentionModel:
    """Attention-based inverse covariance estimator."""

    output_kind = "precision"

    def __init__(self, config: AttentionConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @staticmethod
    def param_order(config: AttentionConfig) -> list[str]:
        names = []
        n_maps = len(config.layer_widths) - 1
        for layer in range(1, config.depth + 1):
            for role in _ROLES:
                for k in range(n_maps):
                    names.append(f"l{layer}.{role}.w{k}")
                    names.append(f"l{layer}.{role}.b{k}")
        return names

    @classmethod
    def initialize(cls, config: AttentionConfig, seed: int) -> "AttentionModel":
        """Zero-mean weights with variance 1/fan-in per real component, zero biases."""
        rng = np.random.default_rng(seed)
        widths = config.layer_widths
        p = config.towers
        params: dict[str, np.ndarray] = {}
        for name in cls.param_order(config):
            k = int(name.rsplit("w", 1)[-1] if ".w" in name else name.rsplit("b", 1)[-1])
            fan_in, fan_out = widths[k], widths[k + 1]
            if ".w" in name:
                std = 1.0 / np.sqrt(fan_in)
                params[name] = std * (
                    rng.standard_normal((p, fan_in, fan_out))
                    + 1j * rng.standard_normal((p, fan_in, fan_out))
                )
            else:
                params[name] = np.zeros((p, 1, fan_out), dtype=np.complex128)
        return cls(config, params)

    # -- inference (straight-line numpy) ------------------------------------

    def _embed(self, x: np.ndarray, layer: int, role: str) -> np.ndarray:
        n_maps = len(self.config.layer_widths) - 1
        y = x
        for k in range(n_maps):
            y = y @ self.params[f"l{layer}.{role}.w{k}"] + self.params[f"l{layer}.{role}.b{k}"]
            if k < n_maps - 1:
                y = np.maximum(y.real, 0.0) + 1j * np.maximum(y.imag, 0.0)
        return y

    def forward(self, window: np.ndarray, return_attention: bool = False):
        """Map an (n, d) window to a (d, d) Hermitian PD precision estimate."""
        cfg = self.config
        window = np.asarray(window, dtype=np.complex128)
        n, d = window.shape
        if d != cfg.dim:
            raise ValueError(f"window has dimension {d}, model expects {cfg.dim}")
        x = np.broadcast_to(window, (cfg.towers, n, d))
        attention_maps = []
        for layer in range(1, cfg.depth + 1):
            q = self._embed(x, layer, "query")
            k = self._embed(x, layer, "key")
            v = self._embed(x, layer, "value")
            logits = np.abs(q @ np.conj(np.swapaxes(k, -1, -2))) / np.sqrt(d)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            weights = e / e.sum(axis=-1, keepdims=True)
            if return_attention:
                attention_maps.append(weights)
            x = weights @ v
        grams = linalg.gram(x) / n
        s = grams.mean(axis=0) + cfg.ridge * np.eye(d)
        if return_attention:
            return s, attention_maps
        return s

    predict = forward

    # -- training graph ------------------------------------------------------

    def loss_tape(self, window: np.ndarray, label: np.ndarray):
        """Build the negative log-likelihood tape for one (features, label) pair."""
        cfg = self.config
        window = np.asarray(window, dtype=np.complex128)
        n, d = window.shape
        n_maps = len(cfg.layer_widths) - 1
        tape = Tape()
        leaves = {name: tape.param(name, self.params[name]) for name in self.params}
        x = tape.const(np.broadcast_to(window, (cfg.towers, n, d)))
        for layer in range(1, cfg.depth + 1):
            embedded = {}
            for role in _ROLES:
                y = x
                for k in range(n_maps):
                    y = tape.add(
                        tape.matmul(y, leaves[f"l{layer}.{role}.w{k}"]),
                        leaves[f"l{layer}.{role}.b{k}"],
                    )
                    if k < n_maps - 1:
                        y = tape.split_relu(y)
                embedded[role] = y
            logits = tape.scale(
                tape.modulus(tape.matmul(embedded["query"], tape.adjoint_t(embedded["key"]))),
                1.0 / np.sqrt(d),
            )
            x = tape.matmul(tape.softmax_rows(logits), embedded["value"])
        s = tape.add_const(
            tape.mean_stack(tape.scale(tape.gram(x), 1.0 / n)),
            cfg.ridge * np.eye(d),
        )
        z = tape.const(np.asarray(label, dtype=np.complex128))
        loss = tape.add(tape.quad_form(z, s), tape.scale(tape.logdet_hpd(s), -1.0))
        return tape, loss


@dataclass(frozen=True)
class KnowledgeAidedConfig:
    dim: int
    window: int
    floor: float = 1e-6

    def __post_init__(self):
        if self.dim < 1 or self.window < 1 or self.floor <= 0:
            raise ValueError(f"invalid knowledge-aided config: {self}")


class KnowledgeAidedModel:
    """Covariance predictor A + alpha * sum_j z_j z_j^H with global (A, alpha).

    A is kept Hermitian PSD through the factor parameterization
    A = sum_r b_r b_r^H + floor * I, and alpha positive through
    alpha = exp(log_alpha).
    """

    output_kind = "covariance"

    def __init__(self, config: KnowledgeAidedConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @staticmethod
    def param_order(config: KnowledgeAidedConfig) -> list[str]:
        return ["b_factor", "log_alpha"]

    @classmethod
    def initialize(cls, config: KnowledgeAidedConfig, seed: int = 0) -> "KnowledgeAidedModel":
        """Start at A = I and alpha = 1/window, independent of the seed."""
        scale = np.sqrt(1.0 - config.floor)
        params = {
            "b_factor": scale * np.eye(config.dim, dtype=np.complex128),
            "log_alpha": np.asarray(np.log(1.0 / config.window)),
        }
        return cls(config, params)

    @property
    def prior_matrix(self) -> np.ndarray:
        b = self.params["b_factor"]
        return linalg.gram(b) + self.config.floor * np.eye(self.config.dim)

    @property
    def scatter_weight(self) -> float:
        return float(np.exp(self.params["log_alpha"]))

    def forward(self, window: np.ndarray) -> np.ndarray:
        window = np.asarray(window, dtype=np.complex128)
        return self.prior_matrix + self.scatter_weight * linalg.gram(window)

    predict = forward

    def loss_tape(self, window: np.ndarray, label: np.ndarray):
        window = np.asarray(window, dtype=np.complex128)
        tape = Tape()
        b = tape.param("b_factor", self.params["b_factor"])
        log_alpha = tape.param("log_alpha", self.params["log_alpha"])
        prior = tape.add_const(tape.gram(b), self.config.floor * np.eye(self.config.dim))
        scatter = tape.const(linalg.gram(window))
        cov = tape.add(prior, tape.scale_by(tape.exp(log_alpha), scatter))
        z = tape.const(np.asarray(label, dtype=np.complex128))
        loss = tape.add(tape.quad_form_inv(z, cov), tape.logdet_hpd(cov))
        return tape, loss


# -- checkpoints -------------------------------------------------------------

_MODEL_KINDS = {"attention": (AttentionModel, AttentionConfig),
                "knowledge_aided": (KnowledgeAidedModel, KnowledgeAidedConfig)}


def _kind_of(model) -> str:
    return "attention" if isinstance(model, AttentionModel) else "knowledge_aided"


def _array_meta(name: str, arr: np.ndarray) -> dict:
    return {
        "name": name,
        "shape": list(arr.shape),
        "dtype": "complex128" if np.iscomplexobj(arr) else "float64",
    }


def _write_array(fh, arr: np.ndarray) -> None:
    wire = arr.astype("<c16" if np.iscomplexobj(arr) else "<f8", copy=False)
    fh.write(np.ascontiguousarray(wire).tobytes())


def _read_array(fh, meta: dict) -> np.ndarray:
    shape = tuple(meta["shape"])
    dtype = "<c16" if meta["dtype"] == "complex128" else "<f8"
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    nbytes = count * np.dtype(dtype).itemsize
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise ParseError(f"truncated checkpoint at byte {fh.tell()}: array {meta['name']}")
    native = np.complex128 if meta["dtype"] == "complex128" else np.float64
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(native)


def save_checkpoint(path, model, iteration: int = 0, seed=None, optimizer: dict | None = None) -> None:
    """Write a checkpoint: one JSON header line, then little-endian float64
    payloads in declared order (complex entries as re, im pairs).

    ``optimizer``, when given, carries the moment buffers plus step/consumed
    counters so training can resume on an identical trajectory.
    """
    order = model.param_order(model.config)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": _kind_of(model),
        "config": asdict(model.config),
        "seed": seed,
        "iteration": iteration,
        "params": [_array_meta(name, model.params[name]) for name in order],
    }
    opt_arrays = []
    if optimizer is not None:
        opt_arrays = [("m", optimizer["m"]), ("v", optimizer["v"])]
        header["optimizer"] = {
            "t": optimizer["t"],
            "consumed": optimizer["consumed"],
            "arrays": [_array_meta(name, arr) for name, arr in opt_arrays],
        }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name in order:
            _write_array(fh, model.params[name])
        for _, arr in opt_arrays:
            _write_array(fh, arr)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, header dict). Optimizer state, when
    present, lands in header['optimizer']['state'] as {'m','v','t','consumed'}."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad checkpoint header: {exc}") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ParseError(f"not a checkpoint file: format={header.get('format')!r}")
        if header.get("kind") not in _MODEL_KINDS:
            raise ParseError(f"unknown model kind {header.get('kind')!r}")
        model_cls, config_cls = _MODEL_KINDS[header["kind"]]
        config = config_cls(**header["config"])
        params = {meta["name"]: _read_array(fh, meta) for meta in header["params"]}
        if "optimizer" in header:
            opt = header["optimizer"]
            arrays = {meta["name"]: _read_array(fh, meta) for meta in opt["arrays"]}
            opt["state"] = {"m": arrays["m"], "v": arrays["v"],
                            "t": opt["t"], "consumed": opt["consumed"]}
        trailing = fh.read(1)
        if trailing:
            raise ParseError(f"trailing bytes after payload at byte {fh.tell() - 1}")
    expected = model_cls.param_order(config)
    got = [meta["name"] for meta in header["params"]]
    if got != expected:
        raise ParseError(f"parameter order mismatch: {got} != {expected}")
    return model_cls(config, params), header
