"""Training loop and the evaluation harness shared by models and baselines.

Training minimizes the per-window negative log-likelihood of each masked
label under the model's prediction from its feature window, one window per
step, with adaptive-moment updates on the real components of every
parameter (complex arrays are updated through their (real, imag) float
view). The learning rate follows a cosine decay; gradients are clipped at
a global norm. Runs are deterministic given the seed.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import linalg
from .downstream import DetectionResult, RocCurve, TargetSpec, roc, run_detection
from .errors import DivergenceDetected, NonFiniteValue
from .loss import mse_frobenius, nll_inverse_param
from .model import save_checkpoint

DESK_ITERATIONS = 20000
PAPER_ITERATIONS = 100000
DIVERGENCE_LOSS_CAP = 1e6
DIVERGENCE_PATIENCE = 100


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = PAPER_ITERATIONS
    batch_size: int = 1
    learning_rate: float = 1e-3
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0
    checkpoint_period: int = 5000
    eval_period: int = 1000

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError(f"invalid train config: {self}")
        # rate 0 is allowed so a no-op run stays expressible (freeze check)
        if self.learning_rate < 0 or self.lr_min < 0 or self.clip_norm <= 0:
            raise ValueError(f"invalid train config: {self}")

    def lr_at(self, step: int) -> float:
        frac = step / max(self.iterations - 1, 1)
        return self.lr_min + 0.5 * (self.learning_rate - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainRecord:
    iteration: int
    train_loss: float
    heldout_nll: Optional[float]
    wall_clock: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "train_loss", "heldout_nll", "wall_clock"])
            for r in self.records:
                writer.writerow([
                    r.iteration,
                    repr(r.train_loss),
                    "" if r.heldout_nll is None else repr(r.heldout_nll),
                    repr(r.wall_clock),
                ])


class AdamState:
    """Adam over one flat float64 buffer holding every real parameter component.

    The model's parameter arrays are rebound to views into the buffer
    (complex arrays first so their views stay 16-byte aligned), which makes
    the update a handful of vectorized operations regardless of how many
    parameter arrays the model has.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        names = sorted(params, key=lambda n: not np.iscomplexobj(params[n]))
        sizes = {n: params[n].size * (2 if np.iscomplexobj(params[n]) else 1) for n in names}
        total = sum(sizes.values())
        self.buffer = np.empty(total)
        self.grad_flat = np.empty(total)
        self.views: dict[str, np.ndarray] = {}
        self.grad_views: dict[str, np.ndarray] = {}
        offset = 0
        for n in names:
            p = params[n]
            for buf, table in ((self.buffer, self.views), (self.grad_flat, self.grad_views)):
                seg = buf[offset : offset + sizes[n]]
                view = seg.view(np.complex128) if np.iscomplexobj(p) else seg
                table[n] = view.reshape(p.shape)
            self.views[n][...] = p
            offset += sizes[n]
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self.scratch = np.empty(total)
        self.t = 0
        self.consumed = 0  # window pairs drawn from the data stream

    def bind(self, params: dict[str, np.ndarray]) -> None:
        """Rebind the model's parameter dict to the buffer views."""
        for n, view in self.views.items():
            params[n] = view

    def snapshot(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t, "consumed": self.consumed}

    def restore(self, state: dict) -> None:
        if state["m"].shape != self.m.shape:
            raise ValueError("optimizer state does not match the parameter layout")
        self.m[...] = state["m"]
        self.v[...] = state["v"]
        self.t = int(state["t"])
        self.consumed = int(state["consumed"])

    def step(self, grads: dict[str, np.ndarray], cfg: TrainConfig, lr: float) -> None:
        for n, view in self.grad_views.items():
            view[...] = grads[n]
        g = self.grad_flat
        norm = math.sqrt(float(g @ g))
        if norm > cfg.clip_norm:
            g *= cfg.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        np.multiply(g, g, out=self.scratch)
        self.scratch *= 1.0 - cfg.beta2
        self.v *= cfg.beta2
        self.v += self.scratch
        g *= 1.0 - cfg.beta1
        self.m *= cfg.beta1
        self.m += g
        np.divide(self.v, bc2, out=self.scratch)
        np.sqrt(self.scratch, out=self.scratch)
        self.scratch += cfg.eps
        np.divide(self.m, self.scratch, out=self.scratch)
        self.scratch *= lr / bc1
        self.buffer -= self.scratch


def _heldout_nll(model, pairs) -> float:
    values = []
    for p in pairs:
        est = model.forward(p.features)
        if model.output_kind == "covariance":
            values.append(nll_inverse_param(p.label, linalg.inverse_hpd(est)).value)
        else:
            values.append(nll_inverse_param(p.label, est).value)
    return float(np.mean(values))


def _window_iterator(data, seed: int):
    """Finite datasets repeat in shuffled epochs; generators stream as-is."""
    if isinstance(data, (list, tuple)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
        while True:
            order = rng.permutation(len(data))
            for idx in order:
                yield data[idx]
    else:
        yield from data


def train(model, data, cfg: TrainConfig, heldout=None, out_dir=None,
          resume_state: Optional[dict] = None,
          log_hook: Optional[Callable[[TrainRecord], None]] = None) -> TrainLog:
    """Optimize the model in place; returns the training log.

    ``data`` is a finite list of window pairs (shuffled per epoch) or an
    infinite iterator of fresh pairs. ``resume_state`` (a checkpoint's
    optimizer state) restores the moment buffers and fast-forwards the data
    stream, continuing an interrupted run on its exact trajectory. Raises
    DivergenceDetected when a step produces non-finite values or the loss
    stays above 1e6 for 100 consecutive steps; the last periodic checkpoint
    is preserved on disk when ``out_dir`` is given.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    stream = _window_iterator(data, cfg.seed)
    state = AdamState(model.params)
    state.bind(model.params)
    first_step = 0
    if resume_state is not None:
        state.restore(resume_state)
        for _ in range(state.consumed):
            next(stream)
        first_step = state.t
    log = TrainLog()
    start = time.perf_counter()
    loss_acc = 0.0
    loss_n = 0
    high_loss_streak = 0

    def checkpoint(step, name="model.ckpt"):
        if out_path is not None:
            save_checkpoint(out_path / name, model, iteration=step, seed=cfg.seed,
                            optimizer=state.snapshot())

    for step in range(first_step, cfg.iterations):
        grads_sum = None
        batch_loss = 0.0
        try:
            for _ in range(cfg.batch_size):
                pair = next(stream)
                state.consumed += 1
                tape, loss_node = model.loss_tape(pair.features, pair.label)
                batch_loss += float(loss_node.value)
                grads = tape.backward(loss_node)
                if grads_sum is None:
                    grads_sum = grads
                else:
                    for k in grads_sum:
                        grads_sum[k] = grads_sum[k] + grads[k]
        except NonFiniteValue as exc:
            checkpoint(step)
            raise DivergenceDetected(f"non-finite value at iteration {step}: {exc}") from exc
        batch_loss /= cfg.batch_size
        if cfg.batch_size > 1:
            for k in grads_sum:
                grads_sum[k] = grads_sum[k] / cfg.batch_size
        if batch_loss > DIVERGENCE_LOSS_CAP:
            high_loss_streak += 1
            if high_loss_streak >= DIVERGENCE_PATIENCE:
                checkpoint(step)
                raise DivergenceDetected(
                    f"loss exceeded {DIVERGENCE_LOSS_CAP:g} for {DIVERGENCE_PATIENCE} consecutive steps"
                )
        else:
            high_loss_streak = 0
        state.step(grads_sum, cfg, cfg.lr_at(step))
        loss_acc += batch_loss
        loss_n += 1
        done = step + 1
        if done % cfg.eval_period == 0 or done == cfg.iterations:
            record = TrainRecord(
                iteration=done,
                train_loss=loss_acc / loss_n,
                heldout_nll=_heldout_nll(model, heldout) if heldout else None,
                wall_clock=time.perf_counter() - start,
            )
            log.records.append(record)
            if log_hook is not None:
                log_hook(record)
            loss_acc, loss_n = 0.0, 0
        if cfg.checkpoint_period and done % cfg.checkpoint_period == 0:
            checkpoint(done, name=f"checkpoint_{done:07d}.ckpt")
    checkpoint(cfg.iterations)
    return log


# -- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class Estimator:
    """A named window -> matrix map; kind says which parameterization it emits."""

    name: str
    kind: str  # "covariance" | "precision"
    fn: Callable  # fn(pair) -> (d, d) ndarray

    def __post_init__(self):
        if self.kind not in ("covariance", "precision"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")

    @classmethod
    def from_model(cls, model, name: str) -> "Estimator":
        return cls(name=name, kind=model.output_kind, fn=lambda pair: model.forward(pair.features))


@dataclass(frozen=True)
class DetectionConfig:
    omega: float
    amplitude: float
    detector: str = "amf"
    max_fpr: float = 0.1
    seed: int = 0


@dataclass
class EvalReport:
    name: str
    n_windows: int
    mse: Optional[float] = None
    nll: Optional[float] = None
    err: Optional[float] = None
    pauc01: Optional[float] = None
    pauc_raw: Optional[float] = None
    roc: Optional[RocCurve] = None
    timing: Optional[dict] = None

    def metric_row(self) -> dict:
        return {
            "name": self.name,
            "n_windows": self.n_windows,
            "mse": self.mse,
            "nll": self.nll,
            "err": self.err,
            "pauc01": self.pauc01,
            "pauc_raw": self.pauc_raw,
        }


DEFAULT_METRICS = ("mse", "nll", "err", "pauc01")


def evaluate(estimator: Estimator, pairs, metrics=DEFAULT_METRICS,
             detection: Optional[DetectionConfig] = None) -> EvalReport:
    """Score one estimator on a dataset.

    MSE is reported only when ground truth is present; err/pauc01 need a
    detection config. An empty metric set short-circuits without calling
    the estimator. Estimator failures propagate with the window index.
    """
    if not pairs:
        raise ValueError("evaluate needs a nonempty dataset")
    report = EvalReport(name=estimator.name, n_windows=len(pairs))
    metrics = tuple(metrics)
    if not metrics:
        return report
    unknown = set(metrics) - set(DEFAULT_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    if ("err" in metrics or "pauc01" in metrics) and detection is None:
        raise ValueError("err/pauc01 metrics need a detection config")

    covariances: list[Optional[np.ndarray]] = []
    precisions: list[Optional[np.ndarray]] = []
    times = np.empty(len(pairs))
    need_cov = "mse" in metrics
    need_prec = "nll" in metrics or "err" in metrics or "pauc01" in metrics
    for i, pair in enumerate(pairs):
        t0 = time.perf_counter()
        try:
            est = estimator.fn(pair)
        except Exception as exc:
            raise RuntimeError(f"estimator {estimator.name!r} failed on window {i}: {exc}") from exc
        times[i] = time.perf_counter() - t0
        if estimator.kind == "covariance":
            covariances.append(est if need_cov else None)
            precisions.append(linalg.inverse_hpd(est) if need_prec else None)
        else:
            precisions.append(est if need_prec else None)
            covariances.append(linalg.inverse_hpd(est) if need_cov else None)
    report.timing = {
        "total_s": float(times.sum()),
        "mean_s": float(times.mean()),
        "max_s": float(times.max()),
    }
    if "mse" in metrics and all(p.truth is not None for p in pairs):
        report.mse = float(np.mean([
            mse_frobenius(c, p.truth) for c, p in zip(covariances, pairs)
        ]))
    if "nll" in metrics:
        report.nll = float(np.mean([
            nll_inverse_param(p.label, s).value for s, p in zip(precisions, pairs)
        ]))
    if "err" in metrics or "pauc01" in metrics:
        spec = TargetSpec(omega=detection.omega, amplitude=detection.amplitude)
        result: DetectionResult = run_detection(
            pairs, lambda i, pair: precisions[i], spec, seed=detection.seed,
            detector=detection.detector,
        )
        if "err" in metrics:
            report.err = result.err
        if "pauc01" in metrics:
            curve = roc(result.scores_h0, result.scores_h1, max_fpr=detection.max_fpr)
            report.pauc01 = curve.pauc01
            report.pauc_raw = curve.pauc_raw
            report.roc = curve
    return report
