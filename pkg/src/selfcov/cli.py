"""Command-line entry point for reproducible generate/train/evaluate runs.

Commands: ``gen``, ``train``, ``eval``, ``roc``, ``ka-verify``. Each takes an
optional JSON config file (``--config``) whose keys are validated strictly
(unknown keys are rejected) plus a few common flag overrides. Every emitted
artifact embeds the fully resolved configuration and seed, so two artifacts
with equal embedded configs are byte-comparable; wall-clock timing goes to
a separate sidecar file to keep metrics deterministic.

Exit codes: 0 success, 2 validation failure, 3 I/O or parse failure,
4 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, synthetic, trainer
from .downstream import write_roc_csv
from .errors import DivergenceDetected, ParseError, ValidationError
from .model import (
    AttentionConfig,
    AttentionModel,
    KnowledgeAidedConfig,
    KnowledgeAidedModel,
    load_checkpoint,
    save_checkpoint,
)

# The paper-style Gram head accumulates row outer products z z^H; recorded in
# every manifest so downstream consumers know the convention.
GRAM_CONVENTION = "mean of row outer products z z^H (rows are samples)"

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

PRESETS = {"desk": trainer.DESK_ITERATIONS, "paper": trainer.PAPER_ITERATIONS}

GEN_DEFAULTS = {
    "kind": "clutter",
    "n_envs": 1000,
    "seed": 0,
    "dim": 6,
    "window": 20,
    "n_freqs": 5,
    "dirichlet_alpha": 0.1,
    "amp_max": 2.0,
    "noise_var": 0.1,
    "nu": 10,
}

TRAIN_DEFAULTS = {
    "model": {
        "kind": "attention",
        "dim": 6,
        "hidden_layers": 3,
        "width": 50,
        "depth": 2,
        "towers": 10,
        "ridge": 1e-6,
        "window": 20,
        "init_seed": 0,
    },
    "train": {
        "iterations": trainer.DESK_ITERATIONS,
        "batch_size": 1,
        "learning_rate": 1e-3,
        "lr_min": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "clip_norm": 10.0,
        "seed": 0,
        "checkpoint_period": 5000,
        "eval_period": 1000,
    },
    "data": {"path": None, "stream": None},
    "heldout_windows": 0,
}

DETECTION_DEFAULTS = {
    "omega": float(2.0 * np.pi * 1.5 / 7.0),  # midpoint between clutter lines 1 and 2
    "amplitude": 1.0,
    "detector": "amf",
    "max_fpr": 0.1,
    "seed": 0,
}

EVAL_DEFAULTS = {
    "data": None,
    "train_data": None,
    "checkpoints": [],
    "baselines": ["rscm", "ka", "scm", "oracle"],
    "metrics": ["mse", "nll", "err", "pauc01"],
    "grid": list(baselines.ShrinkageGrid.default().alphas),
    "detection": dict(DETECTION_DEFAULTS),
    "atom": {"max_iters": 200, "tol": 1e-9},
}

ROC_DEFAULTS = {
    "data": None,
    "checkpoint": None,
    "baseline": None,
    "alpha": 0.1,
    "detection": dict(DETECTION_DEFAULTS),
}

KA_VERIFY_DEFAULTS = {
    "nu": 10,
    "dim": 4,
    "window": 20,
    "iterations": 50000,
    "seed": 0,
    "data_seed": 0,
}


def _merge_config(defaults: dict, override: dict, path: str = "") -> dict:
    """Deep-merge override into defaults; reject keys not present in defaults."""
    out = {}
    for key, default_value in defaults.items():
        if key in override:
            value = override[key]
            if isinstance(default_value, dict) and isinstance(value, dict):
                value = _merge_config(default_value, value, f"{path}{key}.")
            out[key] = copy.deepcopy(value)
        else:
            out[key] = copy.deepcopy(default_value)
    unknown = set(override) - set(defaults)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(path + k for k in unknown)}")
    return out


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return cfg


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _dataset_config(cfg: dict):
    if cfg["kind"] == "clutter":
        return synthetic.SyntheticConfig(
            dim=cfg["dim"],
            window=cfg["window"],
            n_freqs=cfg["n_freqs"],
            dirichlet_alpha=cfg["dirichlet_alpha"],
            amp_max=cfg["amp_max"],
            noise_var=cfg["noise_var"],
            n_envs=cfg["n_envs"],
            seed=cfg["seed"],
        )
    if cfg["kind"] == "ka":
        return synthetic.KaConfig(
            dim=cfg["dim"],
            window=cfg["window"],
            nu=cfg["nu"],
            n_envs=cfg["n_envs"],
            seed=cfg["seed"],
        )
    raise ValidationError(f"unknown dataset kind {cfg['kind']!r}")


def cmd_gen(args) -> int:
    cfg = _merge_config(GEN_DEFAULTS, _load_config_file(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n_envs is not None:
        cfg["n_envs"] = args.n_envs
    if args.kind is not None:
        cfg["kind"] = args.kind
    if cfg["n_envs"] < 1:
        raise ValidationError("n_envs must be >= 1")
    try:
        data_cfg = _dataset_config(cfg)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    pairs = synthetic.generate_dataset(data_cfg)
    out = args.out or "dataset.bin"
    synthetic.write_dataset(out, pairs, config=data_cfg)
    dim = pairs[0].label.shape[0]
    print(f"wrote {len(pairs)} environments (d={dim}, window={pairs[0].features.shape[0]}, "
          f"seed={cfg['seed']}) to {out}")
    return 0


def _build_model(mcfg: dict):
    if mcfg["kind"] == "attention":
        config = AttentionConfig(
            dim=mcfg["dim"],
            hidden_layers=mcfg["hidden_layers"],
            width=mcfg["width"],
            depth=mcfg["depth"],
            towers=mcfg["towers"],
            ridge=mcfg["ridge"],
        )
        return AttentionModel.initialize(config, seed=mcfg["init_seed"])
    if mcfg["kind"] == "knowledge_aided":
        config = KnowledgeAidedConfig(dim=mcfg["dim"], window=mcfg["window"])
        return KnowledgeAidedModel.initialize(config, seed=mcfg["init_seed"])
    raise ValidationError(f"unknown model kind {mcfg['kind']!r}")


def cmd_train(args) -> int:
    cfg = _merge_config(TRAIN_DEFAULTS, _load_config_file(args.config))
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.iterations is not None:
        cfg["train"]["iterations"] = args.iterations
    preset = "paper" if args.paper else args.preset
    if preset is not None:
        cfg["train"]["iterations"] = PRESETS[preset]
    if args.data is not None:
        cfg["data"]["path"] = args.data

    out_dir = Path(args.out or "train_out")
    out_dir.mkdir(parents=True, exist_ok=True)

    resume_state = None
    if args.resume is not None:
        model, header = load_checkpoint(args.resume)
        if header.get("optimizer") is None:
            raise ValidationError(f"checkpoint {args.resume} has no optimizer state to resume from")
        resume_state = header["optimizer"]["state"]
    else:
        try:
            model = _build_model(cfg["model"])
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    model_dim = model.config.dim

    if cfg["data"]["path"] is not None:
        pairs, _ = synthetic.read_dataset(cfg["data"]["path"])
        if pairs[0].label.shape[0] != model_dim:
            raise ValidationError(
                f"dataset dimension {pairs[0].label.shape[0]} does not match model dim {model_dim}"
            )
        data = pairs
    elif cfg["data"]["stream"] is not None:
        stream_cfg = _merge_config(GEN_DEFAULTS, cfg["data"]["stream"])
        try:
            data_cfg = _dataset_config(stream_cfg)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        if stream_cfg["dim"] != model_dim:
            raise ValidationError("stream dimension does not match model dim")
        data = synthetic.environment_stream(data_cfg)
    else:
        raise ValidationError("train needs data.path or data.stream")

    tcfg = trainer.TrainConfig(**cfg["train"])

    heldout = None
    if cfg["heldout_windows"]:
        if isinstance(data, list):
            heldout = data[: cfg["heldout_windows"]]
        else:
            heldout_cfg = _merge_config(GEN_DEFAULTS, cfg["data"]["stream"])
            heldout_stream = synthetic.environment_stream(_dataset_config(heldout_cfg), stream_id=999)
            heldout = [next(heldout_stream) for _ in range(cfg["heldout_windows"])]

    log = trainer.train(model, data, tcfg, heldout=heldout, out_dir=out_dir,
                        resume_state=resume_state)
    log.write_csv(out_dir / "trainlog.csv")
    manifest = {
        "format": "selfcov-train-manifest",
        "version": 1,
        "config": cfg,
        "gram_convention": GRAM_CONVENTION,
        "final_train_loss": log.records[-1].train_loss if log.records else None,
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(f"trained {cfg['model']['kind']} for {tcfg.iterations} iterations; "
          f"checkpoint at {out_dir / 'model.ckpt'}")
    return 0


def _tuned_family_report(name, family_fn, test, grid, metrics, detection):
    """Per-metric best alpha for a shrinkage family, test-set tuned (the
    evaluation protocol baselines are granted; reported as such)."""
    per_alpha = {}
    for alpha in grid.alphas:
        est = trainer.Estimator(
            name=f"{name}[alpha={alpha}]",
            kind="covariance",
            fn=lambda pair, a=alpha: family_fn(pair, a),
        )
        per_alpha[alpha] = trainer.evaluate(est, test, metrics=metrics, detection=detection)
    row = {"name": f"{name}(tuned)", "n_windows": len(test)}
    tuned_alphas = {}
    curve = None
    for metric in metrics:
        sense = baselines.METRIC_SENSE.get(metric, "min")
        scored = {a: getattr(rep, metric) for a, rep in per_alpha.items()
                  if getattr(rep, metric) is not None}
        if not scored:
            row[metric] = None
            continue
        best_alpha = _best_alpha(scored, sense)
        row[metric] = scored[best_alpha]
        tuned_alphas[metric] = best_alpha
        if metric == "pauc01":
            row["pauc_raw"] = per_alpha[best_alpha].pauc_raw
            curve = per_alpha[best_alpha].roc
    row["tuned_alphas"] = tuned_alphas
    return row, curve


def _best_alpha(scored: dict, sense: str) -> float:
    best = None
    best_score = None
    for alpha in sorted(scored):
        score = scored[alpha]
        if best is None:
            best, best_score = alpha, score
            continue
        better = score >= best_score if sense == "max" else score <= best_score
        if better:
            best, best_score = alpha, score
    return best


def cmd_eval(args) -> int:
    cfg = _merge_config(EVAL_DEFAULTS, _load_config_file(args.config))
    if args.data is not None:
        cfg["data"] = args.data
    if args.checkpoint:
        cfg["checkpoints"] = list(args.checkpoint)
    if args.baselines is not None:
        cfg["baselines"] = [b for b in args.baselines.split(",") if b]
    if args.seed is not None:
        cfg["detection"]["seed"] = args.seed
    if cfg["data"] is None:
        raise ValidationError("eval needs a dataset (--data)")
    known = {"rscm", "ka", "scm", "atom", "oracle"}
    unknown = set(cfg["baselines"]) - known
    if unknown:
        raise ValidationError(f"unknown baselines: {sorted(unknown)}")

    test, _ = synthetic.read_dataset(cfg["data"])
    metrics = tuple(cfg["metrics"])
    has_truth = all(p.truth is not None for p in test)
    if "mse" in metrics and not has_truth:
        metrics = tuple(m for m in metrics if m != "mse")
    detection = None
    if "err" in metrics or "pauc01" in metrics:
        detection = trainer.DetectionConfig(**cfg["detection"])
    grid = baselines.ShrinkageGrid(tuple(cfg["grid"]))

    out_dir = Path(args.out or "eval_out")
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    curves = {}
    timing = {}

    for path in cfg["checkpoints"]:
        model, header = load_checkpoint(path)
        name = f"{header['kind']}:{Path(path).stem}"
        rep = trainer.evaluate(trainer.Estimator.from_model(model, name), test,
                               metrics=metrics, detection=detection)
        rows.append(rep.metric_row())
        timing[name] = rep.timing
        if rep.roc is not None:
            curves[name] = rep.roc

    gscm = None
    if "ka" in cfg["baselines"]:
        if cfg["train_data"] is None:
            raise ValidationError("the ka baseline needs --config train_data for its global covariance")
        train_pairs, _ = synthetic.read_dataset(cfg["train_data"])
        gscm = baselines.global_scm(train_pairs)

    for base in cfg["baselines"]:
        if base == "scm":
            est = trainer.Estimator("scm", "covariance", lambda p: baselines.scm(p.features))
            rep = trainer.evaluate(est, test, metrics=metrics, detection=detection)
            rows.append(rep.metric_row())
            timing["scm"] = rep.timing
        elif base == "oracle":
            if not has_truth:
                raise ValidationError("oracle baseline needs ground-truth covariances")
            est = trainer.Estimator("oracle", "covariance", baselines.oracle_estimator)
            rep = trainer.evaluate(est, test, metrics=metrics, detection=detection)
            rows.append(rep.metric_row())
            timing["oracle"] = rep.timing
            if rep.roc is not None:
                curves["oracle"] = rep.roc
        elif base == "atom":
            acfg = cfg["atom"]
            est = trainer.Estimator(
                "atom", "covariance",
                lambda p: baselines.toeplitz_ap(p.features, max_iters=acfg["max_iters"],
                                                tol=acfg["tol"]).matrix,
            )
            rep = trainer.evaluate(est, test, metrics=metrics, detection=detection)
            rows.append(rep.metric_row())
            timing["atom"] = rep.timing
        elif base == "rscm":
            row, curve = _tuned_family_report(
                "rscm", lambda p, a: baselines.rscm(p.features, a), test, grid, metrics, detection)
            rows.append(row)
            if curve is not None:
                curves["rscm"] = curve
        elif base == "ka":
            row, curve = _tuned_family_report(
                "ka", lambda p, a: baselines.ka_shrink(p.features, a, gscm), test, grid,
                metrics, detection)
            rows.append(row)
            if curve is not None:
                curves["ka"] = curve

    rows.sort(key=lambda r: r["name"])
    payload = {
        "format": "selfcov-metrics",
        "version": 1,
        "config": cfg,
        "gram_convention": GRAM_CONVENTION,
        "n_windows": len(test),
        "results": rows,
    }
    _write_json(out_dir / "metrics.json", payload)
    _write_json(out_dir / "metrics_timing.json", {"timing": timing})
    for name, curve in curves.items():
        safe = name.replace(":", "_").replace("/", "_")
        write_roc_csv(out_dir / f"roc_{safe}.csv", curve)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    print(f"metrics written to {out_dir / 'metrics.json'}")
    return 0


def cmd_roc(args) -> int:
    cfg = _merge_config(ROC_DEFAULTS, _load_config_file(args.config))
    if args.data is not None:
        cfg["data"] = args.data
    if args.checkpoint is not None:
        cfg["checkpoint"] = args.checkpoint
    if args.baseline is not None:
        cfg["baseline"] = args.baseline
    if args.seed is not None:
        cfg["detection"]["seed"] = args.seed
    if cfg["data"] is None:
        raise ValidationError("roc needs a dataset (--data)")
    if (cfg["checkpoint"] is None) == (cfg["baseline"] is None):
        raise ValidationError("roc needs exactly one of checkpoint or baseline")

    test, _ = synthetic.read_dataset(cfg["data"])
    detection = trainer.DetectionConfig(**cfg["detection"])
    if cfg["checkpoint"] is not None:
        model, header = load_checkpoint(cfg["checkpoint"])
        est = trainer.Estimator.from_model(model, header["kind"])
    else:
        name = cfg["baseline"]
        alpha = cfg["alpha"]
        if name == "rscm":
            est = trainer.Estimator("rscm", "covariance", lambda p: baselines.rscm(p.features, alpha))
        elif name == "scm":
            est = trainer.Estimator("scm", "covariance", lambda p: baselines.scm(p.features))
        elif name == "oracle":
            est = trainer.Estimator("oracle", "covariance", baselines.oracle_estimator)
        else:
            raise ValidationError(f"unknown baseline {name!r} for roc")
    rep = trainer.evaluate(est, test, metrics=("err", "pauc01"), detection=detection)
    out_dir = Path(args.out or "roc_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_roc_csv(out_dir / "roc.csv", rep.roc)
    summary = {
        "format": "selfcov-roc-summary",
        "version": 1,
        "config": cfg,
        "gram_convention": GRAM_CONVENTION,
        "estimator": est.name,
        "pauc01": rep.pauc01,
        "pauc_raw": rep.pauc_raw,
        "err": rep.err,
        "counts": {"h0": rep.n_windows, "h1": rep.n_windows},
    }
    _write_json(out_dir / "summary.json", summary)
    print(f"pauc01={rep.pauc01:.4f} (raw {rep.pauc_raw:.5f}); wrote {out_dir / 'roc.csv'}")
    return 0


def cmd_ka_verify(args) -> int:
    cfg = _merge_config(KA_VERIFY_DEFAULTS, _load_config_file(args.config))
    for key in ("nu", "dim", "window", "iterations", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["nu"] <= cfg["dim"] + 1:
        raise ValidationError(f"nu must exceed dim + 1, got nu={cfg['nu']} dim={cfg['dim']}")

    data_cfg = synthetic.KaConfig(dim=cfg["dim"], window=cfg["window"], nu=cfg["nu"],
                                  seed=cfg["data_seed"])
    model = KnowledgeAidedModel.initialize(
        KnowledgeAidedConfig(dim=cfg["dim"], window=cfg["window"]))
    tcfg = trainer.TrainConfig(iterations=cfg["iterations"], seed=cfg["seed"],
                               eval_period=max(cfg["iterations"] // 10, 1),
                               checkpoint_period=0)
    trainer.train(model, synthetic.environment_stream(data_cfg), tcfg)

    a_target, alpha_target = synthetic.ka_closed_form(cfg["nu"], cfg["window"], cfg["dim"],
                                                      data_cfg.scale)
    a_learned = model.prior_matrix
    alpha_learned = model.scatter_weight
    a_rel = float(np.sqrt(np.sum(np.abs(a_learned - a_target) ** 2)
                          / np.sum(np.abs(a_target) ** 2)))
    alpha_rel = abs(alpha_learned - alpha_target) / alpha_target
    report = {
        "format": "selfcov-ka-verify",
        "version": 1,
        "config": cfg,
        "gram_convention": GRAM_CONVENTION,
        "alpha_learned": alpha_learned,
        "alpha_target": alpha_target,
        "alpha_rel_error": alpha_rel,
        "prior_rel_frobenius_error": a_rel,
    }
    out_dir = Path(args.out or "ka_verify_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "report.json", report)
    print(f"alpha: learned {alpha_learned:.5f} target {alpha_target:.5f} "
          f"(rel {alpha_rel:.3%}); prior rel Frobenius {a_rel:.3%}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfcov",
                                     description="self-supervised covariance estimation runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    p.add_argument("--config")
    p.add_argument("--kind", choices=["clutter", "ka"])
    p.add_argument("--n-envs", type=int, dest="n_envs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset or stream")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--resume", help="continue from a checkpoint with optimizer state")
    p.add_argument("--iterations", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--paper", action="store_true", help="shorthand for --preset paper")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints and baselines on a dataset")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--baselines")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="emit the ROC curve for one estimator")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("ka-verify", help="compare trained global (A, alpha) to the closed form")
    p.add_argument("--config")
    p.add_argument("--nu", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ka_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceDetected as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
