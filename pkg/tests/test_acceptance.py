"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured numbers.

The heavyweight criteria (the synthetic-table reproduction and the
consistency trend) train real models at desk scale; expect the full module
to take tens of minutes on a laptop CPU. Tolerances are fixed here, not
calibrated at runtime.
"""

import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from selfcov import baselines, linalg
from selfcov.autodiff import check_gradient
from selfcov.downstream import TargetSpec, anmf, roc, run_detection, wls_amplitude
from selfcov.loss import nll_covariance_param, nll_inverse_param
from selfcov.model import (
    AttentionConfig,
    AttentionModel,
    KnowledgeAidedConfig,
    KnowledgeAidedModel,
    load_checkpoint,
    save_checkpoint,
)
from selfcov.synthetic import (
    KaConfig,
    SyntheticConfig,
    environment_stream,
    gen_steering,
    ka_closed_form,
    read_dataset,
    write_dataset,
)
from selfcov.trainer import DetectionConfig, Estimator, TrainConfig, evaluate, train
from selfcov.windows import DataMap, WindowSpec, extract, load_map, save_map

from test_loss import minimize_expected_loss

# Detection operating point: target off the clutter grid, amplitude calibrated
# once so the oracle's normalized partial AUC sits near 0.78 on the synthetic
# configuration below (recorded, not re-tuned per run).
TARGET_OMEGA = 2.0 * np.pi * 1.5 / 7.0
TARGET_AMPLITUDE = 0.43

SYNTH = SyntheticConfig(dim=6, window=20, n_freqs=5, dirichlet_alpha=0.1,
                        amp_max=2.0, noise_var=0.1, n_envs=1, seed=42)

TABLE_TRAIN = TrainConfig(iterations=20000, seed=3, eval_period=4000, checkpoint_period=0)
TABLE_MODEL_SEED = 7
TABLE_EVAL_WINDOWS = 2500


def announce(criterion, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"\n[{status}] criterion {criterion}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_criterion_1_loss_oracle_equivalence():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 9))
        s = linalg.gram(crandn(rng, d, d)) + 0.5 * np.eye(d)
        z = crandn(rng, d)
        dense = float(np.real(np.conj(z) @ s @ z)) - float(
            np.sum(np.log(np.linalg.eigvalsh(s)))
        )
        got = nll_inverse_param(z, s).value
        worst = max(worst, abs(got - dense) / max(abs(dense), 1.0))
    announce(1, worst < 1e-10, f"max relative deviation {worst:.3e} over 100 draws")


def test_criterion_2_gradient_correctness():
    cfg = AttentionConfig(dim=4, hidden_layers=3, width=8, depth=2, towers=2)
    model = AttentionModel.initialize(cfg, seed=11)
    rng = np.random.default_rng(102)
    window = crandn(rng, 6, 4)
    label = crandn(rng, 4)

    def build_loss(params):
        tape, node = AttentionModel(cfg, params).loss_tape(window, label)
        return float(node.value)

    tape, node = model.loss_tape(window, label)
    grads = tape.backward(node)
    names = sorted(grads)

    from selfcov.autodiff import finite_difference

    coords = []
    skipped = 0
    while len(coords) < 50:
        nm = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in model.params[nm].shape)
        comp = "real" if rng.random() < 0.5 else "imag"
        # central differences are invalid across an activation kink; a
        # coordinate is testable only when two step sizes agree
        fd1 = finite_difference(build_loss, model.params, nm, idx, comp, step=1e-5)
        fd2 = finite_difference(build_loss, model.params, nm, idx, comp, step=1.25e-6)
        if abs(fd1 - fd2) > 2e-5 * (1.0 + abs(fd1)):
            skipped += 1
            assert skipped < 100, "too many kink-adjacent coordinates"
            continue
        coords.append((nm, idx, comp))
    worst = check_gradient(build_loss, model.params, grads, coords, step=1e-5, rtol=1e-4)
    announce(2, worst <= 1e-4,
             f"50 coordinates, worst relative error {worst:.3e} "
             f"({skipped} kink-adjacent draws redrawn)")


def test_criterion_3_conditional_moment_recovery():
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(2):  # two discrete states, one recovery problem each
        d = int(rng.integers(2, 4))
        sigma = linalg.gram(crandn(rng, d, d)) + 0.5 * np.eye(d)
        s_star = minimize_expected_loss(sigma)
        recovered = linalg.inverse_hpd(s_star)
        rel = float(np.sqrt(np.sum(np.abs(recovered - sigma) ** 2)
                            / np.sum(np.abs(sigma) ** 2)))
        worst = max(worst, rel)
    announce(3, worst < 1e-6, f"worst conditional-moment recovery error {worst:.3e}")


def test_criterion_4_knowledge_aided_closed_form():
    nu, d, window = 10, 4, 20
    data_cfg = KaConfig(dim=d, window=window, nu=nu, seed=104)
    model = KnowledgeAidedModel.initialize(KnowledgeAidedConfig(dim=d, window=window))
    cfg = TrainConfig(iterations=50000, seed=7, eval_period=10000, checkpoint_period=0)
    train(model, environment_stream(data_cfg), cfg)
    a_target, alpha_target = ka_closed_form(nu, window, d, data_cfg.scale)
    alpha_rel = abs(model.scatter_weight - alpha_target) / alpha_target
    a_rel = float(np.sqrt(np.sum(np.abs(model.prior_matrix - a_target) ** 2)
                          / np.sum(np.abs(a_target) ** 2)))
    announce(4, alpha_rel < 0.10 and a_rel < 0.10,
             f"alpha rel err {alpha_rel:.3%} (target 0.04), prior rel err {a_rel:.3%}")


def test_criterion_5_consistency_trend():
    nu, d = 10, 4
    heldout_n = 3000
    results = {}
    for window in (20, 50, 200):
        data_cfg = KaConfig(dim=d, window=window, nu=nu, seed=105)
        model = KnowledgeAidedModel.initialize(KnowledgeAidedConfig(dim=d, window=window))
        cfg = TrainConfig(iterations=30000, seed=8, eval_period=10000, checkpoint_period=0)
        train(model, environment_stream(data_cfg), cfg)
        heldout_stream = environment_stream(
            KaConfig(dim=d, window=window, nu=nu, seed=9105), stream_id=1)
        model_nll = []
        oracle_nll = []
        for _ in range(heldout_n):
            pair = next(heldout_stream)
            model_nll.append(nll_covariance_param(pair.label, model.forward(pair.features)).value)
            oracle_nll.append(nll_covariance_param(pair.label, pair.truth).value)
        results[window] = (float(np.mean(model_nll)), float(np.mean(oracle_nll)))
    n20, n50, n200 = results[20][0], results[50][0], results[200][0]
    oracle200 = results[200][1]
    monotone = n20 >= n50 >= n200
    gap = abs(n200 - oracle200) / abs(oracle200)
    announce(5, monotone and gap < 0.05,
             f"held-out NLL {n20:.4f} >= {n50:.4f} >= {n200:.4f}, "
             f"|E|=200 gap to oracle {gap:.3%}")


@pytest.fixture(scope="module")
def trained_table_model():
    model = AttentionModel.initialize(AttentionConfig(dim=SYNTH.dim), seed=TABLE_MODEL_SEED)
    train(model, environment_stream(SYNTH), TABLE_TRAIN)
    return model


@pytest.fixture(scope="module")
def table_reports(trained_table_model):
    test_stream = environment_stream(replace(SYNTH, seed=900), 1)
    test = [next(test_stream) for _ in range(TABLE_EVAL_WINDOWS)]
    train_stream = environment_stream(replace(SYNTH, seed=43), 2)
    train_pairs = [next(train_stream) for _ in range(1000)]
    gscm = baselines.global_scm(train_pairs)
    detection = DetectionConfig(omega=TARGET_OMEGA, amplitude=TARGET_AMPLITUDE,
                                detector="amf", seed=77)
    grid = baselines.ShrinkageGrid.default()

    reports = {}
    reports["ssce"] = evaluate(Estimator.from_model(trained_table_model, "ssce"),
                               test, detection=detection)
    reports["oracle"] = evaluate(Estimator("oracle", "covariance", baselines.oracle_estimator),
                                 test, detection=detection)
    reports["scm"] = evaluate(Estimator("scm", "covariance", lambda p: baselines.scm(p.features)),
                              test, detection=detection)

    def tuned(name, family):
        best = {}
        for alpha in grid.alphas:
            est = Estimator(f"{name}:{alpha}", "covariance", lambda p, a=alpha: family(p, a))
            rep = evaluate(est, test, detection=detection)
            for metric, sense in (("mse", "min"), ("nll", "min"),
                                  ("err", "min"), ("pauc01", "max")):
                val = getattr(rep, metric)
                if metric not in best:
                    best[metric] = val
                else:
                    best[metric] = (max if sense == "max" else min)(best[metric], val)
        return best

    reports["rscm"] = tuned("rscm", lambda p, a: baselines.rscm(p.features, a))
    reports["ka"] = tuned("ka", lambda p, a: baselines.ka_shrink(p.features, a, gscm))
    return reports


def test_criterion_6_table_reproduction(table_reports):
    s = table_reports["ssce"]
    o = table_reports["oracle"]
    rscm = table_reports["rscm"]
    ka = table_reports["ka"]
    checks = {
        "nll(ssce) < nll(rscm)": s.nll < rscm["nll"],
        "nll(ssce) < nll(ka)": s.nll < ka["nll"],
        "mse(ssce) < mse(rscm)": s.mse < rscm["mse"],
        "pauc(ssce) >= pauc(rscm)": s.pauc01 >= rscm["pauc01"],
        "pauc within 0.03 of oracle": o.pauc01 - s.pauc01 <= 0.03,
        "err(ssce) <= 1.2 err(oracle)": s.err <= 1.2 * o.err,
    }
    detail = (
        f"ssce nll {s.nll:.4f} mse {s.mse:.4f} err {s.err:.5f} pauc {s.pauc01:.4f} | "
        f"rscm nll {rscm['nll']:.4f} mse {rscm['mse']:.4f} pauc {rscm['pauc01']:.4f} | "
        f"ka nll {ka['nll']:.4f} | oracle pauc {o.pauc01:.4f} err {o.err:.5f} | "
        f"failed: {[k for k, v in checks.items() if not v] or 'none'}"
    )
    announce(6, all(checks.values()), detail)


def test_criterion_7_oracle_dominates(table_reports):
    o = table_reports["oracle"]
    others = {
        "ssce": table_reports["ssce"].pauc01,
        "scm": table_reports["scm"].pauc01,
        "rscm": table_reports["rscm"]["pauc01"],
        "ka": table_reports["ka"]["pauc01"],
    }
    is_max = all(o.pauc01 >= v for v in others.values())
    announce(7, o.mse == 0.0 and is_max,
             f"oracle mse {o.mse}, oracle pauc {o.pauc01:.4f} vs "
             + ", ".join(f"{k} {v:.4f}" for k, v in others.items()))


def test_criterion_8_property_suite(tmp_path):
    rng = np.random.default_rng(108)
    failures = []

    # model permutation invariance and positive definiteness
    cfg = AttentionConfig(dim=4, hidden_layers=1, width=6, depth=2, towers=2)
    model = AttentionModel.initialize(cfg, seed=21)
    window = crandn(rng, 9, 4)
    s_ref = model.forward(window)
    for _ in range(20):
        s_perm = model.forward(window[rng.permutation(9)])
        if np.sqrt(np.sum(np.abs(s_perm - s_ref) ** 2)) > 1e-10 * np.sqrt(np.sum(np.abs(s_ref) ** 2)):
            failures.append("permutation invariance")
            break
    min_eig = min(
        float(np.linalg.eigvalsh(model.forward(crandn(rng, int(rng.integers(2, 12)), 4))).min())
        for _ in range(1000)
    )
    if min_eig < cfg.ridge - 1e-12:
        failures.append(f"positive definiteness (min eig {min_eig:.2e})")

    # softmax row sums
    _, maps = model.forward(window, return_attention=True)
    if any(np.abs(w.sum(axis=-1) - 1.0).max() > 1e-12 for w in maps):
        failures.append("softmax row sums")

    # ROC invariance under a common positive scaling of every estimate
    stream = environment_stream(SyntheticConfig(dim=4, window=8, n_envs=1, seed=208))
    pairs = [next(stream) for _ in range(100)]
    precisions = [linalg.inverse_hpd(p.truth) for p in pairs]
    spec = TargetSpec(omega=0.9, amplitude=0.6)
    r1 = run_detection(pairs, lambda i, p: precisions[i], spec, seed=6)
    r2 = run_detection(pairs, lambda i, p: 3.3 * precisions[i], spec, seed=6)
    c1, c2 = roc(r1.scores_h0, r1.scores_h1), roc(r2.scores_h0, r2.scores_h1)
    if not (np.allclose(c1.fpr, c2.fpr) and np.allclose(c1.tpr, c2.tpr)):
        failures.append("ROC scaling invariance")

    # normalized matched filter bounded in [0, 1]
    for _ in range(2000):
        prec = linalg.gram(crandn(rng, 3, 3)) + 0.3 * np.eye(3)
        score = anmf(crandn(rng, 3), crandn(rng, 3), prec)
        if not 0.0 <= score <= 1.0 + 1e-12:
            failures.append("anmf range")
            break

    # noiseless amplitude identity
    prec = linalg.gram(crandn(rng, 5, 5)) + np.eye(5)
    steer = gen_steering(0.7, 0.2, 5)
    if abs(wls_amplitude((1.3 - 0.4j) * steer, steer, prec) - (1.3 - 0.4j)) > 1e-10:
        failures.append("wls noiseless identity")

    # alternating projections land in both constraint sets
    for _ in range(50):
        res = baselines.toeplitz_ap(crandn(rng, 10, 5), max_iters=500, tol=1e-10)
        out = res.matrix
        if np.sqrt(np.sum(np.abs(out - baselines.toeplitz_project(out)) ** 2)) > 1e-8:
            failures.append("toeplitz structure")
            break
        if np.linalg.eigvalsh(out).min() < -1e-8:
            failures.append("toeplitz psd")
            break

    # guard exclusion, exhaustive on a small indexed map
    entries = (np.arange(11)[:, None] + 1j * np.arange(6)[None, :]).astype(np.complex128)
    for pair in extract(DataMap(entries=entries), WindowSpec(d=2, guard=1, half_width=2,
                                                             stride_time=1)):
        label_row = int(pair.label.real[0])
        rows = {int(v) for v in pair.features.real[:, 0]}
        if rows & {label_row - 1, label_row, label_row + 1}:
            failures.append("guard exclusion")
            break

    # dataset and checkpoint round trips
    stream = environment_stream(SyntheticConfig(dim=4, window=6, n_envs=1, seed=209))
    pairs = [next(stream) for _ in range(8)]
    dpath = tmp_path / "roundtrip.bin"
    write_dataset(dpath, pairs)
    loaded, _ = read_dataset(dpath)
    if not all(np.array_equal(a.label, b.label) and np.array_equal(a.features, b.features)
               and np.array_equal(a.truth, b.truth) for a, b in zip(pairs, loaded)):
        failures.append("dataset round trip")
    cpath = tmp_path / "roundtrip.ckpt"
    save_checkpoint(cpath, model, iteration=1)
    reloaded, _ = load_checkpoint(cpath)
    if not all(np.array_equal(model.params[k], reloaded.params[k]) for k in model.params):
        failures.append("checkpoint round trip")

    # normalized matched filter pipeline on a synthetic data map
    mpath = tmp_path / "map.bin"
    save_map(mpath, DataMap(entries=crandn(rng, 24, 16)))
    map_pairs = extract(load_map(mpath), WindowSpec(d=4, guard=1, half_width=4))
    det = run_detection(map_pairs, lambda i, p: linalg.inverse_hpd(
        baselines.rscm(p.features, 0.2)), TargetSpec(omega=0.8, amplitude=1.0), seed=3,
        detector="anmf")
    curve = roc(det.scores_h0, det.scores_h1)
    if not 0.0 <= curve.pauc01 <= 1.0:
        failures.append("map anmf pipeline")

    announce(8, not failures, f"failed properties: {failures or 'none'}")


def test_criterion_9_pipeline_determinism(tmp_path):
    # the full pipeline runs twice in sibling work directories with identical
    # relative paths, so every embedded config is identical and the emitted
    # metrics must match byte for byte
    train_cfg_payload = json.dumps({
        "model": {"kind": "attention", "dim": 6, "hidden_layers": 1, "width": 6,
                  "depth": 1, "towers": 2, "init_seed": 4},
        "train": {"iterations": 1000, "seed": 5, "eval_period": 500,
                  "checkpoint_period": 0},
    })
    eval_cfg_payload = json.dumps({
        "baselines": ["rscm", "scm", "oracle"],
        "grid": [0.0, 0.5, 1.0],
        "detection": {"amplitude": 0.43, "seed": 6},
    })

    def cli(cwd, *argv):
        proc = subprocess.run([sys.executable, "-m", "selfcov.cli", *argv],
                              capture_output=True, text=True, cwd=cwd)
        assert proc.returncode == 0, proc.stderr
        return proc

    artifacts = {}
    for run_id in ("r1", "r2"):
        work = tmp_path / run_id
        work.mkdir()
        (work / "train_cfg.json").write_text(train_cfg_payload)
        (work / "eval_cfg.json").write_text(eval_cfg_payload)
        cli(work, "gen", "--kind", "clutter", "--n-envs", "80", "--seed", "12",
            "--out", "data.bin")
        cli(work, "train", "--config", "train_cfg.json", "--data", "data.bin",
            "--out", "train_out")
        cli(work, "eval", "--config", "eval_cfg.json", "--data", "data.bin",
            "--checkpoint", "train_out/model.ckpt", "--out", "eval_out")
        artifacts[run_id] = {
            "dataset": (work / "data.bin").read_bytes(),
            "checkpoint": (work / "train_out" / "model.ckpt").read_bytes(),
            "metrics": (work / "eval_out" / "metrics.json").read_bytes(),
        }
    same = {k: artifacts["r1"][k] == artifacts["r2"][k] for k in artifacts["r1"]}
    announce(9, all(same.values()),
             f"byte-identical artifacts across reruns: {same}")
