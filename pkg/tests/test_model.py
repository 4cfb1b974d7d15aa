"""Architecture contracts: output shape/PD, permutation invariance, the
independent straight-line forward oracle, initialization statistics, and
checkpoint round-trips."""

import numpy as np
import pytest

from selfcov import linalg, loss
from selfcov.errors import ParseError
from selfcov.model import (
    AttentionConfig,
    AttentionModel,
    KnowledgeAidedConfig,
    KnowledgeAidedModel,
    load_checkpoint,
    save_checkpoint,
)

SMALL = AttentionConfig(dim=4, hidden_layers=2, width=6, depth=2, towers=3, ridge=1e-6)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def frob(a):
    return float(np.sqrt(np.sum(np.abs(a) ** 2)))


class TestAttentionForward:
    def test_output_contract(self):
        rng = np.random.default_rng(0)
        m = AttentionModel.initialize(SMALL, seed=1)
        s = m.forward(crandn(rng, 9, 4))
        assert s.shape == (4, 4)
        assert np.abs(s - s.conj().T).max() <= 1e-13 * max(np.abs(s).max(), 1.0)
        assert np.linalg.eigvalsh(s).min() >= SMALL.ridge - 1e-12

    def test_positive_definite_many_windows(self):
        rng = np.random.default_rng(5)
        m = AttentionModel.initialize(SMALL, seed=2)
        for _ in range(200):
            n = int(rng.integers(1, 12))
            eigs = np.linalg.eigvalsh(m.forward(crandn(rng, n, 4)))
            assert eigs.min() >= SMALL.ridge - 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        m = AttentionModel.initialize(SMALL, seed=3)
        w = crandn(rng, 8, 4)
        s = m.forward(w)
        for _ in range(10):
            perm = rng.permutation(8)
            sp = m.forward(w[perm])
            assert frob(sp - s) <= 1e-10 * frob(s)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        m = AttentionModel.initialize(SMALL, seed=4)
        _, maps = m.forward(crandn(rng, 7, 4), return_attention=True)
        assert len(maps) == SMALL.depth
        for weights in maps:
            assert weights.shape == (SMALL.towers, 7, 7)
            assert np.abs(weights.sum(axis=-1) - 1.0).max() <= 1e-12

    def test_wrong_dimension_rejected(self):
        m = AttentionModel.initialize(SMALL, seed=0)
        with pytest.raises(ValueError):
            m.forward(np.ones((5, 3), dtype=np.complex128))

    def test_tape_matches_inference_path(self):
        # the training graph and the plain-numpy forward are separate code
        # paths; they must agree on the loss value
        rng = np.random.default_rng(11)
        m = AttentionModel.initialize(SMALL, seed=6)
        w = crandn(rng, 6, 4)
        z = crandn(rng, 4)
        tape, node = m.loss_tape(w, z)
        straight = loss.nll_inverse_param(z, m.forward(w)).value
        assert float(node.value) == pytest.approx(straight, rel=1e-12, abs=1e-12)

    def test_straight_line_oracle_single_tower(self):
        # fully independent reimplementation with explicit loops, P=1 L=1 h=1
        cfg = AttentionConfig(dim=3, hidden_layers=1, width=4, depth=1, towers=1)
        m = AttentionModel.initialize(cfg, seed=9)
        rng = np.random.default_rng(13)
        w = crandn(rng, 5, 3)

        def embed(x, role):
            y = x @ m.params[f"l1.{role}.w0"][0] + m.params[f"l1.{role}.b0"][0]
            y = np.maximum(y.real, 0) + 1j * np.maximum(y.imag, 0)
            return y @ m.params[f"l1.{role}.w1"][0] + m.params[f"l1.{role}.b1"][0]

        q, k, v = embed(w, "query"), embed(w, "key"), embed(w, "value")
        logits = np.abs(q @ k.conj().T) / np.sqrt(3.0)
        weights = np.zeros_like(logits)
        for r in range(5):
            e = np.exp(logits[r] - logits[r].max())
            weights[r] = e / e.sum()
        x_out = weights @ v
        s_expected = np.zeros((3, 3), dtype=np.complex128)
        for r in range(5):
            s_expected += np.outer(x_out[r], np.conj(x_out[r]))
        s_expected = s_expected / 5 + cfg.ridge * np.eye(3)
        assert np.allclose(m.forward(w), s_expected, atol=1e-12)


class TestKnowledgeAided:
    def test_identity_when_scatter_weight_zero(self):
        rng = np.random.default_rng(1)
        m = KnowledgeAidedModel.initialize(KnowledgeAidedConfig(dim=3, window=5))
        m.params["log_alpha"] = np.asarray(-np.inf)  # alpha -> 0 limit
        w = crandn(rng, 5, 3)
        assert np.allclose(m.forward(w), np.eye(3), atol=1e-12)

    def test_scm_reduction_when_prior_vanishes(self):
        rng = np.random.default_rng(2)
        cfg = KnowledgeAidedConfig(dim=3, window=6, floor=1e-6)
        m = KnowledgeAidedModel.initialize(cfg)
        m.params["b_factor"] = np.zeros((3, 3), dtype=np.complex128)
        m.params["log_alpha"] = np.asarray(np.log(1.0 / 6.0))
        w = crandn(rng, 6, 3)
        scm = linalg.gram(w) / 6.0
        assert np.allclose(m.forward(w), scm + cfg.floor * np.eye(3), atol=1e-12)

    def test_brute_force_accumulation(self):
        rng = np.random.default_rng(3)
        cfg = KnowledgeAidedConfig(dim=4, window=7)
        m = KnowledgeAidedModel.initialize(cfg)
        m.params["b_factor"] = crandn(rng, 4, 4)
        m.params["log_alpha"] = np.asarray(-0.7)
        w = crandn(rng, 7, 4)
        expected = m.prior_matrix.copy()
        alpha = np.exp(-0.7)
        for row in w:
            expected += alpha * np.outer(row, np.conj(row))
        assert frob(m.forward(w) - expected) <= 1e-12 * frob(expected)

    def test_affine_in_scatter(self):
        # doubling the scatter weight doubles the scatter term exactly
        # (x -> 2x is exact in binary fp); C - A doubles to rounding
        rng = np.random.default_rng(4)
        cfg = KnowledgeAidedConfig(dim=3, window=5)
        m = KnowledgeAidedModel.initialize(cfg)
        m.params["b_factor"] = crandn(rng, 3, 3)
        w = crandn(rng, 5, 3)
        alpha = m.scatter_weight
        scatter = linalg.gram(w)
        assert np.array_equal(2.0 * alpha * scatter, 2.0 * (alpha * scatter))
        a = m.prior_matrix
        c1 = m.forward(w)
        c2 = a + (2.0 * alpha) * scatter
        assert np.allclose(c2 - a, 2.0 * (c1 - a), rtol=1e-14, atol=1e-14)

    def test_starts_at_identity_and_inverse_window(self):
        cfg = KnowledgeAidedConfig(dim=5, window=20)
        m = KnowledgeAidedModel.initialize(cfg)
        assert np.allclose(m.prior_matrix, np.eye(5), atol=1e-12)
        assert m.scatter_weight == pytest.approx(1.0 / 20.0, rel=1e-12)


class TestInitialization:
    def test_deterministic_given_seed(self):
        m1 = AttentionModel.initialize(SMALL, seed=42)
        m2 = AttentionModel.initialize(SMALL, seed=42)
        for name in m1.params:
            assert np.array_equal(m1.params[name], m2.params[name])

    def test_different_seeds_differ(self):
        m1 = AttentionModel.initialize(SMALL, seed=1)
        m2 = AttentionModel.initialize(SMALL, seed=2)
        assert any(not np.array_equal(m1.params[n], m2.params[n]) for n in m1.params)

    def test_weight_variance_matches_fan_in(self):
        cfg = AttentionConfig(dim=6, hidden_layers=3, width=50, depth=1, towers=10)
        m = AttentionModel.initialize(cfg, seed=0)
        w = m.params["l1.query.w1"]  # fan-in 50, 25000 complex entries
        assert w.size >= 10000
        for comp in (w.real, w.imag):
            assert np.var(comp) == pytest.approx(1.0 / 50.0, rel=0.10)
            assert abs(np.mean(comp)) < 0.005

    def test_biases_zero(self):
        m = AttentionModel.initialize(SMALL, seed=3)
        for name, arr in m.params.items():
            if ".b" in name:
                assert not np.any(arr)


class TestCheckpoints:
    def test_round_trip_attention(self, tmp_path):
        rng = np.random.default_rng(6)
        m = AttentionModel.initialize(SMALL, seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m, iteration=17, seed=5)
        loaded, header = load_checkpoint(path)
        assert header["iteration"] == 17
        assert loaded.config == m.config
        for name in m.params:
            assert np.array_equal(loaded.params[name], m.params[name])
        w = crandn(rng, 6, 4)
        assert np.array_equal(loaded.forward(w), m.forward(w))

    def test_round_trip_knowledge_aided(self, tmp_path):
        m = KnowledgeAidedModel.initialize(KnowledgeAidedConfig(dim=3, window=9))
        m.params["log_alpha"] = np.asarray(-2.5)
        path = tmp_path / "ka.ckpt"
        save_checkpoint(path, m, iteration=3)
        loaded, _ = load_checkpoint(path)
        assert loaded.scatter_weight == pytest.approx(np.exp(-2.5), rel=1e-15)

    def test_optimizer_state_round_trip(self, tmp_path):
        m = KnowledgeAidedModel.initialize(KnowledgeAidedConfig(dim=3, window=9))
        opt = {"m": np.arange(20.0), "v": np.ones(20), "t": 7, "consumed": 7}
        path = tmp_path / "opt.ckpt"
        save_checkpoint(path, m, iteration=7, optimizer=opt)
        _, header = load_checkpoint(path)
        state = header["optimizer"]["state"]
        assert state["t"] == 7 and state["consumed"] == 7
        assert np.array_equal(state["m"], opt["m"])
        assert np.array_equal(state["v"], opt["v"])

    def test_truncated_rejected(self, tmp_path):
        m = AttentionModel.initialize(SMALL, seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(ParseError):
            load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(ParseError):
            load_checkpoint(path)
