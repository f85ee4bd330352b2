import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellpoint.features import FeatureConfig, FixedEncoder, extract_pyramid, stack_levels
from cellpoint.synth import render
from cellpoint.tracker import (
    DeterministicOperator,
    LearnedOperator,
    NumericError,
    OperatorShape,
    TokenGrid,
    TrainConfig,
    TrainingDiverged,
    ZeroOperator,
    assemble_tokens,
    deterministic_update,
    initial_state,
    iterate,
    load_operator,
    loss_tra,
    loss_vis,
    save_operator,
    train,
)
from cellpoint.tracker.checkpoint import CheckpointError, read_tensors, write_tensors
from cellpoint.tracker.losses import loss_tra_grad, loss_vis_grad_logits
from cellpoint.tracker.operators import sigmoid
from cellpoint.tracker.tokens import loc_grad_to_L, token_width
from cellpoint.tracker.training import canonical_daughters, learning_rate, window_gradient

from oracles import argmax_offset, bce_loop, tra_loss_loop
from tiny import GRADCHECK_SHAPE, OVERFIT_SHAPE, gradient_check, make_window, perturbed_operator


def _random_tokens(rng, N=3, T=4, dim=5, S=2, delta=1):
    cfg = FeatureConfig(k=4, dim=dim, S=S, delta=delta)
    L = rng.uniform(0, 30, (N, T, 3, 2))
    V = rng.random((N, T, 3))
    F = rng.standard_normal((N, T, dim))
    corr = rng.standard_normal((N, T, S, cfg.window, cfg.window))
    return assemble_tokens(L, V, F, corr, cfg), cfg


class TestTokens:
    def test_width_default_layout(self):
        assert token_width(FeatureConfig(k=4, dim=128, S=4, delta=3), 32) == 365

    def test_constant_locations_give_zero_block(self):
        rng = np.random.default_rng(0)
        tok, cfg = _random_tokens(rng)
        L = np.broadcast_to(rng.uniform(0, 9, (3, 1, 3, 2)), (3, 4, 3, 2))
        tok = assemble_tokens(L, tok.vis, tok.feat, tok.corr, cfg)
        assert np.all(tok.data[..., :6] == 0)
        assert tok.data.shape[-1] == tok.width

    def test_cell_permutation(self):
        rng = np.random.default_rng(1)
        tok, cfg = _random_tokens(rng)
        perm = [2, 0, 1]
        L = rng.uniform(0, 9, (3, 4, 3, 2))
        a = assemble_tokens(L, tok.vis, tok.feat, tok.corr, cfg).data
        b = assemble_tokens(L[perm], tok.vis[perm], tok.feat[perm], tok.corr[perm], cfg).data
        np.testing.assert_array_equal(a[perm], b)

    def test_shape_mismatch(self):
        cfg = FeatureConfig(k=4, dim=4, S=1, delta=1)
        with pytest.raises(ValueError, match="corr"):
            assemble_tokens(np.zeros((1, 2, 3, 2)), np.zeros((1, 2, 3)), np.zeros((1, 2, 4)),
                            np.zeros((1, 2, 1, 5, 5)), cfg)

    def test_loc_adjoint(self):
        rng = np.random.default_rng(2)
        L = rng.standard_normal((2, 5, 3, 2))
        g = rng.standard_normal((2, 5, 6))
        loc = (L - L[:, :1]).reshape(2, 5, 6)
        assert np.sum(loc * g) == pytest.approx(np.sum(L * loc_grad_to_L(g)))


def _blob_levels(xy_per_frame, cfg, size=64, sigma=3.0):
    enc = FixedEncoder(cfg.dim, cfg.k)
    frames = [render(np.array([xy]), np.array([1.0]), (size, size), sigma) for xy in xy_per_frame]
    return stack_levels([extract_pyramid(f, enc, cfg) for f in frames])


class TestIterate:
    def test_zero_operator_is_identity(self):
        cfg = FeatureConfig(k=4, dim=16, S=2, delta=2)
        levels = _blob_levels([(30.0, 30.0)] * 3, cfg)
        L0, V_in, F0 = initial_state(levels, np.array([[30.0, 30.0], [10.0, 50.0]]), cfg)
        W = np.random.default_rng(0).standard_normal((3, 16))
        res = iterate(ZeroOperator(W, np.zeros(3)), levels, L0, V_in, F0, 4, cfg)
        for Lm in res.history_L:
            np.testing.assert_array_equal(Lm, L0)
        F = np.broadcast_to(F0[:, None], (2, 3, 16))
        np.testing.assert_allclose(res.V, 1 / (1 + np.exp(-(F @ W.T))))

    def test_zero_weights_give_half(self):
        cfg = FeatureConfig(k=4, dim=16, S=1, delta=1)
        levels = _blob_levels([(30.0, 30.0)] * 2, cfg)
        res = iterate(ZeroOperator(), levels, *initial_state(levels, np.array([[30.0, 30.0]]), cfg), 1, cfg)
        assert np.all(res.V == 0.5)

    def test_translating_blob(self):
        """A blob moving 1 px/frame: the slot-0 path ends within 0.5 px of
        truth on every frame."""
        cfg = FeatureConfig(k=4, dim=64, S=4, delta=3)
        truth = [(24.0 + t, 30.0 + 0.5 * t) for t in range(8)]
        levels = _blob_levels(truth, cfg)
        L0, V_in, F0 = initial_state(levels, np.array([truth[0]]), cfg)
        res = iterate(DeterministicOperator(k=4), levels, L0, V_in, F0, 4, cfg)
        err = np.linalg.norm(res.L[0, :, 0] - np.array(truth), axis=-1)
        assert err.max() <= 0.5
        assert np.all(res.V[0, :, 0] > 0.5) and np.all(res.V[0, :, 1:] < 0.5)

    def test_non_finite_update(self):
        class Broken(ZeroOperator):
            def apply(self, tokens):
                dL, dF = super().apply(tokens)
                return dL * np.nan, dF

        cfg = FeatureConfig(k=4, dim=8, S=1, delta=1)
        levels = _blob_levels([(30.0, 30.0)] * 2, cfg)
        with pytest.raises(NumericError) as info:
            iterate(Broken(), levels, *initial_state(levels, np.array([[30.0, 30.0]]), cfg), 2, cfg)
        assert info.value.iteration == 1

    def test_m_positive(self):
        cfg = FeatureConfig(k=4, dim=8, S=1, delta=1)
        levels = _blob_levels([(30.0, 30.0)], cfg)
        with pytest.raises(ValueError):
            iterate(ZeroOperator(), levels, *initial_state(levels, np.array([[3.0, 3.0]]), cfg), 0, cfg)


def _tokens_with_corr(corr):
    N, T, S, P, _ = corr.shape
    dim = 2
    cfg = FeatureConfig(k=4, dim=dim, S=S, delta=(P - 1) // 2)
    return assemble_tokens(np.zeros((N, T, 3, 2)), np.zeros((N, T, 3)), np.zeros((N, T, dim)), corr, cfg)


class TestDeterministicUpdate:
    def test_uniform(self):
        dL, dF = deterministic_update(_tokens_with_corr(np.ones((1, 1, 1, 7, 7))))
        assert np.all(dL == 0) and np.all(dF == 0)

    def test_single_max(self):
        c = np.zeros((1, 1, 2, 7, 7))
        c[0, 0, 0, 3 - 1, 3 + 2] = 5.0
        dL, _ = deterministic_update(_tokens_with_corr(c), k=1)
        np.testing.assert_array_equal(dL[0, 0], [[2, -1]] * 3)

    def test_against_scan_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            delta = int(rng.integers(1, 4))
            P = 2 * delta + 1
            # coarse values so ties are frequent
            c = rng.integers(0, 4, (1, 1, 1, P, P)).astype(float)
            dL, _ = deterministic_update(_tokens_with_corr(c), k=4)
            dx, dy = argmax_offset(c[0, 0, 0])
            np.testing.assert_array_equal(dL[0, 0], [[4 * dx, 4 * dy]] * 3)

    def test_search_radius(self):
        c = np.zeros((1, 1, 1, 7, 7))
        c[0, 0, 0, 0, 0] = 9.0
        c[0, 0, 0, 4, 3] = 1.0
        dL, _ = deterministic_update(_tokens_with_corr(c), k=1, radius=1)
        np.testing.assert_array_equal(dL[0, 0, 0], [0, 1])


class TestLosses:
    def test_perfect(self):
        L = np.random.default_rng(0).standard_normal((2, 3, 3, 2))
        assert loss_tra([[L, L]], [L], [np.ones((2, 3, 3))]) == 0

    def test_discounted_example(self):
        gt = np.zeros((1, 1, 3, 2))
        V = np.array([[[1.0, 0.0, 0.0]]])
        e1, e2 = gt.copy(), gt.copy()
        e1[0, 0, 0] = (1.0, 0.0)
        e2[0, 0, 0] = (0.0, 2.0)
        e2[0, 0, 1] = (50.0, 0.0)  # invisible slot: ignored
        assert loss_tra([[e1, e2]], [gt], [V], gamma=0.8) == pytest.approx(2.8, abs=1e-12)

    def test_tra_matches_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            M = int(rng.integers(1, 5))
            gt = rng.standard_normal((3, 4, 3, 2))
            V = (rng.random((3, 4, 3)) > 0.5).astype(float)
            hist = [gt + rng.standard_normal(gt.shape) for _ in range(M)]
            assert abs(loss_tra([hist], [gt], [V], 0.7) - tra_loss_loop(hist, gt, V, 0.7)) <= 1e-8

    def test_vis_values(self):
        y = (np.random.default_rng(2).random((2, 3, 3)) > 0.5).astype(float)
        assert loss_vis([y], [y]) / y.size <= 1e-6
        assert loss_vis([np.full(y.shape, 0.5)], [y]) == pytest.approx(y.size * math.log(2), rel=1e-12)

    def test_vis_matches_loop(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p, y = rng.random((2, 4, 3)), (rng.random((2, 4, 3)) > 0.5).astype(float)
            assert abs(loss_vis([p], [y]) - bce_loop(p, y)) <= 1e-8

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_tra_non_negative_and_zero_iff_exact(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.standard_normal((2, 3, 3, 2))
        V = (rng.random((2, 3, 3)) > 0.3).astype(float)
        hist = [gt + rng.standard_normal(gt.shape) * (rng.random() > 0.5)]
        value = loss_tra([hist], [gt], [V])
        assert value >= 0
        off = np.any(hist[0] != gt, axis=-1) & (V >= 0.5)
        assert (value == 0) == (not off.any())

    def test_gradients_finite_difference(self):
        rng = np.random.default_rng(4)
        gt = rng.standard_normal((2, 3, 3, 2))
        V = (rng.random((2, 3, 3)) > 0.5).astype(float)
        hist = [gt + rng.standard_normal(gt.shape) for _ in range(3)]
        _, grads = loss_tra_grad(hist, gt, V, 0.8)
        h = 1e-6
        for m in range(3):
            for i in np.ndindex(gt.shape):
                old = hist[m][i]
                hist[m][i] = old + h
                up = loss_tra([hist], [gt], [V], 0.8)
                hist[m][i] = old - h
                down = loss_tra([hist], [gt], [V], 0.8)
                hist[m][i] = old
                assert grads[m][i] == pytest.approx((up - down) / (2 * h), abs=1e-6)
        z = rng.standard_normal((2, 3, 3))
        _, gz = loss_vis_grad_logits(z, V)
        np.testing.assert_allclose(gz, 1 / (1 + np.exp(-z)) - V, atol=1e-12)


class TestLearnedOperator:
    def test_cell_permutation_equivariance(self):
        shape = OperatorShape(dim=8, S=2, delta=1, width=16, hidden=16)
        op = perturbed_operator(shape)
        rng = np.random.default_rng(0)
        tok, cfg = _random_tokens(rng, N=4, T=5, dim=8, S=2, delta=1)
        tok = TokenGrid(tok.loc, tok.vis, tok.feat, tok.corr, rng.standard_normal((5, shape.time_dim)))
        perm = [3, 1, 0, 2]
        dL, dF = op.apply(tok)
        pt = TokenGrid(tok.loc[perm], tok.vis[perm], tok.feat[perm], tok.corr[perm], tok.time)
        dLp, dFp = op.apply(pt)
        np.testing.assert_allclose(dLp, dL[perm], atol=1e-12)
        np.testing.assert_allclose(dFp, dF[perm], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1e3, 1e3), st.integers(0, 100))
    def test_visibility_in_open_interval(self, scale, seed):
        op = LearnedOperator(OperatorShape(dim=8, S=1, delta=1, width=8, hidden=8))
        F = np.random.default_rng(seed).standard_normal((2, 3, 8)) * min(abs(scale), 30.0)
        V = sigmoid(op.visibility_logits(F))
        assert np.all((V > 0) & (V < 1))

    def test_gradient_check(self):
        win = make_window(GRADCHECK_SHAPE, jitter=0.3)
        op = perturbed_operator(GRADCHECK_SHAPE)
        errors = gradient_check(op, win, TrainConfig(M=2))
        assert set(errors) == set(op.params)
        assert max(errors.values()) < 1e-3, errors


class TestTraining:
    def test_canonical_daughters(self):
        L = np.zeros((1, 2, 3, 2))
        V = np.array([[[1, 0, 0], [0, 1, 1]]], float)
        L[0, 1, 1], L[0, 1, 2] = (9.0, 0.0), (3.0, 5.0)
        L2, _ = canonical_daughters(L, V)
        np.testing.assert_array_equal(L2[0, 1, 1], (3.0, 5.0))
        np.testing.assert_array_equal(L2[0, 1, 2], (9.0, 0.0))
        V[0, 1, 2] = 0
        L3, _ = canonical_daughters(L, V)
        np.testing.assert_array_equal(L3, L)

    def test_learning_rate_schedule(self):
        lrs = [learning_rate(s, 100, 1.0, 0.05) for s in range(100)]
        assert lrs[4] == 1.0 and lrs[0] == pytest.approx(0.2)
        assert all(a >= b for a, b in zip(lrs[4:], lrs[5:]))
        assert lrs[-1] > 0 and learning_rate(100, 100, 1.0, 0.05) == 0

    def test_zero_learning_rate_is_bitwise_noop(self):
        win = make_window(GRADCHECK_SHAPE)
        op = LearnedOperator(GRADCHECK_SHAPE, seed=2)
        before = {k: v.copy() for k, v in op.params.items()}
        train(op, [win], TrainConfig(lr=0.0, epochs=3, batch_size=1, weight_decay=1e-5))
        for k in before:
            assert np.array_equal(before[k], op.params[k]), k

    def test_deterministic_given_seed(self):
        wins = [make_window(GRADCHECK_SHAPE, seed=s) for s in (1, 2, 3)]
        runs = []
        for _ in range(2):
            op = LearnedOperator(GRADCHECK_SHAPE, seed=0)
            runs.append(train(op, wins, TrainConfig(epochs=2, batch_size=2), seed=9))
        assert runs[0].curve == runs[1].curve
        for k in runs[0].params:
            assert np.array_equal(runs[0].params[k], runs[1].params[k])

    def test_divergence_reports_epoch(self):
        win = make_window(GRADCHECK_SHAPE)
        op = LearnedOperator(GRADCHECK_SHAPE)
        op.params["out.b"][:] = np.inf
        with pytest.raises(TrainingDiverged) as info:
            train(op, [win], TrainConfig(epochs=2, batch_size=1))
        assert info.value.epoch == 1

    def test_window_gradient_sums_both_losses(self):
        win = make_window(GRADCHECK_SHAPE, jitter=0.5)
        g = window_gradient(LearnedOperator(GRADCHECK_SHAPE), win, TrainConfig(M=2))
        assert g.l_tra > 0 and g.l_vis > 0

    @pytest.mark.slow
    def test_overfit_single_window(self):
        win = make_window(OVERFIT_SHAPE, size=64, T=8, n_cells=3)
        op = LearnedOperator(OVERFIT_SHAPE, seed=0)
        res = train(op, [win], TrainConfig(lr=2e-3, epochs=200, batch_size=1))
        final = window_gradient(op, win, TrainConfig())
        assert final.l_tra + final.l_vis < 0.1 * res.step_losses[0]

    @pytest.mark.slow
    def test_default_schedule_mostly_monotone(self):
        win = make_window(OVERFIT_SHAPE, size=64, T=8, n_cells=3)
        op = LearnedOperator(OVERFIT_SHAPE, seed=0)
        res = train(op, [win], TrainConfig(epochs=200, batch_size=1))
        steps = np.array(res.step_losses)
        assert np.mean(np.diff(steps) < 0) >= 0.9


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        op = perturbed_operator(GRADCHECK_SHAPE)
        path = tmp_path / "w.capw"
        save_operator(path, op)
        back = load_operator(path)
        assert back.shape == op.shape
        for k, v in op.params.items():
            np.testing.assert_array_equal(back.params[k], v.astype(np.float32).astype(float))
        assert path.read_bytes()[:4] == b"CAPW"

    def test_tensor_layout(self, tmp_path):
        path = tmp_path / "t.capw"
        write_tensors(path, {"a": np.arange(6.0).reshape(2, 3)})
        raw = path.read_bytes()
        assert raw[4:8] == (1).to_bytes(4, "little")
        assert raw[8:12] == (1).to_bytes(4, "little") and raw[12:13] == b"a"
        assert raw[13:17] == (2).to_bytes(4, "little")
        assert np.frombuffer(raw[25:], "<f4").tolist() == list(range(6))
        assert read_tensors(path)[1]["a"].shape == (2, 3)

    @pytest.mark.parametrize("blob", [b"NOPE\x01\x00\x00\x00", b"CAPW\x02\x00\x00\x00", b"CAPW\x01\x00\x00\x00\x05"])
    def test_bad_files(self, tmp_path, blob):
        path = tmp_path / "bad.capw"
        path.write_bytes(blob)
        with pytest.raises(CheckpointError):
            read_tensors(path)

    def test_missing_shape(self, tmp_path):
        path = tmp_path / "s.capw"
        write_tensors(path, {"a": np.zeros(2)})
        with pytest.raises(CheckpointError, match="shape"):
            load_operator(path)
