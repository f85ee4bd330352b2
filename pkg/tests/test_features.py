import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellpoint.features import (
    FeatureConfig,
    FixedEncoder,
    LearnedEncoder,
    SizeError,
    avg_pool,
    bilinear_sample,
    corr_full,
    corr_local,
    corr_local_batch,
    corr_local_batch_backward,
    extract_pyramid,
    pool_backward,
    sample_features,
    stack_levels,
    to_map_coords,
    to_pixel_coords,
)
from cellpoint.synth import render

from oracles import argmax_offset, bilinear_loop, corr_full_loop


class PatchEncoder:
    """Linear, bias-free: each k x k patch mapped through a fixed matrix."""

    def __init__(self, dim, k, seed=0):
        self.dim, self.stride = dim, k
        self.W = np.random.default_rng(seed).standard_normal((dim, k * k))

    def encode(self, frame):
        H, W = frame.shape
        k = self.stride
        f = np.pad(frame, ((0, (-H) % k), (0, (-W) % k)), mode="edge")
        h, w = f.shape[0] // k, f.shape[1] // k
        patches = f.reshape(h, k, w, k).transpose(1, 3, 0, 2).reshape(k * k, h, w)
        return np.einsum("dp,phw->dhw", self.W, patches)


def _spot(H, W, xy, sigma=3.0):
    return render(np.array([xy], float), np.array([1.0]), (H, W), sigma)


class TestPyramid:
    def test_zero_frame_gives_zero_levels(self):
        cfg = FeatureConfig(k=4, dim=6, S=3)
        pyr = extract_pyramid(np.zeros((20, 24)), PatchEncoder(6, 4), cfg)
        assert all(np.all(l == 0) for l in pyr.levels)

    def test_level_shapes_32(self):
        cfg = FeatureConfig(k=4, dim=5, S=4)
        pyr = extract_pyramid(np.random.default_rng(0).random((32, 32)), PatchEncoder(5, 4), cfg)
        assert [l.shape[1:] for l in pyr.levels] == [(8, 8), (4, 4), (2, 2), (1, 1)]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(4, 512), st.integers(4, 512))
    def test_level_shape_formula(self, H, W):
        cfg = FeatureConfig(k=4, dim=2, S=4)
        pyr = extract_pyramid(np.zeros((H, W)), PatchEncoder(2, 4), cfg)
        for s, l in enumerate(pyr.levels):
            f = 4 * 2**s
            assert l.shape[1:] == (-(-H // f), -(-W // f))

    def test_pooling_average(self):
        cfg = FeatureConfig(k=4, dim=3, S=2)
        pyr = extract_pyramid(np.random.default_rng(1).random((32, 32)), PatchEncoder(3, 4), cfg)
        l0, l1 = pyr.levels
        np.testing.assert_allclose(l1[:, 0, 0], l0[:, :2, :2].mean(axis=(1, 2)), atol=1e-12)

    def test_pooling_clamps_odd_edges(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        p = avg_pool(x, 2)
        assert p.shape == (1, 2, 2)
        assert p[0, 1, 1] == x[0, 2, 2]
        assert p[0, 0, 1] == pytest.approx((2 + 2 + 5 + 5) / 4)

    def test_pool_backward_is_adjoint(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 7, 5))
        g = rng.standard_normal((2, 4, 3))
        assert np.sum(avg_pool(x, 2) * g) == pytest.approx(np.sum(x * pool_backward(g, 2, (7, 5))))

    def test_small_frame(self):
        with pytest.raises(SizeError):
            extract_pyramid(np.zeros((3, 10)), PatchEncoder(2, 4), FeatureConfig(k=4, dim=2))


class TestBilinear:
    def test_integer_coordinates(self):
        m = np.random.default_rng(0).standard_normal((3, 4, 5))
        np.testing.assert_array_equal(bilinear_sample(m, (2, 1)), m[:, 1, 2])

    def test_midpoint(self):
        m = np.zeros((1, 2, 2))
        m[0, 0, 0], m[0, 0, 1] = 2.0, 6.0
        assert bilinear_sample(m, (0.5, 0.0))[0] == 4.0

    def test_clamped(self):
        m = np.random.default_rng(1).standard_normal((2, 3, 3))
        np.testing.assert_array_equal(bilinear_sample(m, (-5, -5)), m[:, 0, 0])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-3, 10), st.floats(-3, 10), st.integers(1, 6), st.integers(1, 6))
    def test_matches_loop(self, x, y, h, w):
        m = np.random.default_rng(h * 7 + w).standard_normal((2, h, w))
        np.testing.assert_allclose(bilinear_sample(m, (x, y)), bilinear_loop(m, x, y), atol=1e-12)

    def test_coordinate_maps_invert(self):
        xy = np.array([[3.2, 17.9]])
        np.testing.assert_allclose(to_pixel_coords(to_map_coords(xy, 4, 2), 4, 2), xy)
        # pixel centres of a cell average to the cell's map coordinate
        assert to_map_coords(np.array([1.5]), 4, 0)[0] == 0.0


class TestCorrFull:
    def test_random_against_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            C, h1, w1, h2, w2 = rng.integers(1, 5, 5)
            F1 = rng.standard_normal((C, h1, w1))
            F2 = rng.standard_normal((C, h2, w2))
            np.testing.assert_allclose(corr_full(F1, F2), corr_full_loop(F1, F2), atol=1e-6)

    def test_one_hot(self):
        F = np.eye(4).reshape(4, 2, 2)
        vol = corr_full(F, F).reshape(4, 4)
        np.testing.assert_array_equal(vol, np.eye(4))

    def test_self_diagonal(self):
        F = np.random.default_rng(1).standard_normal((3, 2, 3))
        vol = corr_full(F, F)
        for i in range(2):
            for j in range(3):
                assert vol[i, j, i, j] == pytest.approx(np.sum(F[:, i, j] ** 2))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            corr_full(np.zeros((2, 1, 1)), np.zeros((3, 1, 1)))


class TestCorrLocal:
    def test_zero_feature(self):
        cfg = FeatureConfig(k=4, dim=4, S=2, delta=1)
        pyr = extract_pyramid(np.random.default_rng(0).random((16, 16)), PatchEncoder(4, 4), cfg)
        assert np.all(corr_local(np.zeros(4), pyr, (5.0, 7.0), cfg) == 0)

    def test_pooled_equality(self):
        """<F, pooled map> equals the mean of <F, base map> over the pooled
        cells."""
        rng = np.random.default_rng(3)
        for _ in range(50):
            S = int(rng.integers(2, 4))
            cfg = FeatureConfig(k=4, dim=5, S=S, delta=1)
            size = 4 * 2 ** (S - 1) * int(rng.integers(1, 3))
            pyr = extract_pyramid(rng.random((size, size)), PatchEncoder(5, 4, seed=int(rng.integers(99))), cfg)
            F = rng.standard_normal(5)
            s = int(rng.integers(1, S))
            h = pyr.levels[s].shape[1]
            i, j = rng.integers(0, h, 2)
            centre = to_pixel_coords(np.array([j, i], float), cfg.k, s)
            got = corr_local(F, pyr, centre, cfg)[s, cfg.delta, cfg.delta]
            f = 2**s
            block = pyr.levels[0][:, i * f : (i + 1) * f, j * f : (j + 1) * f]
            want = np.mean(np.einsum("c,chw->hw", F, block))
            assert abs(got - want) <= 1e-6

    def test_blob_argmax_points_at_centre(self):
        """Unit stride: the finest-scale argmax from a query 2 px left of a
        blob is the 2 px step to its centre, as found by a brute-force scan."""
        cfg = FeatureConfig(k=1, dim=24, S=1, delta=3)
        enc = FixedEncoder(24, 1)
        centre = np.array([20.0, 16.0])
        pyr = extract_pyramid(_spot(32, 40, centre), enc, cfg)
        F = sample_features(pyr.levels[0], centre[None], 1)[0]
        for off in ([-2, 0], [0, 2], [2, -2]):
            c = corr_local(F, pyr, centre + off, cfg)[0]
            assert argmax_offset(c) == (-off[0], -off[1])

    def test_translation_consistency(self):
        cfg = FeatureConfig(k=4, dim=20, S=4, delta=2)
        enc = FixedEncoder(20, 4)
        rng = np.random.default_rng(5)
        # content and probe window stay clear of the borders under every shift
        base_img = np.zeros((320, 320))
        base_img[120:180, 120:180] = rng.random((60, 60))
        F = rng.standard_normal(20)
        c = np.array([150.3, 148.9])
        ref = corr_local(F, extract_pyramid(base_img, enc, cfg), c, cfg)
        for shift in ([32, 0], [0, 32], [32, -32]):
            img = np.roll(base_img, (shift[1], shift[0]), axis=(0, 1))
            got = corr_local(F, extract_pyramid(img, enc, cfg), c + shift, cfg)
            assert np.max(np.abs(got - ref)) < 1e-5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_batch_matches_single(self, seed):
        rng = np.random.default_rng(seed)
        cfg = FeatureConfig(k=4, dim=3, S=3, delta=2)
        enc = PatchEncoder(3, 4, seed=seed % 7)
        T, N = 2, 3
        pyrs = [extract_pyramid(rng.random((24, 20)), enc, cfg) for _ in range(T)]
        levels = stack_levels(pyrs)
        F = rng.standard_normal((N, T, 3))
        centres = rng.uniform(-6, 30, (N, T, 2))
        out, _ = corr_local_batch(F, levels, centres, cfg)
        for n in range(N):
            for t in range(T):
                np.testing.assert_allclose(out[n, t], corr_local(F[n, t], pyrs[t], centres[n, t], cfg), atol=1e-12)


def test_corr_batch_backward_finite_differences():
    rng = np.random.default_rng(11)
    cfg = FeatureConfig(k=4, dim=3, S=2, delta=1)
    levels = stack_levels([extract_pyramid(rng.random((16, 16)), PatchEncoder(3, 4), cfg) for _ in range(2)])
    F = rng.standard_normal((2, 2, 3))
    cent = rng.uniform(2, 13, (2, 2, 2))
    G = rng.standard_normal((2, 2, cfg.S, 3, 3))

    def f(F_, c_, lv_):
        return float(np.sum(corr_local_batch(F_, lv_, c_, cfg)[0] * G))

    _, cache = corr_local_batch(F, levels, cent, cfg, keep=True)
    dF, dc, dl = corr_local_batch_backward(G, levels, cache, cfg, want_levels=True)
    h = 1e-6
    for arr, grad, pos in ((F, dF, 0), (cent, dc, 1)):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            a0 = arr[i]
            arr[i] = a0 + h
            up = f(F, cent, levels)
            arr[i] = a0 - h
            dn = f(F, cent, levels)
            arr[i] = a0
            num[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-6)
    for s in range(cfg.S):
        lv = levels[s]
        num = np.zeros_like(lv)
        for i in np.ndindex(lv.shape):
            a0 = lv[i]
            lv[i] = a0 + h
            up = f(F, cent, levels)
            lv[i] = a0 - h
            dn = f(F, cent, levels)
            lv[i] = a0
            num[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(dl[s], num, rtol=1e-5, atol=1e-6)


class TestFixedEncoder:
    def test_unit_reference_spot(self):
        enc = FixedEncoder(32, 1)
        img = _spot(41, 41, (20.0, 20.0))
        f = enc.encode(img)[:, 20, 20]
        assert np.linalg.norm(f) == pytest.approx(1.0, rel=1e-6)

    def test_width_does_not_change_correlations(self):
        img = np.random.default_rng(0).random((24, 24))
        a, b = FixedEncoder(32, 4).encode(img), FixedEncoder(128, 4).encode(img)
        np.testing.assert_allclose(corr_full(a, a), corr_full(b, b), atol=1e-10)

    def test_deterministic(self):
        img = np.random.default_rng(1).random((16, 16))
        np.testing.assert_array_equal(FixedEncoder(8, 4).encode(img), FixedEncoder(8, 4).encode(img))


class TestLearnedEncoder:
    def test_shape(self):
        enc = LearnedEncoder(dim=6, k=4, hidden=3)
        assert enc.encode(np.zeros((18, 13))).shape == (6, 5, 4)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(2)
        enc = LearnedEncoder(dim=3, k=4, hidden=2, seed=1)
        img = rng.random((8, 12))
        G = rng.standard_normal((3, 2, 3))
        out, cache = enc.forward(img)
        grads = enc.backward(G, cache)
        h = 1e-6
        for name, p in enc.params.items():
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                p0 = p[i]
                p[i] = p0 + h
                up = np.sum(enc.encode(img) * G)
                p[i] = p0 - h
                dn = np.sum(enc.encode(img) * G)
                p[i] = p0
                num[i] = (up - dn) / (2 * h)
            np.testing.assert_allclose(grads[name], num, rtol=1e-5, atol=1e-7)
