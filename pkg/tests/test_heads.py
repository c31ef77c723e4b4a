import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslcm.errors import ConfigError, NumericalError, ShapeError
from sslcm.heads import (
    HeadConfig,
    MeanPoolParams,
    MhfaParams,
    forward_logits,
    head_param_count,
    init_params,
    loss_and_grad,
    mhfa_forward,
    mp_forward,
    softmax,
)


def _random_params(config, kind, seed, scale=0.5):
    """Random values in every block, including biases and layer weights."""
    rng = np.random.default_rng(seed)
    cls = MeanPoolParams if kind == "mp" else MhfaParams
    return cls(config, **{n: scale * rng.standard_normal(s) for n, s in cls.block_shapes(config).items()})


def _fd_check(batch, params, step=1e-5, tol=1e-6):
    """Central differences against the analytic gradient.

    Besides the relative tolerance, each coordinate may differ by the rounding
    noise of the difference quotient itself, about eps*|loss|/step. That only
    matters for coordinates whose gradient is tiny or structurally zero.
    """
    loss, grads = loss_and_grad(batch, params)
    noise = 10 * np.finfo(float).eps * max(abs(loss), 1.0) / step
    for name, block in params.blocks().items():
        g = grads.blocks()[name]
        for idx in np.ndindex(block.shape):
            plus = {k: v.copy() for k, v in params.blocks().items()}
            minus = {k: v.copy() for k, v in params.blocks().items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            fd = (loss_and_grad(batch, params.with_blocks(plus))[0]
                  - loss_and_grad(batch, params.with_blocks(minus))[0]) / (2 * step)
            assert abs(g[idx] - fd) <= tol * max(abs(g[idx]), abs(fd)) + noise, (name, idx, g[idx], fd)


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(ConfigError):
            HeadConfig(2, 4, embed_dim=10, n_heads=4)

    def test_positive(self):
        with pytest.raises(ConfigError):
            HeadConfig(0, 4)


class TestInit:
    def test_mp_zero_biases(self):
        p = init_params(HeadConfig(1, 5, 8, 2), "mp", 3)
        np.testing.assert_array_equal(p.proj_bias, 0.0)
        assert p.cls_bias == 0.0

    def test_mhfa_zero_layer_weights(self):
        p = init_params(HeadConfig(4, 5, 8, 2), "mhfa", 3)
        np.testing.assert_array_equal(p.layer_w_k, np.zeros(4))
        np.testing.assert_array_equal(p.layer_w_v, np.zeros(4))
        for name in ("proj_k_bias", "proj_v_bias", "attn_bias"):
            np.testing.assert_array_equal(getattr(p, name), 0.0)

    def test_deterministic(self):
        cfg = HeadConfig(3, 6, 8, 4)
        assert init_params(cfg, "mhfa", 17).equals(init_params(cfg, "mhfa", 17))
        assert not init_params(cfg, "mhfa", 17).equals(init_params(cfg, "mhfa", 18))

    def test_glorot_bounds(self):
        p = init_params(HeadConfig(1, 30, 20, 4), "mp", 0)
        limit = math.sqrt(6 / 50)
        assert np.abs(p.proj_weight).max() <= limit
        assert np.abs(p.proj_weight).max() > 0.9 * limit

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            init_params(HeadConfig(1, 2, 2, 1), "xvector", 0)

    def test_params_read_only(self):
        p = init_params(HeadConfig(1, 2, 2, 1), "mp", 0)
        with pytest.raises(ValueError):
            p.proj_weight[0, 0] = 1.0

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            MeanPoolParams(HeadConfig(1, 2, 2, 1), np.zeros((3, 2)), np.zeros(2), np.zeros(2), 0.0)


class TestMeanPool:
    def test_zero_input(self):
        p = init_params(HeadConfig(1, 4, 6, 2), "mp", 0)
        emb, logit = mp_forward(np.zeros((9, 4)), p)
        np.testing.assert_array_equal(emb, 0.0)
        assert logit == 0.0

    def test_constant_frames_match_single(self):
        p = _random_params(HeadConfig(1, 4, 6, 2), "mp", 1)
        v = np.array([0.3, -1.0, 2.0, 0.5])
        e1, l1 = mp_forward(np.tile(v, (5, 1)), p)
        e2, l2 = mp_forward(v[None], p)
        np.testing.assert_allclose(e1, e2, rtol=1e-14, atol=1e-15)
        assert l1 == pytest.approx(l2, rel=1e-14)

    def test_hand_evaluation(self):
        cfg = HeadConfig(1, 3, 2, 1)
        p = MeanPoolParams(cfg, proj_weight=[[1, 2], [0, -1], [3, 1]], proj_bias=[1, -2],
                           cls_weight=[2, -1], cls_bias=0.5)
        z = np.array([[1, 0, 2], [-1, 3, 1]])
        # frame 0: [1+0+6+1, 2+0+2-2] = [8, 2]; frame 1: [-1+0+3+1, -2-3+1-2] = [3, -6]
        # mean [5.5, -2]; logit 2*5.5 + 2 + 0.5 = 13.5
        emb, logit = mp_forward(z, p)
        np.testing.assert_array_equal(emb, [5.5, -2.0])
        assert logit == 13.5

    def test_frame_permutation_exact(self):
        p = _random_params(HeadConfig(1, 4, 6, 2), "mp", 2)
        z = np.random.default_rng(0).standard_normal((8, 4))
        # mean of exact products is order-dependent in floating point only through the sum;
        # use dyadic values so every partial sum is exact
        z = np.round(z * 8) / 8
        p = MeanPoolParams(p.config, *(np.round(b * 8) / 8 for b in p.blocks().values()))
        perm = np.random.default_rng(1).permutation(8)
        assert mp_forward(z, p)[1] == mp_forward(z[perm], p)[1]

    def test_shape_error(self):
        p = init_params(HeadConfig(1, 4, 6, 2), "mp", 0)
        with pytest.raises(ShapeError):
            mp_forward(np.zeros((3, 5)), p)


class TestMhfa:
    def test_hand_evaluation(self):
        cfg = HeadConfig(2, 2, 2, 1)
        ln3 = math.log(3.0)
        p = MhfaParams(
            cfg,
            layer_w_k=[0.0, ln3],     # softmax -> [1/4, 3/4]
            layer_w_v=[0.0, 0.0],     # softmax -> [1/2, 1/2]
            proj_k=[[1, 0], [0, 1]], proj_k_bias=[0, 0],
            proj_v=[[1, 1], [0, 2]], proj_v_bias=[1, 0],
            attn_weight=[[1], [-1]], attn_bias=[0.5],
            cls_weight=[1, -1], cls_bias=0.25,
        )
        z = np.array([
            [[4, 0], [0, 4]],   # layer 0
            [[0, 0], [4, 8]],   # layer 1
        ], dtype=float)
        # keys: 1/4*z0 + 3/4*z1 -> frame0 [1, 0], frame1 [3, 7]
        # vals: 1/2*z0 + 1/2*z1 -> frame0 [2, 0], frame1 [2, 6]; V = x@Sv + bv
        #   frame0 [2+1, 2+0] = [3, 2]; frame1 [2+1, 2+12] = [3, 14]
        # attn logits: k0-k1+0.5 -> frame0 1.5, frame1 -3.5
        a0 = 1 / (1 + math.exp(-5.0))
        a1 = 1 / (1 + math.exp(5.0))
        e = [3.0, 2 * a0 + 14 * a1]
        logit = e[0] - e[1] + 0.25
        tr = mhfa_forward(z, p)
        np.testing.assert_allclose(tr.keys, [[1, 0], [3, 7]], rtol=1e-15)
        np.testing.assert_allclose(tr.vals, [[3, 2], [3, 14]], rtol=1e-15)
        np.testing.assert_allclose(tr.attn[:, 0], [a0, a1], rtol=1e-14)
        np.testing.assert_allclose(tr.embedding, e, rtol=1e-14)
        assert tr.logit == pytest.approx(logit, rel=1e-14)

    def test_chunked_heads(self):
        # two heads, each pooling its own half of the value dimension
        cfg = HeadConfig(1, 2, 4, 2)
        p = _random_params(cfg, "mhfa", 4)
        z = np.random.default_rng(5).standard_normal((1, 6, 2))
        tr = mhfa_forward(z, p)
        ref = np.concatenate([tr.attn[:, 0] @ tr.vals[:, :2], tr.attn[:, 1] @ tr.vals[:, 2:]])
        np.testing.assert_allclose(tr.embedding, ref, rtol=1e-13)

    def test_single_frame(self):
        cfg = HeadConfig(3, 4, 8, 4)
        p = _random_params(cfg, "mhfa", 6)
        tr = mhfa_forward(np.random.default_rng(0).standard_normal((3, 1, 4)), p)
        np.testing.assert_array_equal(tr.attn, 1.0)
        np.testing.assert_allclose(tr.embedding, tr.vals[0], rtol=1e-15)

    def test_uniform_layer_weights(self):
        cfg = HeadConfig(5, 3, 4, 2)
        p = init_params(cfg, "mhfa", 0)
        np.testing.assert_allclose(softmax(p.layer_w_k), 0.2, rtol=1e-15)
        z = np.random.default_rng(1).standard_normal((5, 4, 3))
        tr = mhfa_forward(z, p)
        np.testing.assert_allclose(tr.keys, z.mean(0) @ p.proj_k, rtol=1e-12, atol=1e-14)

    def test_layer_count_mismatch(self):
        p = init_params(HeadConfig(3, 4, 8, 4), "mhfa", 0)
        with pytest.raises(ShapeError, match="layer-count"):
            mhfa_forward(np.zeros((2, 5, 4)), p)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12), st.floats(0.1, 30))
    def test_attention_normalised(self, seed, T, scale):
        cfg = HeadConfig(3, 4, 8, 4)
        p = _random_params(cfg, "mhfa", seed, scale=scale)
        z = np.random.default_rng(seed + 1).standard_normal((3, T, 4)) * scale
        tr = mhfa_forward(z, p)
        np.testing.assert_allclose(tr.attn.sum(0), 1.0, atol=1e-9)
        assert np.isfinite(tr.logit)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=49))
    def test_layer_softmax_sums_to_one(self, w):
        assert abs(softmax(np.array(w)).sum() - 1.0) <= 1e-12

    def test_permutation_equivariance(self):
        cfg = HeadConfig(3, 5, 8, 2)
        p = _random_params(cfg, "mhfa", 7)
        z = np.random.default_rng(8).standard_normal((3, 9, 5))
        perm = np.random.default_rng(9).permutation(9)
        a, b = mhfa_forward(z, p), mhfa_forward(z[:, perm], p)
        np.testing.assert_allclose(b.keys, a.keys[perm], rtol=1e-13)
        np.testing.assert_allclose(b.vals, a.vals[perm], rtol=1e-13)
        np.testing.assert_allclose(b.attn, a.attn[perm], rtol=1e-12)
        np.testing.assert_allclose(b.embedding, a.embedding, rtol=1e-12)
        assert b.logit == pytest.approx(a.logit, rel=1e-12)


class TestLoss:
    @pytest.mark.parametrize("kind", ["mp", "mhfa"])
    def test_zero_logit_is_ln2(self, kind):
        cfg = HeadConfig(2, 3, 4, 2)
        p = init_params(cfg, kind, 0)
        p = p.with_blocks({**p.blocks(), "cls_weight": np.zeros(4)})
        x = np.ones((4, 3)) if kind == "mp" else np.ones((2, 4, 3))
        loss, _ = loss_and_grad([(x, 1), (x, 0)], p)
        assert loss == pytest.approx(math.log(2.0), rel=1e-15)

    @pytest.mark.parametrize("kind", ["mp", "mhfa"])
    def test_duplicated_item(self, kind):
        cfg = HeadConfig(2, 3, 4, 2)
        p = _random_params(cfg, kind, 1)
        x = np.random.default_rng(2).standard_normal((5, 3) if kind == "mp" else (2, 5, 3))
        l1, g1 = loss_and_grad([(x, 1)], p)
        l2, g2 = loss_and_grad([(x, 1), (x, 1)], p)
        assert l1 == pytest.approx(l2, rel=1e-15)
        np.testing.assert_allclose(g1.flat(), g2.flat(), rtol=1e-14, atol=1e-17)

    def test_mp_finite_differences(self):
        cfg = HeadConfig(1, 10, 8, 2)
        p = _random_params(cfg, "mp", 3)
        rng = np.random.default_rng(4)
        batch = [(rng.standard_normal((T, 10)), y) for T, y in ((7, 1), (3, 0), (7, 0), (1, 1))]
        _fd_check(batch, p)

    def test_mhfa_finite_differences(self):
        cfg = HeadConfig(4, 10, 8, 2)
        p = _random_params(cfg, "mhfa", 5)
        rng = np.random.default_rng(6)
        batch = [(rng.standard_normal((4, T, 10)), y) for T, y in ((7, 1), (3, 0), (7, 0), (2, 1))]
        _fd_check(batch, p)

    def test_mhfa_finite_differences_pos_weight(self):
        cfg = HeadConfig(2, 3, 4, 2)
        p = _random_params(cfg, "mhfa", 8)
        rng = np.random.default_rng(9)
        batch = [(rng.standard_normal((2, 4, 3)), y) for y in (1, 0, 0)]
        _, g = loss_and_grad(batch, p, pos_weight=3.0)
        step = 1e-5
        flat = p.flat()
        names = p.block_names()
        blocks = p.blocks()
        # spot check one coordinate per block
        for name in names:
            idx = (0,) * blocks[name].ndim
            hi = {k: v.copy() for k, v in blocks.items()}
            lo = {k: v.copy() for k, v in blocks.items()}
            hi[name][idx] += step
            lo[name][idx] -= step
            fd = (loss_and_grad(batch, p.with_blocks(hi), pos_weight=3.0)[0]
                  - loss_and_grad(batch, p.with_blocks(lo), pos_weight=3.0)[0]) / (2 * step)
            a = g.blocks()[name][idx]
            assert abs(a - fd) <= 1e-6 * max(abs(a), abs(fd)) + 1e-10
        assert flat.size == p.n_values()

    def test_non_finite_reported(self):
        cfg = HeadConfig(1, 2, 2, 1)
        p = MeanPoolParams(cfg, [[1e308, 1e308], [0, 0]], [0, 0], [1e308, 1e308], 0.0)
        with pytest.raises(NumericalError):
            loss_and_grad([(np.full((2, 2), 1e10), 1)], p)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_and_grad([], init_params(HeadConfig(1, 2, 2, 1), "mp", 0))

    def test_mixed_lengths_match_individual(self):
        cfg = HeadConfig(3, 4, 8, 2)
        p = _random_params(cfg, "mhfa", 10)
        rng = np.random.default_rng(11)
        xs = [rng.standard_normal((3, T, 4)) for T in (2, 5, 2, 9)]
        logits = forward_logits(p, xs)
        np.testing.assert_allclose(logits, [mhfa_forward(x, p).logit for x in xs], rtol=1e-13)


class TestParamCount:
    def test_minimal_mp(self):
        assert head_param_count(HeadConfig(1, 1, 1, 1), "mp") == 4

    def test_mhfa_upper(self):
        assert head_param_count(HeadConfig(49, 1280, 128, 8), "mhfa") == 329_195

    def test_mp_formula(self):
        # F*D + D + D + 1 for F=768, D=128
        assert head_param_count(HeadConfig(1, 768, 128, 8), "mp") == 768 * 128 + 2 * 128 + 1

    @pytest.mark.parametrize("kind", ["mp", "mhfa"])
    @pytest.mark.parametrize("L,F,D,H", [(3, 5, 8, 2), (13, 7, 16, 4), (2, 1, 1, 1)])
    def test_count_matches_blocks(self, kind, L, F, D, H):
        cfg = HeadConfig(L, F, D, H)
        assert head_param_count(cfg, kind) == init_params(cfg, kind, 0).n_values()

    @pytest.mark.parametrize("L,F", [(13, 768), (13, 768), (13, 768), (25, 1024), (49, 1280), (25, 1024)])
    def test_range(self, L, F):
        for f in (768, 1024, 1280):
            assert 98_000 <= head_param_count(HeadConfig(1, f, 128, 8), "mp") <= 331_000
        assert 98_000 <= head_param_count(HeadConfig(L, F, 128, 8), "mhfa") <= 331_000
