"""Capsule primitives: squash geometry, routing agreement dynamics, margin loss."""

import numpy as np
import pytest

from cxrnet.capsule import (
    CapsuleConfig,
    capsnet_create,
    capsnet_forward,
    caps_predict,
    capsule_length,
    margin_loss,
    num_primary_caps,
    primary_caps,
    routing,
    squash,
)
from cxrnet.layers import ConvParams
from cxrnet.tensor import Tensor, grad_check
from tests.gradtools import grad_check_param


def routing_oracle(u_hat: np.ndarray, iterations: int) -> np.ndarray:
    """Plain-numpy transcription of routing-by-agreement (independent of the graph)."""
    n, in_caps, n_class, dim = u_hat.shape
    b = np.zeros((n, in_caps, n_class), dtype=u_hat.dtype)
    v = None
    for it in range(iterations):
        e = np.exp(b - b.max(axis=-1, keepdims=True))
        c = e / e.sum(axis=-1, keepdims=True)
        s = (c[..., None] * u_hat).sum(axis=1)
        sqn = (s * s).sum(axis=-1, keepdims=True)
        v = s * (np.sqrt(sqn + 1e-16) / (sqn + 1.0))
        if it < iterations - 1:
            b = b + (u_hat * v[:, None]).sum(axis=-1)
    return v


class TestSquash:
    def test_zero_maps_to_zero(self):
        out = squash(Tensor(np.zeros((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_unit_norm_gives_exactly_half(self):
        rng = np.random.default_rng(40)
        s = rng.standard_normal((10, 8))
        s /= np.linalg.norm(s, axis=-1, keepdims=True)
        norms = np.linalg.norm(squash(Tensor(s)).data, axis=-1)
        np.testing.assert_allclose(norms, 0.5, atol=1e-9)

    def test_large_norm_approaches_one(self):
        s = np.zeros((1, 8))
        s[0, 0] = 100.0
        norm = np.linalg.norm(squash(Tensor(s)).data)
        assert 0.999 < norm < 1.0
        assert norm == pytest.approx(10000 / 10001 - 0, abs=1e-6)

    def test_norms_below_one_and_monotone(self):
        rng = np.random.default_rng(41)
        s = rng.standard_normal((5000, 8)) * rng.uniform(0, 50, (5000, 1))
        in_norms = np.linalg.norm(s, axis=-1)
        out_norms = np.linalg.norm(squash(Tensor(s)).data, axis=-1)
        assert np.all(out_norms < 1.0)
        order = np.argsort(in_norms)
        assert np.all(np.diff(out_norms[order]) > -1e-12)

    def test_parallel_to_input(self):
        rng = np.random.default_rng(42)
        s = rng.standard_normal((20, 8))
        v = squash(Tensor(s)).data
        cos = (s * v).sum(-1) / (np.linalg.norm(s, axis=-1) * np.linalg.norm(v, axis=-1))
        np.testing.assert_allclose(cos, 1.0, atol=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(43)
        s0 = rng.standard_normal((3, 6))
        assert grad_check(lambda t: (squash(t) * squash(t)).sum(), Tensor(s0)) < 1e-4


class TestPrimaryCaps:
    def test_modified_geometry_on_64(self):
        cfg = CapsuleConfig.modified()
        assert num_primary_caps(cfg, 64, 64) == 16 * 16 * 32  # conv1: 64->32, primary: 32->16

    def test_basic_geometry_on_64(self):
        cfg = CapsuleConfig.basic()
        assert num_primary_caps(cfg, 64, 64) == 24 * 24 * 32  # 64->56 valid, (56-9)//2+1=24

    def test_norms_below_one_and_zero_input(self):
        rng = np.random.default_rng(44)
        cfg = CapsuleConfig(conv_filters=4, conv_kernel=3, primary_dim=4, primary_channels=2,
                            primary_kernel=3, primary_stride=2)
        conv = ConvParams.create(cfg.primary_channels * cfg.primary_dim, 3, 4,
                                 stride=2, padding="valid", rng=rng)
        feats = Tensor(rng.standard_normal((2, 4, 9, 9)).astype(np.float32))
        caps = primary_caps(feats, conv, cfg)
        assert caps.shape == (2, 4 * 4 * 2, 4)
        assert np.all(np.linalg.norm(caps.data, axis=-1) < 1.0)
        zero = primary_caps(Tensor(np.zeros((1, 4, 9, 9), np.float32)), conv, cfg)
        np.testing.assert_allclose(zero.data, 0.0, atol=1e-7)

    def test_too_small_input_under_valid(self):
        cfg = CapsuleConfig.basic()
        conv = ConvParams.create(cfg.primary_channels * cfg.primary_dim, 9, 4, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="larger"):
            primary_caps(Tensor(np.zeros((1, 4, 5, 5), np.float32)), conv, cfg)


class TestCapsPredict:
    def test_matches_loop(self):
        rng = np.random.default_rng(45)
        u = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((3, 2, 5, 4))
        got = caps_predict(Tensor(u), Tensor(w)).data
        want = np.zeros((2, 3, 2, 5))
        for n in range(2):
            for i in range(3):
                for j in range(2):
                    want[n, i, j] = w[i, j] @ u[n, i]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="mismatch"):
            caps_predict(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((2, 2, 5, 4))))

    def test_gradients(self):
        rng = np.random.default_rng(46)
        u0 = rng.standard_normal((2, 3, 4))
        w0 = rng.standard_normal((3, 2, 5, 4))

        def f_u(t):
            out = caps_predict(t, Tensor(w0))
            return (out * out).sum()

        def f_w(t):
            out = caps_predict(Tensor(u0), t)
            return (out * out).sum()

        assert grad_check(f_u, Tensor(u0.copy())) < 1e-4
        assert grad_check(f_w, Tensor(w0.copy())) < 1e-4


class TestRouting:
    def test_single_iteration_uniform_coupling(self):
        # With in_caps == n_class the uniform coupling sums to a plain mean.
        rng = np.random.default_rng(47)
        u_hat = rng.standard_normal((3, 2, 2, 6))
        v = routing(Tensor(u_hat), 1).data
        want = squash(Tensor(u_hat.mean(axis=1))).data
        np.testing.assert_allclose(v, want, atol=1e-12)

    def test_identical_predictions_fixed_point(self):
        rng = np.random.default_rng(48)
        u = rng.standard_normal(6)
        u_hat = np.broadcast_to(u, (2, 2, 2, 6)).copy()  # in_caps == n_class
        want = squash(Tensor(u.reshape(1, 6))).data[0]
        for iters in (1, 2, 3, 4):
            v = routing(Tensor(u_hat), iters).data
            np.testing.assert_allclose(v, np.broadcast_to(want, (2, 2, 6)), atol=1e-10)

    def test_opposed_predictions_shrink(self):
        p = np.zeros((1, 2, 2, 6))
        vec = np.full(6, 0.8)
        p[0, 0, 0] = vec
        p[0, 1, 0] = -vec
        p[0, :, 1] = vec  # class 1 gets agreement, class 0 conflict
        v = routing(Tensor(p), 3).data
        solo = np.linalg.norm(squash(Tensor(vec.reshape(1, 6))).data)
        assert np.linalg.norm(v[0, 0]) < solo  # conflict damps the class-0 capsule
        assert np.linalg.norm(v[0, 1]) >= solo - 1e-9  # agreement only reinforces

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(49)
        u_hat = rng.standard_normal((2, 7, 3, 4))
        for iters in (1, 2, 3, 5):
            got = routing(Tensor(u_hat), iters).data
            np.testing.assert_allclose(got, routing_oracle(u_hat, iters), atol=1e-12)

    def test_coupling_rows_sum_to_one_every_iteration(self):
        rng = np.random.default_rng(50)
        u_hat = rng.standard_normal((2, 5, 3, 4))
        couplings: list = []
        routing(Tensor(u_hat), 4, coupling_out=couplings)
        assert len(couplings) == 4
        for c in couplings:
            np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-6)

    def test_permutation_equivariance_over_inputs(self):
        rng = np.random.default_rng(51)
        u_hat = rng.standard_normal((2, 6, 3, 4))
        perm = rng.permutation(6)
        v1 = routing(Tensor(u_hat), 3).data
        v2 = routing(Tensor(u_hat[:, perm]), 3).data
        np.testing.assert_allclose(v1, v2, atol=1e-6)

    def test_rejects_zero_iterations(self):
        with pytest.raises(ValueError, match="iteration"):
            routing(Tensor(np.zeros((1, 2, 2, 4))), 0)

    def test_gradient_through_routing(self):
        rng = np.random.default_rng(52)
        u0 = rng.standard_normal((1, 4, 2, 3))

        def f(t):
            v = routing(t, 2)
            return (v * v).sum()

        assert grad_check(f, Tensor(u0.copy())) < 1e-4


class TestCapsuleLength:
    def test_zero_and_known_norm(self):
        assert capsule_length(Tensor(np.zeros((1, 2, 16)))).data.max() < 1e-7
        v = np.zeros((1, 2, 16))
        v[0, 0, 3] = 0.9
        out = capsule_length(Tensor(v)).data
        assert out[0, 0] == pytest.approx(0.9, abs=1e-9)

    def test_binary_output_shape(self):
        rng = np.random.default_rng(53)
        out = capsule_length(Tensor(rng.standard_normal((5, 2, 16)) * 0.1))
        assert out.shape == (5, 2)
        assert np.all((out.data >= 0) & (out.data < 1))

    def test_gradient(self):
        rng = np.random.default_rng(54)
        v0 = rng.standard_normal((2, 3, 4))
        assert grad_check(lambda t: (capsule_length(t) * capsule_length(t)).sum(), Tensor(v0)) < 1e-4


class TestMarginLoss:
    def test_perfect_prediction_is_zero(self):
        lengths = Tensor(np.array([[0.95, 0.05], [0.03, 0.97]]))
        labels = np.array([[1, 0], [0, 1]])
        assert margin_loss(lengths, labels).item() == pytest.approx(0.0, abs=1e-12)

    def test_dead_correct_class_costs_081(self):
        lengths = Tensor(np.array([[0.0, 0.05]]))
        labels = np.array([[1, 0]])
        assert margin_loss(lengths, labels).item() == pytest.approx(0.81, abs=1e-9)

    def test_rejects_non_one_hot(self):
        lengths = Tensor(np.array([[0.5, 0.5]]))
        with pytest.raises(ValueError, match="one-hot"):
            margin_loss(lengths, np.array([[1, 1]]))
        with pytest.raises(ValueError, match="one-hot"):
            margin_loss(lengths, np.array([[0.5, 0.5]]))

    def test_gradient_away_from_hinges(self):
        rng = np.random.default_rng(55)
        lengths0 = rng.uniform(0.2, 0.8, (4, 2))
        labels = np.eye(2)[rng.integers(0, 2, 4)]

        def f(t):
            return margin_loss(t, labels)

        assert grad_check(f, Tensor(lengths0)) < 1e-4


class TestFullCapsNet:
    def toy_cfg(self) -> CapsuleConfig:
        return CapsuleConfig(conv_filters=4, conv_kernel=3, conv_stride=1, conv_padding="valid",
                             primary_dim=4, primary_channels=2, primary_kernel=3,
                             primary_stride=2, primary_padding="valid",
                             n_class=2, digit_dim=4, routings=2)

    def test_forward_shape_and_range(self):
        rng = np.random.default_rng(56)
        cfg = self.toy_cfg()
        p = capsnet_create(cfg, 1, 8, 8, rng)
        out = capsnet_forward(Tensor(rng.random((3, 1, 8, 8)).astype(np.float32)), p, cfg)
        assert out.shape == (3, 2)
        assert np.all((out.data >= 0) & (out.data < 1))

    def test_full_gradients(self):
        rng = np.random.default_rng(57)
        cfg = self.toy_cfg()
        p = capsnet_create(cfg, 1, 8, 8, rng)
        for t in p.parameters():
            t.data = t.data.astype(np.float64)
        x = Tensor(rng.random((2, 1, 8, 8)))
        labels = np.array([[1, 0], [0, 1]])

        def run():
            lengths = capsnet_forward(x, p, cfg)
            return margin_loss(lengths, labels)

        for name, tensor in [("conv1.w", p.conv1.weights), ("conv1.b", p.conv1.bias),
                             ("primary.w", p.primary_conv.weights), ("routing.w", p.routing_w)]:
            err = grad_check_param(run, tensor)
            assert err < 1e-3, f"{name}: {err}"

    def test_variant_param_delta_is_routing_capsule_count(self):
        basic, modified = CapsuleConfig.basic(), CapsuleConfig.modified()
        caps_b = num_primary_caps(basic, 64, 64)
        caps_m = num_primary_caps(modified, 64, 64)
        assert caps_b == 18432 and caps_m == 8192
        delta = (caps_b - caps_m) * 2 * 16 * 8
        assert delta == 2_621_440  # matches the reported totals' difference
