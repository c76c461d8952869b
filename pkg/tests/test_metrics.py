"""Correlation metric formulas against hand cases and the pair-loop oracle."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symbreak import conv2d
from symbreak.architectures import delta_kernel_weights
from symbreak.metrics import (
    backward_correlation,
    correlation_report,
    deviation_carry_factor,
    effective_width,
    forward_correlation,
    gradient_correlation,
    hidden_correlation,
    mean_dissimilarity,
    pairwise_correlation_oracle,
    perturbation_ratio,
)


class TestForwardCorrelation:
    def test_constant_filters_fully_correlated(self):
        w = np.full((3, 3, 6, 4), 0.7)
        assert forward_correlation(w) == 1.0
        assert backward_correlation(w) == 1.0

    def test_zero_tensor_fully_correlated_by_convention(self):
        assert forward_correlation(np.zeros((3, 3, 4, 4))) == 1.0

    def test_one_zero_member_pairs_count_as_one(self):
        w = np.zeros((1, 1, 3, 2))
        w[0, 0, 0] = [1.0, 0.0]
        w[0, 0, 1] = [0.0, 1.0]
        # pairs: (0,1) orthogonal -> 0; (0,2),(1,2) involve zero -> 1
        assert forward_correlation(w) == pytest.approx((0 * 2 + 1 * 4) / 6)

    def test_orthonormal_replication_formula(self):
        # d=6 outputs from 3 orthonormal filters replicated R=2: (R-1)/(d-1) = 0.2
        uniq = np.zeros((3, 1, 1, 9))
        for i in range(3):
            uniq[i, 0, 0, i] = 1.0
        w = np.concatenate([uniq, uniq], axis=0)  # [6,1,1,9] -> reorder to [1,1,6,9]
        w = np.transpose(w, (1, 2, 0, 3))
        assert forward_correlation(w) == pytest.approx(0.2, abs=1e-12)
        assert pairwise_correlation_oracle(
            np.moveaxis(w, 2, 0)
        ) == pytest.approx(0.2, abs=1e-12)

    def test_iid_gaussian_near_zero(self):
        w = np.random.default_rng(0).standard_normal((3, 3, 512, 512))
        assert abs(forward_correlation(w)) < 0.05
        assert abs(backward_correlation(w)) < 0.05

    def test_needs_two_channels(self):
        with pytest.raises(ValueError):
            forward_correlation(np.ones((3, 3, 1, 4)))
        with pytest.raises(ValueError):
            backward_correlation(np.ones((3, 3, 4, 1)))


class TestBackwardCorrelation:
    def test_delta_identity_inputs_orthogonal(self):
        w = delta_kernel_weights(3, np.eye(4))
        assert backward_correlation(w) == 0.0

    def test_delta_ones_inputs_identical(self):
        w = delta_kernel_weights(3, np.full((4, 4), 0.25))
        assert backward_correlation(w) == 1.0

    def test_dense_weights_as_1x1_conv(self):
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert forward_correlation(w) == 0.0  # orthogonal rows
        assert backward_correlation(w) == 0.0


class TestHiddenGradientCorrelation:
    def test_identical_channels(self):
        h = np.tile(np.random.default_rng(1).standard_normal((1, 5, 5)), (4, 1, 1))
        assert hidden_correlation(h) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_one_hots(self):
        h = np.eye(3).reshape(3, 3, 1)
        assert hidden_correlation(h) == 0.0

    def test_three_channel_hand_case(self):
        h = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        # ordered pairs: (0,1)=0 (0,2)=1 (1,2)=0 and symmetric -> mean 1/3
        assert gradient_correlation(h) == pytest.approx(1 / 3, abs=1e-12)


class TestScalars:
    @pytest.mark.parametrize("cf,n,expect", [(1.0, 64, 1.0), (0.0, 64, 64.0), (0.6, 11, 9.0)])
    def test_effective_width(self, cf, n, expect):
        assert effective_width(cf, n) == pytest.approx(expect, abs=1e-12)

    @pytest.mark.parametrize("cfs,expect", [([1, 1, 1], 0.0), ([0, 0], 1.0), ([1, 0], 0.5)])
    def test_mean_dissimilarity(self, cfs, expect):
        assert mean_dissimilarity(cfs) == pytest.approx(expect, abs=1e-12)

    def test_mean_dissimilarity_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_dissimilarity([])


class TestPerturbationRatio:
    def test_symmetric_channels_ratio_zero(self):
        t = np.tile(np.random.default_rng(2).standard_normal((4, 4, 1)), (1, 1, 8))
        assert perturbation_ratio(t) == 0.0

    def test_zero_mean_channels_ratio_one(self):
        t = np.stack([np.ones((3, 3)), -np.ones((3, 3))], axis=-1)
        assert perturbation_ratio(t) == pytest.approx(1.0, abs=1e-12)

    def test_zero_tensor_defined_as_zero(self):
        assert perturbation_ratio(np.zeros((2, 2, 4))) == 0.0

    def test_identity_layer_preserves_ratio_exactly(self):
        from symbreak import ORDERED_DOUBLE

        rng = np.random.default_rng(3)
        n = 16
        t = rng.standard_normal((6, 6, n))
        w = delta_kernel_weights(3, np.eye(n))
        out = conv2d(t, w, np.zeros(n), policy=ORDERED_DOUBLE)
        assert perturbation_ratio(out) == perturbation_ratio(t)

    def test_ones_layer_strictly_shrinks_ratio(self):
        rng = np.random.default_rng(4)
        n = 8
        sym = np.tile(rng.standard_normal((6, 6, 1)), (1, 1, n))
        t = sym + 0.1 * rng.standard_normal((6, 6, n))
        w = delta_kernel_weights(3, np.full((n, n), 1.0 / n))
        out = conv2d(t.astype(np.float64), w, np.zeros(n))
        assert perturbation_ratio(out) < perturbation_ratio(t)

    def test_ones_layer_deviation_attenuation_near_inv_sqrt_n(self):
        from symbreak import ORDERED_DOUBLE

        rng = np.random.default_rng(5)
        n = 64
        w_ones = delta_kernel_weights(1, np.full((n, n), 1.0 / n))
        w_eye = delta_kernel_weights(1, np.eye(n))
        alpha = np.tile(rng.standard_normal((8, 8, 1)), (1, 1, n))
        layer_ones = lambda a: conv2d(a, w_ones, np.zeros(n), policy=ORDERED_DOUBLE)
        layer_eye = lambda a: conv2d(a, w_eye, np.zeros(n), policy=ORDERED_DOUBLE)
        factors = []
        for _ in range(100):
            eps = 1e-3 * rng.standard_normal((8, 8, n))
            factors.append(deviation_carry_factor(layer_ones, alpha, eps))
            assert deviation_carry_factor(layer_eye, alpha, eps) == pytest.approx(1.0, abs=1e-7)
        mean_factor = np.mean(factors)
        assert 0.8 / np.sqrt(n) < mean_factor < 1.2 / np.sqrt(n)


class TestOracleAgreement:
    def test_fifty_random_tensors_match_pair_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            shape = (
                rng.integers(1, 4) * 2 + 1,
                0,
                int(rng.integers(2, 7)),
                int(rng.integers(2, 7)),
            )
            w = rng.standard_normal((shape[0], shape[0], shape[2], shape[3]))
            if rng.random() < 0.2:
                w[..., rng.integers(0, shape[2]), :] = 0.0  # exercise zero convention
            cf = forward_correlation(w)
            oracle = pairwise_correlation_oracle(np.moveaxis(w, 2, 0))
            assert cf == pytest.approx(oracle, abs=1e-12)
            cb = backward_correlation(w)
            oracle_b = pairwise_correlation_oracle(np.moveaxis(w, 3, 0))
            assert cb == pytest.approx(oracle_b, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_positive_rescaling_invariance(seed, scale):
    w = np.random.default_rng(seed).standard_normal((3, 3, 4, 5))
    assert forward_correlation(w * scale) == pytest.approx(forward_correlation(w), abs=1e-12)
    assert backward_correlation(w * scale) == pytest.approx(backward_correlation(w), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_channel_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 3, 5, 4))
    perm_out = rng.permutation(5)
    perm_in = rng.permutation(4)
    assert forward_correlation(w[:, :, perm_out, :]) == pytest.approx(
        forward_correlation(w), abs=1e-12
    )
    assert backward_correlation(w[:, :, :, perm_in]) == pytest.approx(
        backward_correlation(w), abs=1e-12
    )


def test_correlation_report_on_symmetric_net(SyntheticBatch=None):
    from symbreak.architectures import ConstNetConfig, build_constnet
    from symbreak.nn import Phase, forward, backward, softmax_cross_entropy

    cfg = ConstNetConfig(n_blocks=2, base_width=8, widen_positions=(1,), in_shape=(8, 8, 3))
    net = build_constnet(cfg)
    rng = np.random.default_rng(7)
    batch = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
    logits, acts = forward(net, batch, Phase.TRAIN)
    _, dlogits = softmax_cross_entropy(logits, rng.integers(0, 10, 4))
    grads = backward(net, acts, dlogits)
    report = correlation_report(net, acts, grads)
    assert report.step == 0
    assert report.mean_dissimilarity == pytest.approx(0.0, abs=1e-12)
    for row in report.layers:
        assert row.c_f == 1.0 and row.c_b == 1.0
        assert row.effective_width == pytest.approx(1.0)
        if not np.isnan(row.c_h):
            assert row.c_h == pytest.approx(1.0, abs=1e-6)
        assert row.fwd_perturbation_ratio == pytest.approx(0.0, abs=1e-6)
    groups = {row.group for row in report.layers}
    assert groups == {0, 1, 2}  # two conv width segments + classifier head
