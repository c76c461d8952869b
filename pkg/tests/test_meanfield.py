"""Mapping functions against arc-cosine closed forms; recursion fixed points."""

import math

import numpy as np
import pytest

from symbreak.architectures import build_constnet, build_replicated_mlp, ConstNetConfig
from symbreak.meanfield import (
    ActivationMap,
    GaussHermite,
    MeanFieldState,
    MonteCarlo,
    empirical_update_correlations,
    fixed_point_residual,
    map_C,
    map_C_deriv,
    map_Q,
    stability_eigenvalues,
    step,
)

RELU = ActivationMap("relu")
IDENT = ActivationMap("identity")
TANH = ActivationMap("tanh")
LEAKY = ActivationMap("leaky_relu", rho=0.1)
ALL_TAGS = (RELU, IDENT, TANH, LEAKY)


def relu_map_c_exact(c):
    # arc-cosine kernel, normalized by E[relu^2] = Q/2
    return (math.sqrt(1 - c * c) + c * (math.pi - math.acos(c))) / math.pi


def heaviside_map_c_exact(c):
    return 1.0 - math.acos(c) / math.pi


class TestMapQ:
    def test_relu_unit_variance_half(self):
        assert map_Q(RELU, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_identity_passes_variance(self):
        for q in (0.3, 1.0, 7.5):
            assert map_Q(IDENT, q) == pytest.approx(q, rel=1e-12)

    def test_relu_scaling_linearity_vs_monte_carlo(self):
        mc = ActivationMap("relu", quadrature=MonteCarlo(1_000_000, seed=1))
        assert map_Q(RELU, 4.0) == pytest.approx(2.0, abs=1e-12)
        assert map_Q(mc, 4.0) == pytest.approx(2.0, rel=5e-3)

    def test_heaviside_prime_map(self):
        assert map_Q(RELU, 1.0, prime=True) == pytest.approx(0.5, abs=1e-12)
        assert map_Q(RELU, 9.0, prime=True) == pytest.approx(0.5, abs=1e-12)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            map_Q(RELU, -1.0)


class TestMapC:
    def test_deterministic_maps_fix_one(self):
        for act in ALL_TAGS:
            assert map_C(act, 1.0) == pytest.approx(1.0, abs=1e-12)
            assert map_C(act, 1.0, prime=True) == pytest.approx(1.0, abs=1e-12)

    def test_relu_uncorrelated_one_over_pi(self):
        assert map_C(RELU, 0.0, 1.0) == pytest.approx(1 / math.pi, abs=1e-9)
        mc = ActivationMap("relu", quadrature=MonteCarlo(2_000_000, seed=2))
        assert map_C(mc, 0.0, 1.0) == pytest.approx(1 / math.pi, abs=3e-3)

    def test_identity_returns_c(self):
        for c in (-0.8, 0.0, 0.37, 0.99):
            assert map_C(IDENT, c) == pytest.approx(c, abs=1e-12)

    def test_relu_matches_arccos_kernel_on_grid(self):
        for c in (-0.9, -0.3, 0.0, 0.25, 0.5, 0.9, 0.99):
            assert map_C(RELU, c) == pytest.approx(relu_map_c_exact(c), abs=1e-9)
            assert map_C(RELU, c, prime=True) == pytest.approx(
                heaviside_map_c_exact(c), abs=1e-7
            )

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            map_C(RELU, 1.5)

    def test_quadrature_vs_monte_carlo_grid(self):
        gh32 = {
            "relu": ActivationMap("relu", quadrature=GaussHermite(32)),
            "tanh": ActivationMap("tanh", quadrature=GaussHermite(32)),
            "leaky_relu": ActivationMap("leaky_relu", rho=0.1, quadrature=GaussHermite(32)),
        }
        for tag, act in gh32.items():
            mc = ActivationMap(tag, rho=0.1, quadrature=MonteCarlo(1_000_000, seed=3))
            for c in (0.0, 0.5, -0.5, 0.9):
                for q in (0.5, 2.0):
                    assert map_C(act, c, q) == pytest.approx(map_C(mc, c, q), abs=1e-3)

    def test_monotone_nondecreasing_on_unit_interval(self):
        for act in (RELU, LEAKY, TANH):
            grid = np.linspace(0.0, 1.0, 100)
            vals = [map_C(act, c) for c in grid]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:])), act.phi


class TestMapCDeriv:
    def test_identity_slope_one(self):
        d = map_C_deriv(IDENT, 0.3)
        assert d.m_b_prime == pytest.approx(1.0, abs=1e-7)
        assert d.m_f_prime == pytest.approx(0.0, abs=1e-7)

    def test_relu_slopes_grow_toward_one(self):
        near = map_C_deriv(RELU, 1 - 1e-6)
        far = map_C_deriv(RELU, 1 - 1e-3)
        assert near.m_f_prime > far.m_f_prime  # heaviside map slope diverges
        assert near.m_b_prime > far.m_b_prime  # relu map slope still increases
        assert near.near_singular

    def test_relu_at_zero_matches_analytic(self):
        d = map_C_deriv(RELU, 0.0)
        assert d.m_f_prime == pytest.approx(1 / math.pi, abs=1e-3)
        assert d.m_b_prime == pytest.approx(0.5, abs=1e-3)


class TestRecursion:
    def test_fully_correlated_state_is_exactly_stationary(self):
        s = MeanFieldState(c_f=1.0, c_b=1.0, q_f=1.0, q_b=1.0, eta=0.1)
        for act in (RELU, TANH, LEAKY):
            cur = s
            for _ in range(20):
                cur = step(cur, act)
                assert cur.c_f == 1.0 and cur.c_b == 1.0

    def test_identity_activation_preserves_any_correlation(self):
        s = MeanFieldState(c_f=0.37, c_b=0.37, q_f=2.0, q_b=0.5, eta=0.2)
        for _ in range(10):
            s = step(s, IDENT)
            assert s.c_f == pytest.approx(0.37, abs=1e-10)
            assert s.c_b == pytest.approx(0.37, abs=1e-10)

    @pytest.mark.parametrize("eps", [1e-3, 1e-4, 1e-5])
    def test_relu_escapes_symmetric_fixed_point_monotonically(self, eps):
        s = MeanFieldState(c_f=1 - eps, c_b=1 - eps, q_f=1.0, q_b=1.0, eta=0.1)
        prev = s.c_f
        for _ in range(100):
            s = step(s, RELU)
            assert s.c_f < prev
            prev = s.c_f
        assert -1.0 <= s.c_f <= 1.0 and s.q_f >= 0 and s.q_b >= 0

    def test_variances_accumulate(self):
        s = MeanFieldState(c_f=0.5, c_b=0.5, q_f=1.0, q_b=1.0, eta=0.1)
        s2 = step(s, RELU)
        assert s2.q_f > s.q_f and s2.q_b > s.q_b
        assert s2.t == 1


class TestFixedPointResidual:
    def test_one_is_always_a_fixed_point(self):
        for act in ALL_TAGS:
            assert fixed_point_residual(1.0, act) == pytest.approx(0.0, abs=1e-12)

    def test_identity_residual_zero_everywhere(self):
        for c in (-0.7, 0.0, 0.4, 1.0):
            assert fixed_point_residual(c, IDENT) == pytest.approx(0.0, abs=1e-10)

    def test_relu_residual_at_zero(self):
        assert fixed_point_residual(0.0, RELU) == pytest.approx(
            0.5 * (1 / math.pi), abs=1e-9
        )


class TestStability:
    @pytest.mark.parametrize("t", [1, 10, 100])
    def test_symmetric_point_eigenvalue_closed_form(self, t):
        out = stability_eigenvalues(t, c_b=1.0, m_f=1.0, m_f_prime=1.0, m_b_prime=1.0)
        expect = 1.0 + (math.sqrt(1.25) - 0.5) / t
        assert out.lam1 == pytest.approx(expect, abs=1e-12)
        assert out.lam1 > 1.0

    def test_zero_slopes_give_contracting_pair(self):
        out = stability_eigenvalues(5, c_b=0.3, m_f=0.7, m_f_prime=0.0, m_b_prime=0.0)
        assert out.lam1 == pytest.approx(1 - 1 / 5, abs=1e-12)
        assert out.lam2 == pytest.approx(1 - 1 / 5, abs=1e-12)

    def test_matches_direct_eigensolver_on_random_draws(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            t = int(rng.integers(1, 50))
            c_b, m_f, m_fp, m_bp = rng.uniform(-1.5, 1.5, size=4)
            out = stability_eigenvalues(t, c_b, m_f, m_fp, m_bp)
            eig = np.linalg.eigvals(np.asarray(out.jacobian))
            if out.complex_pair:
                assert np.abs(np.abs(eig) - out.lam1).max() < 1e-10
            else:
                assert sorted(eig.real) == pytest.approx(
                    sorted((out.lam1, out.lam2)), abs=1e-10
                )


class TestEmpiricalUpdateCorrelations:
    def test_zero_final_layer_gives_full_correlation_by_convention(self):
        cfg = ConstNetConfig(n_blocks=2, base_width=8, widen_positions=(), in_shape=(8, 8, 3))
        net = build_constnet(cfg)
        rng = np.random.default_rng(5)
        batch = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
        out = empirical_update_correlations(net, batch, rng.integers(0, 10, 4))
        for lid, (c_df, c_db) in out.items():
            if lid.endswith("dense"):
                continue
            assert c_df == 1.0 and c_db == 1.0  # zero updates, zero convention

    def test_symmetric_net_updates_fully_correlated(self):
        cfg = ConstNetConfig(n_blocks=2, base_width=8, widen_positions=(1,), in_shape=(8, 8, 3))
        net = build_constnet(cfg)
        rng = np.random.default_rng(6)
        batch = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
        # one warm-up step so conv updates become nonzero yet stay symmetric
        from symbreak.nn import Phase, backward, forward, softmax_cross_entropy, sgd_momentum_step

        labels = rng.integers(0, 10, 4)
        for _ in range(2):
            logits, acts = forward(net, batch, Phase.TRAIN)
            _, dl = softmax_cross_entropy(logits, labels)
            sgd_momentum_step(net, backward(net, acts, dl), lr=0.1, momentum=0.9)
        out = empirical_update_correlations(net, batch, labels)
        for lid, (c_df, c_db) in out.items():
            if lid.endswith("dense"):
                continue
            assert c_df == pytest.approx(1.0, abs=1e-9), lid
            # the stem consumes raw image channels, which are not symmetric
            # features, so its backward update correlation is data-dependent
            if lid != "0.conv":
                assert c_db == pytest.approx(1.0, abs=1e-9), lid

    def test_wide_single_hidden_layer_matches_prediction(self):
        from symbreak.metrics import backward_correlation, forward_correlation

        net = build_replicated_mlp(128, 512, 512, 1.0, 10, seed=7, dtype=np.float64)
        rng = np.random.default_rng(8)
        batch = rng.standard_normal((16, 128))
        out = empirical_update_correlations(net, batch, rng.integers(0, 10, 16))
        c_f1 = forward_correlation(net.params["0.dense.w"])
        c_b2 = backward_correlation(net.params["2.dense.w"])
        prediction = c_b2 * map_C(RELU, c_f1, prime=True)
        c_df_hidden, _ = out["0.dense"]
        assert c_df_hidden == pytest.approx(prediction, abs=0.1)
