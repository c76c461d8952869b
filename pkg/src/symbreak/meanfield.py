"""Mean-field recursion for the co-evolution of weight correlations.

The recursion tracks, for one forward/backward group, the quadruple
(C_f, C_b, Q_f, Q_b): correlations and variances of the accumulated weight
updates.  Gaussian-expectation "mapping functions" transfer pre-activation
correlation/variance through an activation:

    M_Q(Q)  = E[phi(x)^2],            x ~ N(0, Q)
    M_C(C)  = E[phi(x1) phi(x2)] / E[phi(x1)^2],   (x1, x2) ~ N(0, Sigma_{Q,C})

Quadrature: Gaussian expectations are evaluated with Gauss-Legendre panels
split at the activation's kink locations (applied per-node to the
conditional inner integral), which keeps spectral accuracy for piecewise
definitions like ReLU and its Heaviside derivative where plain
Gauss-Hermite stalls at ~1e-3.  |C| is clamped to 1 - 1e-12; at or beyond
the clamp the bivariate law is treated as exactly degenerate (x2 = +/-x1),
so M_C(1) = 1 holds exactly for every deterministic activation.
"""

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numpy.random import Generator, Philox

C_CLAMP = 1.0 - 1e-12
_TAIL = 10.0  # integration half-width in standard deviations


@dataclass(frozen=True)
class GaussHermite:
    order: int = 48

    def __post_init__(self):
        if self.order < 16:
            raise ValueError(f"quadrature order must be >= 16, got {self.order}")


@dataclass(frozen=True)
class MonteCarlo:
    samples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.samples < 100_000:
            raise ValueError(f"need >= 1e5 Monte Carlo samples, got {self.samples}")


def _relu(x):
    return np.maximum(x, 0.0)


def _heaviside(x):
    return (x > 0).astype(np.float64)


_SCALAR_MAPS = {
    # tag: (phi, phi kinks, phi', phi' kinks)
    "relu": (_relu, (0.0,), _heaviside, (0.0,)),
    "identity": (lambda x: x, (), lambda x: np.ones_like(x), ()),
    "tanh": (np.tanh, (), lambda x: 1.0 - np.tanh(x) ** 2, ()),
}


@dataclass(frozen=True)
class ActivationMap:
    """Activation tag plus the quadrature used for its Gaussian expectations."""

    phi: str = "relu"
    rho: float = 0.01  # leaky slope
    quadrature: object = GaussHermite()

    def scalar(self, prime=False):
        if self.phi == "leaky_relu":
            rho = self.rho
            if prime:
                return (lambda x: np.where(x > 0, 1.0, rho)), (0.0,)
            return (lambda x: np.where(x > 0, x, rho * x)), (0.0,)
        try:
            f, fk, fp, fpk = _SCALAR_MAPS[self.phi]
        except KeyError:
            raise ValueError(f"unknown activation tag {self.phi!r}") from None
        return (fp, fpk) if prime else (f, fk)


@lru_cache(maxsize=8)
def _leggauss(order):
    return np.polynomial.legendre.leggauss(order)


def _legendre_panel(a, b, order):
    xs, ws = _leggauss(order)
    mid, half = (a + b) / 2.0, (b - a) / 2.0
    u = mid + half * xs
    w = half * ws * np.exp(-u * u / 2.0) / math.sqrt(2.0 * math.pi)
    return u, w


_BASE_SPLITS = (-5.0, -2.0, 0.0, 2.0, 5.0)  # keep panels narrow for the Gaussian weight


def _outer_nodes(kinks, order):
    pts = sorted({-_TAIL, _TAIL, *_BASE_SPLITS,
                  *(float(k) for k in kinks if -_TAIL < k < _TAIL)})
    nodes, weights = [], []
    for a, b in zip(pts[:-1], pts[1:]):
        u, w = _legendre_panel(a, b, order)
        nodes.append(u)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def _expect_single(fn, kinks, q, order):
    sq = math.sqrt(q)
    u, w = _outer_nodes([k / sq for k in kinks] if sq > 0 else [], order)
    return float(np.sum(w * fn(sq * u)))


def _expect_pair(f, fk, g, gk, c, q, order):
    """E[f(x1) g(x2)] for (x1,x2) ~ N(0, Q [[1,c],[c,1]]), |c| < 1."""
    sq = math.sqrt(q)
    r = math.sqrt(max(0.0, 1.0 - c * c))
    outer_splits = [k / sq for k in fk]
    if abs(c) > 1e-14:
        # refine around the u where the inner kink crosses the domain edge
        for kg in gk:
            u_star = kg / (c * sq)
            for t in (0.0, 1.0, 3.0, 10.0, 30.0):
                outer_splits += [u_star - t * r / abs(c), u_star + t * r / abs(c)]
    u, wu = _outer_nodes(outer_splits, order)
    fu = f(sq * u)

    xs, ws = _leggauss(order)
    if gk:
        vstar = np.clip((gk[0] / sq - c * u) / r, -_TAIL, _TAIL)
    else:
        vstar = np.full_like(u, _TAIL)
    rows = [np.full_like(u, -_TAIL), vstar, np.full_like(u, _TAIL)]
    rows += [np.full_like(u, s) for s in _BASE_SPLITS]
    bounds = np.sort(np.stack(rows), axis=0)  # [n_bounds, nu], panels per node
    total = np.zeros_like(u)
    for p in range(bounds.shape[0] - 1):
        a, b = bounds[p], bounds[p + 1]
        mid, half = (a + b) / 2.0, (b - a) / 2.0
        v = mid[:, None] + half[:, None] * xs[None, :]  # [nu, order]
        wv = half[:, None] * ws[None, :] * np.exp(-v * v / 2.0) / math.sqrt(2.0 * math.pi)
        x2 = sq * (c * u[:, None] + r * v)
        total += np.sum(wv * g(x2), axis=1)
    return float(np.sum(wu * fu * total))


def _mc_ratio(f, g, c, q, samples, seed):
    """Self-normalized MC estimate of E[f(x1)g(x2)] / E[f(x1)^2].

    Shared draws make numerator and denominator errors cancel in the ratio
    (and the estimate exactly 1 when g(x2) == f(x1)).
    """
    gen = Generator(Philox(key=[seed & (2**64 - 1), 0x6D63]))
    z1 = gen.standard_normal(samples)
    z2 = gen.standard_normal(samples)
    sq = math.sqrt(q)
    x1 = sq * z1
    x2 = sq * (c * z1 + math.sqrt(max(0.0, 1.0 - c * c)) * z2)
    f1 = f(x1)
    return float(np.mean(f1 * g(x2)) / np.mean(f1 * f1))


def _mc_single(fn, q, samples, seed):
    gen = Generator(Philox(key=[seed & (2**64 - 1), 0x6D64]))
    x = math.sqrt(q) * gen.standard_normal(samples)
    return float(np.mean(fn(x) ** 2))


def map_Q(act, q, prime=False):
    """E[phi(x)^2] for x ~ N(0, Q)."""
    if q < 0:
        raise ValueError(f"variance must be non-negative, got {q}")
    if q == 0:
        return 0.0
    fn, kinks = act.scalar(prime)
    if isinstance(act.quadrature, MonteCarlo):
        return _mc_single(fn, q, act.quadrature.samples, act.quadrature.seed)
    return _expect_single(lambda x: fn(x) ** 2, kinks, q, act.quadrature.order)


def map_C(act, c, q=1.0, prime=False):
    """Normalized post-activation correlation E[phi(x1)phi(x2)] / E[phi^2]."""
    if abs(c) > 1.0 + 1e-12:
        raise ValueError(f"|C| must be <= 1, got {c}")
    if q <= 0:
        raise ValueError(f"variance must be positive, got {q}")
    fn, kinks = act.scalar(prime)
    if abs(c) >= C_CLAMP:
        # degenerate bivariate law: x2 = sign(c) * x1 surely
        if c > 0:
            return 1.0
        num = _expect_single(lambda x: fn(x) * fn(-x), kinks, q,
                             getattr(act.quadrature, "order", 48))
        den = _expect_single(lambda x: fn(x) ** 2, kinks, q,
                             getattr(act.quadrature, "order", 48))
        return num / den
    if isinstance(act.quadrature, MonteCarlo):
        return _mc_ratio(fn, fn, c, q, act.quadrature.samples, act.quadrature.seed)
    num = _expect_pair(fn, kinks, fn, kinks, c, q, act.quadrature.order)
    den = _expect_single(lambda x: fn(x) ** 2, kinks, q, act.quadrature.order)
    return num / den


@dataclass(frozen=True)
class MapDerivatives:
    m_f_prime: float  # d/dC of M^{phi'}
    m_b_prime: float  # d/dC of M^{phi}
    near_singular: bool = False


def map_C_deriv(act, c, q=1.0, h=1e-5):
    """Central-difference slopes of both mapping functions at C.

    Near |C| = 1 the difference falls back to a one-sided stencil and the
    result is flagged near-singular (for ReLU, d/dC M^{phi'} diverges there).
    """
    near = abs(c) + h >= 1.0
    if near:
        lo, hi = (c - h, c) if c > 0 else (c, c + h)
    else:
        lo, hi = c - h, c + h
    out = []
    for prime in (True, False):
        m_hi = map_C(act, hi, q, prime=prime)
        m_lo = map_C(act, lo, q, prime=prime)
        out.append((m_hi - m_lo) / (hi - lo))
    return MapDerivatives(m_f_prime=out[0], m_b_prime=out[1], near_singular=near)


# ---------------------------------------------------------------------------
# the recursion


@dataclass(frozen=True)
class MeanFieldState:
    t: int = 0
    c_f: float = 1.0
    c_b: float = 1.0
    q_f: float = 1.0
    q_b: float = 1.0
    q_df: float = 0.0
    q_db: float = 0.0
    eta: float = 0.1
    lr_exponent: int = 1  # power of eta in the Q updates

    def __post_init__(self):
        if abs(self.c_f) > 1 or abs(self.c_b) > 1:
            raise ValueError("correlations must lie in [-1, 1]")
        if min(self.q_f, self.q_b, self.q_df, self.q_db) < 0:
            raise ValueError("variances must be non-negative")
        if self.lr_exponent not in (1, 2):
            raise ValueError("lr_exponent must be 1 or 2")


def step(state, act):
    """One recursion step: update-variance injection, then variance-weighted mixes."""
    e = state.lr_exponent
    q_db = state.eta**e * map_Q(act, state.q_f)
    q_df = state.eta**e * state.q_b * map_Q(act, state.q_f, prime=True)
    c_df = state.c_b * map_C(act, state.c_f, state.q_f, prime=True)
    c_db = map_C(act, state.c_f, state.q_f)
    if state.q_f + q_df == 0.0:
        raise ZeroDivisionError("Q_f + Q_df vanished; correlation mix undefined")
    if state.q_b + q_db == 0.0:
        raise ZeroDivisionError("Q_b + Q_db vanished; correlation mix undefined")
    c_f = (state.q_f * state.c_f + q_df * c_df) / (state.q_f + q_df)
    c_b = (state.q_b * state.c_b + q_db * c_db) / (state.q_b + q_db)
    return replace(
        state, t=state.t + 1, c_f=c_f, c_b=c_b,
        q_f=state.q_f + q_df, q_b=state.q_b + q_db, q_df=q_df, q_db=q_db,
    )


def fixed_point_residual(c_f, act, q=1.0):
    """M^{phi'}(C) * M^{phi}(C) - C; zero at fixed points of the recursion."""
    if abs(c_f) > 1:
        raise ValueError(f"|C_f| must be <= 1, got {c_f}")
    return map_C(act, c_f, q, prime=True) * map_C(act, c_f, q) - c_f


@dataclass(frozen=True)
class StabilityEigenvalues:
    lam1: float
    lam2: float
    jacobian: tuple  # ((dCf/dCf, dCf/dCb), (dCb/dCf, dCb/dCb))
    complex_pair: bool = False  # lam1/lam2 are moduli of a conjugate pair


def stability_eigenvalues(t, c_b, m_f, m_f_prime, m_b_prime):
    """Eigenvalues of the late-time Jacobian of the (C_f, C_b) recursion."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    jac = (
        (1.0 - (1.0 - c_b * m_f_prime) / t, m_f / t),
        (m_b_prime / t, 1.0 - 1.0 / t),
    )
    mid = 1.0 + (0.5 * c_b * m_f_prime - 1.0) / t
    disc = 0.25 * (c_b * m_f_prime) ** 2 + m_b_prime * m_f
    if disc >= 0.0:
        root = math.sqrt(disc) / t
        return StabilityEigenvalues(mid + root, mid - root, jac, complex_pair=False)
    modulus = math.hypot(mid, math.sqrt(-disc) / t)
    return StabilityEigenvalues(modulus, modulus, jac, complex_pair=True)


def empirical_update_correlations(net, batch, labels):
    """Forward/backward correlations of one actual gradient, per layer.

    The mean-field prediction for comparison is
    C_df = C_b(next) * M^{phi'}(C_f)  and  C_db = M^{phi}(C_f(prev)).
    """
    from .nn import Phase, backward, forward, softmax_cross_entropy
    from .metrics import backward_correlation, forward_correlation
    from .nn import Conv, Dense

    logits, acts = forward(net, batch, Phase.TRAIN)
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads = backward(net, acts, dlogits)
    out = {}
    for lid, layer in net.layer_by_id().items():
        if not isinstance(layer, (Conv, Dense)):
            continue
        n_out = layer.c_out if isinstance(layer, Conv) else layer.n_out
        n_in = layer.c_in if isinstance(layer, Conv) else layer.n_in
        if n_out < 2 or n_in < 2:
            continue
        g = grads.params[f"{lid}.w"]
        out[lid] = (forward_correlation(g), backward_correlation(g))
    return out
