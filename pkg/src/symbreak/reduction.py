"""Minimal deterministic N-D tensor arithmetic with reduction-order control.

Tensors are plain numpy arrays (row-major, float32 for network state by
default, float64 for metrics).  All contractions go through a
:class:`ReductionPolicy`:

* ``ORDERED``  — each output entry is a strict left-to-right sequential sum
  of its terms in a fixed canonical enumeration, at the policy precision.
  Bit-identical across runs and platforms.
* ``SHUFFLED`` — each output entry sums its terms in a uniform random
  permutation drawn from a counter-based PRNG keyed on
  (policy.seed, call_index, flat output entry).  Equal seeds give
  bit-identical results; different seeds differ only by accumulation
  rounding.  This is the experimental stand-in for non-deterministic
  parallel hardware reductions.

Ops are pure functions; the caller supplies ``call_index`` (a monotone
counter owned by whoever runs a training step) so shuffled noise varies
call-to-call yet replays exactly.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels


class Mode(enum.Enum):
    ORDERED = "ordered"
    SHUFFLED = "shuffled"


class Precision(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self):
        return np.float32 if self is Precision.SINGLE else np.float64


class Boundary(enum.Enum):
    PERIODIC = "periodic"
    ZERO = "zero"


@dataclass(frozen=True)
class ReductionPolicy:
    mode: Mode = Mode.ORDERED
    seed: int = 0
    precision: Precision = Precision.SINGLE


ORDERED_SINGLE = ReductionPolicy(Mode.ORDERED, 0, Precision.SINGLE)
ORDERED_DOUBLE = ReductionPolicy(Mode.ORDERED, 0, Precision.DOUBLE)


class ShapeError(ValueError):
    """Raised on incompatible operand shapes; names the offending axis."""


def _as_policy_dtype(a, policy):
    return np.ascontiguousarray(a, dtype=policy.precision.dtype)


def _u64(x):
    return np.uint64(np.int64(x).view(np.uint64)) if x < 0 else np.uint64(x)


def permutation_for(policy, call_index, entry, n):
    """The term permutation a shuffled reduction uses for one output entry."""
    return _kernels.permutation_for(_u64(policy.seed), _u64(call_index), _u64(entry), n)


def reduce_sum(values, policy=ORDERED_SINGLE, call_index=0):
    """Sum a flat array under the policy.  Empty input sums to 0."""
    v = _as_policy_dtype(np.asarray(values).reshape(-1), policy)
    if v.size == 0:
        return policy.precision.dtype(0.0)
    if policy.mode is Mode.ORDERED:
        return _kernels.ordered_sum(v)
    perm = permutation_for(policy, call_index, 0, v.size)
    return _kernels.ordered_sum(v[perm])


def matmul(a, b, policy=ORDERED_SINGLE, call_index=0):
    """Matrix product; each entry is a policy-ordered sum of the k products."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner axes disagree: a has {a.shape[1]} columns, b has {b.shape[0]} rows"
        )
    a = _as_policy_dtype(a, policy)
    b = _as_policy_dtype(b, policy)
    if policy.mode is Mode.ORDERED:
        return _kernels.ordered_matmul(a, b)
    return _kernels.shuffled_matmul(a, b, _u64(policy.seed), _u64(call_index))


def conv_output_shape(h, w, k, stride, boundary):
    if k % 2 != 1:
        raise ShapeError(f"kernel extent must be odd, got {k}")
    if boundary is Boundary.PERIODIC:
        if h % stride or w % stride:
            raise ShapeError(
                f"periodic boundary requires spatial dims divisible by stride, got {(h, w)} stride {stride}"
            )
        return h // stride, w // stride
    return -(-h // stride), -(-w // stride)  # zero-pad 'same' then stride


def conv2d(x, weights, bias, stride=1, boundary=Boundary.PERIODIC,
           policy=ORDERED_SINGLE, call_index=0):
    """2-D convolution with centered taps.

    x: [H, W, Cin] or [B, H, W, Cin]; weights: [k, k, Cout, Cin];
    bias: [Cout].  Output channel o at location g sums
    W[kappa, o, c] * x[g*stride + kappa, c] over (c, kappa) under the policy,
    then adds bias.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [H,W,C] or [B,H,W,C], got {x.shape}")
    weights = np.asarray(weights)
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise ShapeError(f"conv2d weights must be [k,k,Cout,Cin], got {weights.shape}")
    if weights.shape[3] != x.shape[3]:
        raise ShapeError(
            f"conv2d channel axis disagrees: input has {x.shape[3]}, weights expect {weights.shape[3]}"
        )
    bias = np.asarray(bias)
    if bias.shape != (weights.shape[2],):
        raise ShapeError(f"conv2d bias must be [Cout]={weights.shape[2]}, got {bias.shape}")
    k = weights.shape[0]
    out_h, out_w = conv_output_shape(x.shape[1], x.shape[2], k, stride, boundary)
    periodic = boundary is Boundary.PERIODIC
    x = _as_policy_dtype(x, policy)
    b = _as_policy_dtype(bias, policy)
    if policy.mode is Mode.ORDERED:
        wt = _as_policy_dtype(np.transpose(weights, (0, 1, 3, 2)), policy)
        out = _kernels.conv2d_ordered(x, wt, b, stride, periodic, out_h, out_w)
    else:
        wt = _as_policy_dtype(np.transpose(weights, (0, 1, 3, 2)), policy)
        out = _kernels.conv2d_shuffled(
            x, wt, b, stride, periodic, out_h, out_w, _u64(policy.seed), _u64(call_index)
        )
    return out[0] if squeeze else out


_ELEMENTWISE = {
    "identity": lambda t: t,
    "relu": lambda t: np.maximum(t, 0),
    "tanh": np.tanh,
    "abs": np.abs,
    "square": lambda t: t * t,
}


def elementwise(map_tag, t, **kw):
    """Apply a named scalar map elementwise; leaky_relu takes rho."""
    if map_tag == "leaky_relu":
        rho = kw["rho"]
        t = np.asarray(t)
        return np.where(t > 0, t, t.dtype.type(rho) * t)
    try:
        fn = _ELEMENTWISE[map_tag]
    except KeyError:
        raise ValueError(f"unknown elementwise map {map_tag!r}") from None
    return fn(np.asarray(t))


def frobenius_dot(a, b):
    """Frobenius inner product, always 64-bit ordered (metric determinism)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_dot shape mismatch: {a.shape} vs {b.shape}")
    prod = a.reshape(-1).astype(np.float64) * b.reshape(-1).astype(np.float64)
    return float(_kernels.ordered_sum(prod))


def frobenius_norm(t):
    t = np.asarray(t).reshape(-1).astype(np.float64)
    return float(np.sqrt(_kernels.ordered_sum(t * t)))
