"""symbreak: a deterministic lab for feature-symmetry breaking in deep nets.

Subpackages map to the moving parts of the study: policy-controlled tensor
reductions (reduction), a layered network with manual backprop and seedable
training-time noise (nn), symmetric/He/orthogonal builders (architectures),
weight- and feature-correlation diagnostics (metrics), the correlation
mean-field recursion (meanfield), dataset plumbing (data), runtime claim
verifiers (verify) and the experiment harness (training, cli).
"""

from .reduction import (
    Boundary,
    Mode,
    ORDERED_DOUBLE,
    ORDERED_SINGLE,
    Precision,
    ReductionPolicy,
    ShapeError,
    conv2d,
    elementwise,
    frobenius_dot,
    frobenius_norm,
    matmul,
    permutation_for,
    reduce_sum,
)

__all__ = [
    "Boundary",
    "Mode",
    "ORDERED_DOUBLE",
    "ORDERED_SINGLE",
    "Precision",
    "ReductionPolicy",
    "ShapeError",
    "conv2d",
    "elementwise",
    "frobenius_dot",
    "frobenius_norm",
    "matmul",
    "permutation_for",
    "reduce_sum",
]
