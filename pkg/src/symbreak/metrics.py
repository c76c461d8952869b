"""Weight/feature correlation metrics and symmetry diagnostics.

Conventions (all metrics computed in float64 with ordered reductions,
independent of the network's compute precision):

* forward correlation  — mean pairwise normalized Frobenius product of the
  per-output-channel weight sub-tensors; 1 means all output features are
  computed identically.
* backward correlation — same over per-input-channel sub-tensors.
* hidden / gradient correlation — same over the channel slices of a feature
  or feature-gradient tensor (channel axis first).
* zero-norm convention — a sub-tensor with exactly zero norm counts as
  perfectly correlated with every partner (zero init is the point of
  maximal symmetry), likewise when only one member of a pair is zero.
"""

from dataclasses import dataclass

import numpy as np

from .reduction import frobenius_norm
from .nn import Conv, Dense


def _pairwise_mean_correlation(subs):
    a = np.asarray(subs, dtype=np.float64).reshape(len(subs), -1)
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 sub-tensors, got {n}")
    norms = np.sqrt((a * a).sum(axis=1))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    gram = np.clip((a / safe[:, None]) @ (a / safe[:, None]).T, -1.0, 1.0)
    either_zero = zero[:, None] | zero[None, :]
    corr = np.where(either_zero, 1.0, gram)
    # bitwise-identical sub-tensors are exactly fully correlated; bypass the
    # rounding of normalize-then-dot so symmetric states read exactly 1
    groups = {}
    for i in range(n):
        groups.setdefault(a[i].tobytes(), []).append(i)
    for members in groups.values():
        if len(members) > 1:
            idx = np.asarray(members)
            corr[np.ix_(idx, idx)] = 1.0
    off = corr[~np.eye(n, dtype=bool)]
    return float(off.mean())


def pairwise_correlation_oracle(subs):
    """Brute-force double loop over ordered pairs; the dual route for tests."""
    a = np.asarray(subs, dtype=np.float64).reshape(len(subs), -1)
    n = a.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ni, nj = np.sqrt((a[i] ** 2).sum()), np.sqrt((a[j] ** 2).sum())
            total += 1.0 if ni == 0.0 or nj == 0.0 else float(a[i] @ a[j] / (ni * nj))
    return total / (n * (n - 1))


def _weight_subs(w, axis):
    w = np.asarray(w)
    if w.ndim == 2:  # dense [n_out, n_in]; treat as 1x1 convolution
        return w if axis == "out" else w.T
    if w.ndim == 4:  # conv [k, k, c_out, c_in]
        return np.moveaxis(w, 2 if axis == "out" else 3, 0)
    raise ValueError(f"weights must be 2-D or 4-D, got shape {w.shape}")


def forward_correlation(w):
    """C_f over per-output-channel sub-tensors; requires n_out >= 2."""
    return _pairwise_mean_correlation(_weight_subs(w, "out"))


def backward_correlation(w):
    """C_b over per-input-channel sub-tensors; requires n_in >= 2."""
    return _pairwise_mean_correlation(_weight_subs(w, "in"))


def hidden_correlation(h):
    """C_h of a feature tensor with the channel axis first."""
    return _pairwise_mean_correlation(np.asarray(h))


def gradient_correlation(g):
    """C_g of a feature-gradient tensor with the channel axis first."""
    return _pairwise_mean_correlation(np.asarray(g))


def effective_width(c_f, n):
    """1 + (n-1) * sqrt(1 - C_f^2): heuristic count of non-redundant channels."""
    if abs(c_f) > 1 + 1e-9:
        raise ValueError(f"|C_f| must be <= 1, got {c_f}")
    return 1.0 + (n - 1) * np.sqrt(max(0.0, 1.0 - c_f * c_f))


def mean_dissimilarity(per_layer_cf):
    """(1/L) sum sqrt(1 - C_f^2) over layers."""
    cfs = np.asarray(per_layer_cf, dtype=np.float64)
    if cfs.size == 0:
        raise ValueError("mean_dissimilarity needs a non-empty list")
    return float(np.sqrt(np.maximum(0.0, 1.0 - cfs**2)).mean())


def perturbation_ratio(t, direction="forward"):
    """Fraction of a tensor's norm off the all-ones channel direction.

    Channel axis last; the per-pixel projection removes the channel mean.
    A zero tensor is defined as fully symmetric (ratio 0).
    """
    del direction  # labels forward features vs gradients in reports only
    t = np.asarray(t, dtype=np.float64)
    total = frobenius_norm(t)
    if total == 0.0:
        return 0.0
    residual = t - t.mean(axis=-1, keepdims=True)
    return frobenius_norm(residual) / total


def deviation_carry_factor(apply_map, alpha, eps):
    """Norm carried through a map by an additive perturbation: ||f(a+e)-f(a)|| / ||e||.

    An identity channel map carries the deviation exactly (factor 1); the
    channel-averaging map attenuates i.i.d. deviations by about 1/sqrt(n).
    """
    delta = np.asarray(apply_map(alpha + eps), dtype=np.float64) - np.asarray(
        apply_map(alpha), dtype=np.float64
    )
    return frobenius_norm(delta) / frobenius_norm(eps)


# ---------------------------------------------------------------------------
# per-step report


@dataclass
class LayerCorrelation:
    layer_id: str
    group: int  # heuristic width-segment grouping
    n_out: int
    c_f: float
    c_b: float
    c_h: float = float("nan")
    c_g: float = float("nan")
    effective_width: float = float("nan")
    fwd_perturbation_ratio: float = float("nan")
    grad_perturbation_ratio: float = float("nan")


@dataclass
class CorrelationReport:
    step: int
    layers: list
    mean_dissimilarity: float


def _channels_first(feature):
    f = np.asarray(feature)
    return np.moveaxis(f, -1, 0).reshape(f.shape[-1], -1)


def correlation_report(net, acts=None, grads=None):
    """Snapshot every trainable layer's correlations at the current step.

    Feature correlations are measured over the whole batch (channel slices
    taken across batch and space).  Metrics run in float64/ordered always.
    """
    rows = []
    widths_seen = []
    for lid, layer in net.layer_by_id().items():
        if not isinstance(layer, (Conv, Dense)):
            continue
        n_out = layer.c_out if isinstance(layer, Conv) else layer.n_out
        n_in = layer.c_in if isinstance(layer, Conv) else layer.n_in
        if n_out < 2 or n_in < 2:
            continue
        if n_out not in widths_seen:
            widths_seen.append(n_out)
        w = net.params[f"{lid}.w"]
        row = LayerCorrelation(
            layer_id=lid,
            group=widths_seen.index(n_out),
            n_out=n_out,
            c_f=forward_correlation(w),
            c_b=backward_correlation(w),
        )
        row.effective_width = effective_width(row.c_f, n_out)
        if acts is not None and lid in acts.out:
            feat = acts.out[lid]
            row.c_h = hidden_correlation(_channels_first(feat))
            row.fwd_perturbation_ratio = perturbation_ratio(feat)
        if grads is not None and lid in grads.beta:
            g = grads.beta[lid]
            row.c_g = gradient_correlation(_channels_first(g))
            row.grad_perturbation_ratio = perturbation_ratio(g)
        rows.append(row)
    return CorrelationReport(
        step=net.step_counter,
        layers=rows,
        mean_dissimilarity=mean_dissimilarity([r.c_f for r in rows]),
    )
