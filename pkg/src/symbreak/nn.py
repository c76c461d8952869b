"""Layer graph with manual reverse-mode differentiation and seedable noise.

A Network is an ordered list of layer specs plus a flat parameter store.
Forward/backward thread every contraction through the reduction policy of
the active :class:`TrainingMechanisms`, so accumulation-order noise is a
first-class, reproducible training mechanism.  Eval mode always runs
ordered reductions and no dropout.

Dropout placement: masks are applied to the features entering each Conv or
Dense layer that has its ``dropout`` flag set (builders clear the flag on
skip-path residual convs); the stem conv only participates when
``dropout_on_first_layer`` is set.  Masks are a pure function of
(seed, step, layer id, element index).
"""

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from . import _kernels
from .reduction import (
    Boundary,
    Mode,
    Precision,
    ReductionPolicy,
    ShapeError,
    conv2d,
    conv_output_shape,
    matmul,
)


class Phase(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class NaNAbort(RuntimeError):
    """Non-finite value detected in parameters or activations."""


class StaleActivations(RuntimeError):
    """backward() called with activations from a different step."""


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    bias: bool = True
    dropout: bool = True
    is_stem: bool = False


@dataclass(frozen=True)
class Conv:
    k: int
    c_in: int
    c_out: int
    stride: int = 1
    boundary: Boundary = Boundary.PERIODIC
    bias: bool = True
    dropout: bool = True
    is_stem: bool = False


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class LeakyReLU:
    rho: float


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class AvgPoolAll:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Bias:
    n: int


@dataclass(frozen=True)
class SkipAdd:
    inner: tuple


@dataclass(frozen=True)
class ParallelSum:
    """Sum of two branches over the same input (widening blocks)."""

    main: tuple
    side: tuple


@dataclass(frozen=True)
class TrainingMechanisms:
    dropout_rate: float = 0.0
    dropout_on_first_layer: bool = False
    init_noise_lambda: float = 0.0
    reduction: ReductionPolicy = ReductionPolicy()
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")


EVAL_MECH = TrainingMechanisms()


# ---------------------------------------------------------------------------
# shape inference / parameter allocation


def _out_shape(layer, shape):
    if isinstance(layer, Dense):
        if shape != (layer.n_in,):
            raise ShapeError(f"Dense expects ({layer.n_in},), got {shape}")
        return (layer.n_out,)
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[2] != layer.c_in:
            raise ShapeError(f"Conv expects (H,W,{layer.c_in}), got {shape}")
        oh, ow = conv_output_shape(shape[0], shape[1], layer.k, layer.stride, layer.boundary)
        return (oh, ow, layer.c_out)
    if isinstance(layer, BatchNorm):
        if shape[-1] != layer.channels:
            raise ShapeError(f"BatchNorm expects {layer.channels} channels, got {shape}")
        return shape
    if isinstance(layer, AvgPoolAll):
        if len(shape) != 3:
            raise ShapeError(f"AvgPoolAll expects (H,W,C), got {shape}")
        return (shape[2],)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Bias):
        if shape != (layer.n,):
            raise ShapeError(f"Bias expects ({layer.n},), got {shape}")
        return shape
    if isinstance(layer, SkipAdd):
        out = shape
        for sub in layer.inner:
            out = _out_shape(sub, out)
        if out != shape:
            raise ShapeError(f"SkipAdd block maps {shape} to {out}; shapes must match")
        return shape
    if isinstance(layer, ParallelSum):
        out_a = shape
        for sub in layer.main:
            out_a = _out_shape(sub, out_a)
        out_b = shape
        for sub in layer.side:
            out_b = _out_shape(sub, out_b)
        if out_a != out_b:
            raise ShapeError(f"ParallelSum branches map {shape} to {out_a} vs {out_b}")
        return out_a
    return shape  # activations


def _walk(layers, prefix=""):
    """Yield (layer_id, layer) depth-first, ids stable under nesting."""
    for i, layer in enumerate(layers):
        lid = f"{prefix}{i}.{type(layer).__name__.lower()}"
        yield lid, layer
        if isinstance(layer, SkipAdd):
            yield from _walk(layer.inner, prefix=f"{lid}/")
        elif isinstance(layer, ParallelSum):
            yield from _walk(layer.main, prefix=f"{lid}/m")
            yield from _walk(layer.side, prefix=f"{lid}/s")


class Network:
    """Layer specs + named parameter state + momentum buffers."""

    def __init__(self, layers, input_shape, dtype=np.float32, meta=None):
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.meta = dict(meta or {})
        self.step_counter = 0
        self.noise_calls = 0
        self.params = {}
        self.state = {}
        shape = self.input_shape
        for layer in self.layers:
            shape = _out_shape(layer, shape)
        self.output_shape = shape
        for lid, layer in _walk(self.layers):
            if isinstance(layer, Dense):
                self.params[f"{lid}.w"] = np.zeros((layer.n_out, layer.n_in), self.dtype)
                if layer.bias:
                    self.params[f"{lid}.b"] = np.zeros(layer.n_out, self.dtype)
            elif isinstance(layer, Conv):
                self.params[f"{lid}.w"] = np.zeros(
                    (layer.k, layer.k, layer.c_out, layer.c_in), self.dtype
                )
                if layer.bias:
                    self.params[f"{lid}.b"] = np.zeros(layer.c_out, self.dtype)
            elif isinstance(layer, BatchNorm):
                self.params[f"{lid}.gamma"] = np.ones(layer.channels, self.dtype)
                self.params[f"{lid}.beta"] = np.zeros(layer.channels, self.dtype)
                self.state[f"{lid}.running_mean"] = np.zeros(layer.channels, self.dtype)
                self.state[f"{lid}.running_var"] = np.ones(layer.channels, self.dtype)
            elif isinstance(layer, Bias):
                self.params[f"{lid}.b"] = np.zeros(layer.n, self.dtype)
        self.momentum = {k: np.zeros_like(v) for k, v in self.params.items()}

    def trainable_ids(self):
        return [lid for lid, layer in _walk(self.layers) if isinstance(layer, (Dense, Conv))]

    def layer_by_id(self):
        return dict(_walk(self.layers))

    def next_noise_call(self):
        self.noise_calls += 1
        return self.noise_calls - 1


@dataclass
class Activations:
    """Per-layer forward record tied to the step it was computed at."""

    step_counter: int
    batch: np.ndarray
    logits: np.ndarray
    out: dict
    caches: dict
    phase: Phase
    mech: TrainingMechanisms


@dataclass
class Gradients:
    params: dict
    beta: dict = field(default_factory=dict)  # dL/d(layer output), per layer id
    alpha: dict = field(default_factory=dict)  # layer outputs, per layer id


# ---------------------------------------------------------------------------
# mechanisms


def _layer_hash(layer_id):
    return int.from_bytes(hashlib.blake2b(layer_id.encode(), digest_size=8).digest(), "little")


def dropout_mask(shape, rate, seed, step, layer_id):
    gen = Generator(Philox(key=[seed & (2**64 - 1), _layer_hash(layer_id)],
                           counter=[0, 0, 0, step]))
    return gen.random(shape) >= rate


def apply_dropout(t, rate, seed, step=0, layer_id=""):
    """Zero each element with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return t
    mask = dropout_mask(t.shape, rate, seed, step, layer_id)
    return (t * mask) / t.dtype.type(1.0 - rate)


def lr_schedule(epoch, base_lr, milestones, decay):
    """base_lr * decay**(number of milestones <= epoch)."""
    return base_lr * decay ** sum(1 for m in milestones if m <= epoch)


# ---------------------------------------------------------------------------
# forward / backward engine


def _policy_for(net, phase, mech):
    precision = Precision.SINGLE if net.dtype == np.float32 else Precision.DOUBLE
    if phase is Phase.TRAIN:
        return ReductionPolicy(mech.reduction.mode, mech.reduction.seed, precision)
    return ReductionPolicy(Mode.ORDERED, 0, precision)


def _call_idx(net, policy):
    return net.next_noise_call() if policy.mode is Mode.SHUFFLED else 0


def _maybe_dropout(layer, lid, x, net, phase, mech):
    if phase is not Phase.TRAIN or mech.dropout_rate == 0.0 or not layer.dropout:
        return x
    if layer.is_stem and not mech.dropout_on_first_layer:
        return x
    return apply_dropout(x, mech.dropout_rate, mech.rng_seed, net.step_counter, lid)


def _fwd_layer(net, lid, layer, x, phase, mech, out, caches):
    policy = _policy_for(net, phase, mech)
    if isinstance(layer, Dense):
        xd = _maybe_dropout(layer, lid, x, net, phase, mech)
        w = net.params[f"{lid}.w"]
        y = matmul(xd, w.T, policy, _call_idx(net, policy))
        if layer.bias:
            y = y + net.params[f"{lid}.b"]
        caches[lid] = xd
        return y
    if isinstance(layer, Conv):
        xd = _maybe_dropout(layer, lid, x, net, phase, mech)
        w = net.params[f"{lid}.w"]
        b = net.params.get(f"{lid}.b", np.zeros(layer.c_out, net.dtype))
        y = conv2d(xd, w, b, layer.stride, layer.boundary, policy, _call_idx(net, policy))
        caches[lid] = xd
        return y
    if isinstance(layer, ReLU):
        caches[lid] = x > 0
        return np.maximum(x, 0)
    if isinstance(layer, LeakyReLU):
        mask = x > 0  # gradient at exactly 0 uses the slope rho
        caches[lid] = mask
        return np.where(mask, x, x.dtype.type(layer.rho) * x)
    if isinstance(layer, BatchNorm):
        return _bn_forward(net, lid, layer, x, phase, caches)
    if isinstance(layer, AvgPoolAll):
        caches[lid] = x.shape
        return x.mean(axis=(1, 2), dtype=x.dtype)
    if isinstance(layer, Flatten):
        caches[lid] = x.shape
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, Bias):
        return x + net.params[f"{lid}.b"]
    if isinstance(layer, SkipAdd):
        y = _fwd_seq(net, layer.inner, f"{lid}/", x, phase, mech, out, caches)
        return x + y
    if isinstance(layer, ParallelSum):
        ya = _fwd_seq(net, layer.main, f"{lid}/m", x, phase, mech, out, caches)
        yb = _fwd_seq(net, layer.side, f"{lid}/s", x, phase, mech, out, caches)
        return ya + yb
    raise TypeError(f"unknown layer {layer!r}")


def _fwd_seq(net, layers, prefix, x, phase, mech, out, caches):
    for i, layer in enumerate(layers):
        lid = f"{prefix}{i}.{type(layer).__name__.lower()}"
        x = _fwd_layer(net, lid, layer, x, phase, mech, out, caches)
        out[lid] = x
    return x


def _bn_forward(net, lid, layer, x, phase, caches):
    axes = tuple(range(x.ndim - 1))
    gamma = net.params[f"{lid}.gamma"]
    beta = net.params[f"{lid}.beta"]
    if phase is Phase.TRAIN:
        mu = x.mean(axis=axes, dtype=x.dtype)
        var = x.var(axis=axes, dtype=x.dtype)
        m = x.dtype.type(layer.momentum)
        net.state[f"{lid}.running_mean"] = (1 - m) * net.state[f"{lid}.running_mean"] + m * mu
        net.state[f"{lid}.running_var"] = (1 - m) * net.state[f"{lid}.running_var"] + m * var
    else:
        mu = net.state[f"{lid}.running_mean"]
        var = net.state[f"{lid}.running_var"]
    inv = 1.0 / np.sqrt(var + x.dtype.type(layer.eps))
    inv = inv.astype(x.dtype)
    xhat = (x - mu) * inv
    caches[lid] = (xhat, inv, axes, phase)
    return gamma * xhat + beta


def forward(net, batch, phase=Phase.EVAL, mech=EVAL_MECH):
    """Run the network; returns (logits, per-layer activation record)."""
    batch = np.asarray(batch, dtype=net.dtype)
    if batch.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} != network input {net.input_shape}")
    out, caches = {}, {}
    logits = _fwd_seq(net, net.layers, "", batch, phase, mech, out, caches)
    if not np.all(np.isfinite(logits)):
        raise NaNAbort("non-finite logits in forward pass")
    return logits, Activations(net.step_counter, batch, logits, out, caches, phase, mech)


def _colsum(m, policy, call_index):
    m = np.ascontiguousarray(m, dtype=policy.precision.dtype)
    if policy.mode is Mode.ORDERED:
        return _kernels.ordered_colsum(m)
    return _kernels.shuffled_colsum(m, np.uint64(policy.seed), np.uint64(call_index))


def _bwd_layer(net, lid, layer, dy, acts, grads, phase, mech):
    policy = _policy_for(net, phase, mech)
    if isinstance(layer, Dense):
        x = acts.caches[lid]
        w = net.params[f"{lid}.w"]
        dx = matmul(dy, w, policy, _call_idx(net, policy))
        grads.params[f"{lid}.w"] = matmul(dy.T, x, policy, _call_idx(net, policy))
        if layer.bias:
            grads.params[f"{lid}.b"] = _colsum(dy, policy, _call_idx(net, policy))
        return _undo_dropout(layer, lid, dx, net, acts, phase, mech)
    if isinstance(layer, Conv):
        x = acts.caches[lid]
        w = net.params[f"{lid}.w"]
        periodic = layer.boundary is Boundary.PERIODIC
        dyc = np.ascontiguousarray(dy, dtype=policy.precision.dtype)
        xc = np.ascontiguousarray(x, dtype=policy.precision.dtype)
        wc = np.ascontiguousarray(w, dtype=policy.precision.dtype)
        if policy.mode is Mode.ORDERED:
            dx = _kernels.conv2d_bwd_input_ordered(
                dyc, wc, layer.stride, periodic, x.shape[1], x.shape[2]
            )
            dw = _kernels.conv2d_bwd_weights_ordered(xc, dyc, layer.stride, periodic, layer.k)
        else:
            dx = _kernels.conv2d_bwd_input_shuffled(
                dyc, wc, layer.stride, periodic, x.shape[1], x.shape[2],
                np.uint64(policy.seed), np.uint64(_call_idx(net, policy)),
            )
            dw = _kernels.conv2d_bwd_weights_shuffled(
                xc, dyc, layer.stride, periodic, layer.k,
                np.uint64(policy.seed), np.uint64(_call_idx(net, policy)),
            )
        grads.params[f"{lid}.w"] = dw
        if layer.bias:
            grads.params[f"{lid}.b"] = _colsum(
                dy.reshape(-1, layer.c_out), policy, _call_idx(net, policy)
            )
        return _undo_dropout(layer, lid, dx, net, acts, phase, mech)
    if isinstance(layer, ReLU):
        return dy * acts.caches[lid]
    if isinstance(layer, LeakyReLU):
        mask = acts.caches[lid]
        return np.where(mask, dy, dy.dtype.type(layer.rho) * dy)
    if isinstance(layer, BatchNorm):
        return _bn_backward(net, lid, layer, dy, acts, grads)
    if isinstance(layer, AvgPoolAll):
        b, h, w, c = acts.caches[lid]
        scale = dy.dtype.type(1.0 / (h * w))
        return np.broadcast_to((dy * scale)[:, None, None, :], (b, h, w, c)).copy()
    if isinstance(layer, Flatten):
        return dy.reshape(acts.caches[lid])
    if isinstance(layer, Bias):
        grads.params[f"{lid}.b"] = _colsum(dy, policy, _call_idx(net, policy))
        return dy
    if isinstance(layer, SkipAdd):
        dx_inner = _bwd_seq(net, layer.inner, f"{lid}/", dy, acts, grads, phase, mech)
        return dy + dx_inner
    if isinstance(layer, ParallelSum):
        da = _bwd_seq(net, layer.main, f"{lid}/m", dy, acts, grads, phase, mech)
        db = _bwd_seq(net, layer.side, f"{lid}/s", dy, acts, grads, phase, mech)
        return da + db
    raise TypeError(f"unknown layer {layer!r}")


def _undo_dropout(layer, lid, dx, net, acts, phase, mech):
    # gradient of the dropout mask applied in forward (same key, same mask)
    if phase is not Phase.TRAIN or mech.dropout_rate == 0.0 or not layer.dropout:
        return dx
    if layer.is_stem and not mech.dropout_on_first_layer:
        return dx
    mask = dropout_mask(dx.shape, mech.dropout_rate, mech.rng_seed, acts.step_counter, lid)
    return dx * mask / dx.dtype.type(1.0 - mech.dropout_rate)


def _bn_backward(net, lid, layer, dy, acts, grads):
    xhat, inv, axes, bn_phase = acts.caches[lid]
    gamma = net.params[f"{lid}.gamma"]
    grads.params[f"{lid}.gamma"] = (dy * xhat).sum(axis=axes, dtype=dy.dtype)
    grads.params[f"{lid}.beta"] = dy.sum(axis=axes, dtype=dy.dtype)
    dxhat = dy * gamma
    if bn_phase is Phase.EVAL:
        return dxhat * inv  # running stats: constants wrt the batch
    n = dy.dtype.type(np.prod([dy.shape[a] for a in axes]))
    return (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=axes, dtype=dy.dtype)
        - xhat * (dxhat * xhat).sum(axis=axes, dtype=dy.dtype)
    )


def _bwd_seq(net, layers, prefix, dy, acts, grads, phase, mech):
    last = f"{prefix}{len(layers) - 1}.{type(layers[-1]).__name__.lower()}"
    grads.beta[last] = dy
    for i in reversed(range(len(layers))):
        layer = layers[i]
        lid = f"{prefix}{i}.{type(layer).__name__.lower()}"
        dy = _bwd_layer(net, lid, layer, dy, acts, grads, phase, mech)
        if i > 0:
            prev_lid = f"{prefix}{i - 1}.{type(layers[i - 1]).__name__.lower()}"
            grads.beta[prev_lid] = dy
    return dy


def backward(net, acts, loss_grad):
    """Reverse traversal; returns parameter gradients and per-layer features.

    ``loss_grad`` is dL/dlogits.  The Gradients record exposes, per layer id,
    the gradient of the loss with respect to that layer's output (beta) next
    to the forward output itself (alpha).
    """
    if acts.step_counter != net.step_counter:
        raise StaleActivations(
            f"activations from step {acts.step_counter}, network at {net.step_counter}"
        )
    grads = Gradients(params={})
    dy = np.asarray(loss_grad, dtype=net.dtype)
    _bwd_seq(net, net.layers, "", dy, acts, grads, acts.phase, acts.mech)
    for k in net.params:
        grads.params.setdefault(k, np.zeros_like(net.params[k]))
    grads.alpha = acts.out
    return grads


# ---------------------------------------------------------------------------
# loss / optimizer


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy with the max-subtraction trick; returns (loss, dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    nll = -np.log(p[np.arange(n), labels])
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(nll.mean()), (dlogits / n).astype(np.asarray(logits).dtype)


def accuracy(logits, labels):
    return float((np.argmax(logits, axis=1) == np.asarray(labels)).mean())


def sgd_momentum_step(net, grads, lr, momentum=0.0):
    """v <- momentum*v + g;  w <- w - lr*v;  aborts on non-finite parameters."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0,1), got {momentum}")
    for key, w in net.params.items():
        g = grads.params[key].astype(w.dtype)
        v = net.momentum[key]
        v *= w.dtype.type(momentum)
        v += g
        w -= w.dtype.type(lr) * v
        if not np.all(np.isfinite(w)):
            raise NaNAbort(f"non-finite parameter {key} after step {net.step_counter}")
    net.step_counter += 1
    return net
