"""Builders for the symmetric-initialization architectures and init schemes.

All builders are pure: they return a fresh Network whose parameters encode
the scheme exactly.  The three families:

* ConstNet  — averaging stem, skip blocks over zero convs, channel-averaging
  widening blocks, zero head; an exact identity on the trunk at init.
* LeakyNet  — delta-kernel channel maps alternating (+M, -M/rho) around
  leaky-ReLU activations so consecutive layer pairs compose to negation.
* Replicated MLP — single hidden layer whose weight rows are K unique
  He rows tiled N/K times, optionally mixed with independent noise.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from .reduction import Boundary, ShapeError
from .nn import (
    AvgPoolAll,
    BatchNorm,
    Conv,
    Dense,
    LeakyReLU,
    Network,
    ParallelSum,
    ReLU,
    SkipAdd,
)


def _gen(seed, stream=0):
    return Generator(Philox(key=[int(seed) & (2**64 - 1), stream]))


def fan_in_of(shape):
    if len(shape) == 2:  # dense [n_out, n_in]
        return shape[1]
    if len(shape) == 4:  # conv [k, k, c_out, c_in]
        return shape[0] * shape[1] * shape[3]
    raise ShapeError(f"cannot derive fan-in from shape {shape}")


def init_he(shape, seed, negative_slope=0.0, stream=0):
    """i.i.d. zero-mean Gaussian, variance 2 / ((1 + slope^2) * fan_in)."""
    var = 2.0 / ((1.0 + negative_slope**2) * fan_in_of(shape))
    return _gen(seed, stream).normal(0.0, np.sqrt(var), size=shape)


def haar_orthogonal(n, seed, stream=0):
    """Uniform orthogonal matrix: QR of a Gaussian with sign-fixed R diagonal."""
    g = _gen(seed, stream).standard_normal((n, n))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def delta_kernel_weights(k, channel_matrix):
    """Conv weights [k,k,Cout,Cin] that act as channel_matrix at every pixel."""
    cm = np.asarray(channel_matrix)
    w = np.zeros((k, k) + cm.shape)
    w[(k - 1) // 2, (k - 1) // 2] = cm
    return w


def init_delta_orthogonal(k, n, seed, stream=0):
    """Delta kernel times the blocked orthogonal map [[U,-U],[-U,U]], U Haar."""
    if n % 2:
        raise ShapeError(f"delta-orthogonal init needs even width, got {n}")
    u = haar_orthogonal(n // 2, seed, stream)
    block = np.block([[u, -u], [-u, u]])
    return delta_kernel_weights(k, block)


@dataclass(frozen=True)
class InitScheme:
    """Tagged weight initialization.

    kinds: zero | he | const_average | delta_identity | delta_ones |
    delta_orthogonal | linear_mix(gamma) | replicated(k_unique, lam).
    """

    kind: str
    seed: int = 0
    gamma: float = 1.0
    k_unique: int = 1
    lam: float = 0.0
    negative_slope: float = 0.0


def init_tensor(scheme, shape, stream=0):
    kind = scheme.kind
    if kind == "zero":
        return np.zeros(shape)
    if kind == "he":
        return init_he(shape, scheme.seed, scheme.negative_slope, stream)
    if len(shape) == 4:
        k, _, c_out, c_in = shape
        if kind == "const_average":
            return delta_kernel_weights(k, np.full((c_out, c_in), 1.0 / c_in))
        if kind == "delta_identity":
            if c_out == c_in:
                cm = np.eye(c_in)
            else:  # widen by duplicating each feature
                cm = np.zeros((c_out, c_in))
                cm[np.arange(c_out), np.arange(c_out) % c_in] = 1.0
            return delta_kernel_weights(k, cm)
        if kind == "delta_ones":
            return delta_kernel_weights(k, np.full((c_out, c_in), 1.0 / c_in))
        if kind == "linear_mix":
            if c_out != c_in:
                raise ShapeError("linear_mix needs square channel map")
            g = scheme.gamma
            cm = g * np.eye(c_in) + (1.0 - g) * np.full((c_in, c_in), 1.0 / c_in)
            return delta_kernel_weights(k, cm)
        if kind == "delta_orthogonal":
            if c_out != c_in:
                raise ShapeError("delta_orthogonal needs square channel map")
            return init_delta_orthogonal(k, c_in, scheme.seed, stream)
    if kind == "replicated":
        n, d = shape
        if n % scheme.k_unique:
            raise ShapeError(f"k_unique={scheme.k_unique} must divide width {n}")
        unique = init_he((scheme.k_unique, d), scheme.seed, stream=stream)
        fresh = init_he(shape, scheme.seed, stream=stream + 1)
        rows = unique[np.arange(n) % scheme.k_unique]
        return (1.0 - scheme.lam) * rows + scheme.lam * fresh
    raise ValueError(f"init scheme {kind!r} does not apply to shape {shape}")


# ---------------------------------------------------------------------------
# ConstNet


@dataclass(frozen=True)
class ConstNetConfig:
    n_blocks: int = 12
    base_width: int = 16
    widen_positions: tuple = (4, 8)
    stride: int = 2
    use_batchnorm: bool = True
    n_classes: int = 10
    in_shape: tuple = (32, 32, 3)
    boundary: Boundary = Boundary.PERIODIC
    bn_before_activation: bool = True  # block order BN -> ReLU -> Conv

    def __post_init__(self):
        if list(self.widen_positions) != sorted(set(self.widen_positions)):
            raise ValueError("widen_positions must be strictly increasing")
        if self.widen_positions and not (
            0 <= self.widen_positions[0] and self.widen_positions[-1] <= self.n_blocks
        ):
            raise ValueError("widen_positions out of range")
        extent = min(self.in_shape[0], self.in_shape[1])
        if extent // self.stride ** len(self.widen_positions) < 1:
            raise ValueError("spatial extent vanishes before the head")


def _const_side(width, c_out, stride, cfg):
    if cfg.use_batchnorm:
        pre = (BatchNorm(width), ReLU()) if cfg.bn_before_activation else (ReLU(), BatchNorm(width))
    else:
        pre = (ReLU(),)
    return pre + (Conv(3, width, c_out, stride=stride, boundary=cfg.boundary),)


def build_constnet(cfg=ConstNetConfig(), init="zero", seed=0, dtype=np.float32):
    """ConstNet: identity trunk at init, zero logits for every input.

    init="zero" gives the fully symmetric paper initialization; init="he"
    gives the random baseline with the same topology.
    """
    width = cfg.base_width
    layers = [Conv(3, cfg.in_shape[2], width, boundary=cfg.boundary, is_stem=True)]
    for b in range(cfg.n_blocks):
        if b in cfg.widen_positions:
            layers.append(
                ParallelSum(
                    main=(Conv(1, width, cfg.stride * width, stride=cfg.stride,
                               boundary=cfg.boundary, bias=False, dropout=False),),
                    side=_const_side(width, cfg.stride * width, cfg.stride, cfg),
                )
            )
            width *= cfg.stride
        layers.append(SkipAdd(_const_side(width, width, 1, cfg)))
    layers += [AvgPoolAll(), Dense(width, cfg.n_classes)]
    net = Network(layers, cfg.in_shape, dtype=dtype)

    stream = 0
    for lid, layer in net.layer_by_id().items():
        if not isinstance(layer, (Conv, Dense)):
            continue
        key = f"{lid}.w"
        if init == "he":
            net.params[key][...] = init_he(net.params[key].shape, seed, stream=stream)
        elif init == "zero":
            if layer.is_stem:
                net.params[key][...] = init_tensor(
                    InitScheme("const_average"), net.params[key].shape
                )
            elif isinstance(layer, Conv) and layer.k == 1:  # widening residual
                net.params[key][...] = init_tensor(
                    InitScheme("const_average"), net.params[key].shape
                )
            # skip-path convs and the head stay zero
        else:
            raise ValueError(f"unknown constnet init {init!r}")
        stream += 1

    trunk = []
    for i, layer in enumerate(net.layers):
        lid = f"{i}.{type(layer).__name__.lower()}"
        if isinstance(layer, (Conv, SkipAdd, ParallelSum)):
            trunk.append(lid)
    net.meta.update(
        family="constnet", cfg=cfg, init=init, trunk_ids=trunk,
        head_dense_id=f"{len(net.layers) - 1}.dense",
    )
    return net


# ---------------------------------------------------------------------------
# LeakyNet


@dataclass(frozen=True)
class LeakyNetConfig:
    n_conv_layers: int = 12
    rho: float = 0.01
    per_layer_init: tuple = ("I",) * 12  # entries: I | ones | mix:<gamma> | he
    base_width: int = 16
    widen_positions: tuple = ()
    stride: int = 2
    n_classes: int = 10
    in_shape: tuple = (32, 32, 3)
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        if len(self.per_layer_init) != self.n_conv_layers:
            raise ValueError(
                f"per_layer_init has {len(self.per_layer_init)} entries "
                f"for {self.n_conv_layers} conv layers"
            )
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0,1), got {self.rho}")


def _leaky_channel_map(tag, width):
    if tag == "I":
        return np.eye(width), True
    if tag == "ones":
        return np.full((width, width), 1.0 / width), True
    if tag.startswith("mix:"):
        g = float(tag.split(":", 1)[1])
        return g * np.eye(width) + (1 - g) * np.full((width, width), 1.0 / width), True
    if tag == "he":
        return None, False  # full He tensor, no deterministic alternation
    raise ValueError(f"unknown LeakyNet layer init {tag!r}")


def build_leakynet(cfg=LeakyNetConfig(), seed=0, dtype=np.float32):
    """LeakyNet: sign/scale-alternating delta-kernel convs around leaky ReLUs.

    Layer m (1-indexed) applies the channel map -M/rho when m is odd and +M
    when m is even, so sigma(-(1/rho) M sigma(M x)) composes to negation and
    the trunk is linear in the stem features at init.
    """
    width = cfg.base_width
    layers = [Conv(3, cfg.in_shape[2], width, boundary=cfg.boundary, is_stem=True)]
    conv_slots = []  # (layer index in sequence, 1-indexed conv number)
    for m in range(1, cfg.n_conv_layers + 1):
        if (m - 1) in cfg.widen_positions:
            layers.append(Conv(1, width, cfg.stride * width, stride=cfg.stride,
                               boundary=cfg.boundary, bias=False, dropout=False))
            conv_slots.append((len(layers) - 1, None))
            width *= cfg.stride
        layers.append(LeakyReLU(cfg.rho))
        layers.append(Conv(3, width, width, boundary=cfg.boundary))
        conv_slots.append((len(layers) - 1, m))
    layers += [AvgPoolAll(), Dense(width, cfg.n_classes)]
    net = Network(layers, cfg.in_shape, dtype=dtype)

    stem_key = "0.conv.w"
    net.params[stem_key][...] = init_tensor(InitScheme("const_average"),
                                            net.params[stem_key].shape)
    trunk = ["0.conv"]
    for idx, m in conv_slots:
        lid = f"{idx}.conv"
        key = f"{lid}.w"
        shape = net.params[key].shape
        if m is None:  # duplication widening
            net.params[key][...] = init_tensor(InitScheme("delta_identity"), shape)
        else:
            tag = cfg.per_layer_init[m - 1]
            cm, deterministic = _leaky_channel_map(tag, shape[3])
            if deterministic:
                scale = -1.0 / cfg.rho if m % 2 == 1 else 1.0
                net.params[key][...] = delta_kernel_weights(3, scale * cm)
            else:
                net.params[key][...] = init_he(shape, seed, cfg.rho, stream=m)
        trunk.append(lid)
    net.meta.update(
        family="leakynet", cfg=cfg, trunk_ids=trunk,
        conv_ids=[f"{idx}.conv" for idx, m in conv_slots if m is not None],
        head_dense_id=f"{len(net.layers) - 1}.dense",
    )
    return net


# ---------------------------------------------------------------------------
# replicated-feature MLP


def build_replicated_mlp(d_in, n, k_unique, lam, n_classes, seed, dtype=np.float32):
    """Two-layer MLP with K unique hidden features tiled N/K times at init."""
    if n % k_unique:
        raise ShapeError(f"k_unique={k_unique} must divide width {n}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0,1], got {lam}")
    net = Network(
        [Dense(d_in, n, bias=False, is_stem=True), ReLU(), Dense(n, n_classes, bias=False)],
        (d_in,), dtype=dtype,
    )
    net.params["0.dense.w"][...] = init_tensor(
        InitScheme("replicated", seed=seed, k_unique=k_unique, lam=lam), (n, d_in)
    )
    net.params["2.dense.w"][...] = init_he((n_classes, n), seed, stream=100)
    net.meta.update(family="mlp", trunk_ids=["0.dense"], head_dense_id="2.dense",
                    k_unique=k_unique, lam=lam)
    return net


def build_delta_orthogonal_stack(n_layers, width, in_shape, seed, k=3,
                                 dtype=np.float64):
    """Plain conv/ReLU stack with delta-orthogonal weights, for isometry checks."""
    layers = []
    for i in range(n_layers):
        if i > 0:
            layers.append(ReLU())
        layers.append(Conv(k, width, width, boundary=Boundary.PERIODIC, dropout=False))
    net = Network(layers, in_shape, dtype=dtype)
    convs = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv):
            lid = f"{i}.conv"
            net.params[f"{lid}.w"][...] = init_delta_orthogonal(k, width, seed, stream=i)
            convs.append(lid)
    net.meta.update(family="delta_orthogonal_stack", trunk_ids=convs)
    return net
