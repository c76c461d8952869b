"""Shared oracles: finite-difference gradients and a small-network zoo."""

import numpy as np

from symbreak import Boundary
from symbreak.nn import (
    AvgPoolAll,
    BatchNorm,
    Bias,
    Conv,
    Dense,
    Flatten,
    LeakyReLU,
    Network,
    ParallelSum,
    Phase,
    ReLU,
    SkipAdd,
    TrainingMechanisms,
    backward,
    forward,
    softmax_cross_entropy,
)

ORDERED_MECH = TrainingMechanisms()


def training_loss(net, batch, labels, mech=ORDERED_MECH):
    logits, acts = forward(net, batch, Phase.TRAIN, mech)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, dlogits, acts


def finite_difference_grads(net, batch, labels, h=1e-5):
    """Central differences of the mean cross-entropy wrt every parameter."""
    state0 = {k: v.copy() for k, v in net.state.items()}
    fd = {}
    for key, w in net.params.items():
        g = np.zeros_like(w, dtype=np.float64)
        flat = w.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _, _ = training_loss(net, batch, labels)
            flat[i] = orig - h
            lm, _, _ = training_loss(net, batch, labels)
            flat[i] = orig
            g.reshape(-1)[i] = (lp - lm) / (2 * h)
        fd[key] = g
    net.state.update(state0)  # undo running-stat drift from probe forwards
    return fd


def max_relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def small_network_zoo(n_nets=20, seed=0):
    """Random tiny float64 networks covering every layer type, <=1000 params."""
    rng = np.random.default_rng(seed)
    templates = [
        lambda: (
            [Dense(6, 8), ReLU(), Dense(8, 3)],
            (6,),
        ),
        lambda: (
            [Dense(5, 7, bias=False), LeakyReLU(0.2), Bias(7), BatchNorm(7), Dense(7, 4)],
            (5,),
        ),
        lambda: (
            [Conv(3, 2, 3), ReLU(), AvgPoolAll(), Dense(3, 3)],
            (6, 6, 2),
        ),
        lambda: (
            [Conv(3, 2, 2, stride=2, boundary=Boundary.ZERO), LeakyReLU(0.1),
             Flatten(), Dense(2 * 3 * 3, 3)],
            (5, 5, 2),
        ),
        lambda: (
            [SkipAdd((BatchNorm(2), ReLU(), Conv(3, 2, 2))), AvgPoolAll(), Dense(2, 3)],
            (4, 4, 2),
        ),
        lambda: (
            [ParallelSum(main=(Conv(1, 2, 4, stride=2),),
                         side=(ReLU(), Conv(3, 2, 4, stride=2))),
             AvgPoolAll(), Dense(4, 3)],
            (4, 4, 2),
        ),
        lambda: (
            [Conv(3, 2, 3), BatchNorm(3), ReLU(), Conv(1, 3, 2), AvgPoolAll(), Dense(2, 2)],
            (4, 4, 2),
        ),
    ]
    nets = []
    for i in range(n_nets):
        layers, in_shape = templates[i % len(templates)]()
        net = Network(layers, in_shape, dtype=np.float64)
        for key, w in net.params.items():
            if key.endswith(".gamma"):
                w += 0.3 * rng.standard_normal(w.shape)
            else:
                w[...] = 0.6 * rng.standard_normal(w.shape)
        n_params = sum(v.size for v in net.params.values())
        assert n_params <= 1000, n_params
        batch = rng.standard_normal((3,) + in_shape)
        labels = rng.integers(0, net.output_shape[0], size=3)
        nets.append((net, batch, labels))
    return nets
