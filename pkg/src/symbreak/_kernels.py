"""Compiled reduction kernels with explicit floating-point accumulation order.

Every kernel accumulates each output entry strictly term-by-term, so results
are reproducible bit-for-bit and independent of BLAS/SIMD reassociation.
Ordered kernels use a fixed canonical enumeration of the reduction terms
(documented per kernel).  Shuffled kernels draw one uniform permutation of
the reduction terms per output entry from a counter-based splitmix64 stream
keyed on (seed, call index, flat entry index), simulating the scheduling
noise of parallel hardware reductions.

numba is used with fastmath disabled: no FMA contraction, no reassociation.
"""

import numpy as np
from numba import njit, uint64

U64 = np.uint64
_MIX1 = U64(0x9E3779B97F4A7C15)
_MIX2 = U64(0xBF58476D1CE4E5B9)
_MIX3 = U64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> uint64(30))) * _MIX2
    z = (z ^ (z >> uint64(27))) * _MIX3
    return z ^ (z >> uint64(31))


@njit(cache=True, inline="always")
def _entry_state(seed, call_index, entry):
    s = _mix(seed + _MIX1)
    s = _mix(s ^ (call_index + _MIX2))
    return _mix(s ^ (entry + _MIX3))


@njit(cache=True, inline="always")
def _next(state):
    state = state + _MIX1
    return state, _mix(state)


@njit(cache=True)
def fill_permutation(idx, seed, call_index, entry):
    """Fisher-Yates permutation of 0..len(idx)-1 into idx (modulo draw)."""
    n = idx.shape[0]
    for t in range(n):
        idx[t] = t
    state = _entry_state(seed, call_index, entry)
    for t in range(n - 1, 0, -1):
        state, z = _next(state)
        j = z % uint64(t + 1)
        tmp = idx[t]
        idx[t] = idx[j]
        idx[j] = tmp
    return idx


def permutation_for(seed, call_index, entry, n):
    """Permutation used by shuffled reductions for one output entry."""
    idx = np.empty(n, dtype=np.int64)
    fill_permutation(idx, U64(seed), U64(call_index), U64(entry))
    return idx


@njit(cache=True)
def ordered_sum(values):
    acc = values.dtype.type(0)
    for t in range(values.shape[0]):
        acc = acc + values[t]
    return acc


@njit(cache=True)
def ordered_colsum(m):
    # rows accumulated first-to-last per column
    n, c = m.shape
    out = np.zeros(c, dtype=m.dtype)
    for t in range(n):
        for j in range(c):
            out[j] = out[j] + m[t, j]
    return out


@njit(cache=True)
def shuffled_colsum(m, seed, call_index):
    n, c = m.shape
    out = np.zeros(c, dtype=m.dtype)
    idx = np.empty(n, dtype=np.int64)
    for j in range(c):
        fill_permutation(idx, seed, call_index, uint64(j))
        acc = m.dtype.type(0)
        for t in range(n):
            acc = acc + m[idx[t], j]
        out[j] = acc
    return out


@njit(cache=True)
def ordered_matmul(a, b):
    # out[i, j] accumulates a[i, t] * b[t, j] in increasing t
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for t in range(k):
            av = a[i, t]
            for j in range(n):
                out[i, j] = out[i, j] + av * b[t, j]
    return out


@njit(cache=True)
def shuffled_matmul(a, b, seed, call_index):
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=a.dtype)
    idx = np.empty(k, dtype=np.int64)
    for i in range(m):
        for j in range(n):
            fill_permutation(idx, seed, call_index, uint64(i * n + j))
            acc = a.dtype.type(0)
            for t in range(k):
                p = idx[t]
                acc = acc + a[i, p] * b[p, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def conv2d_ordered(x, wt, bias, stride, periodic, out_h, out_w):
    """Forward convolution, centered taps, strict term order per entry.

    x: [B, H, W, Cin], wt: [k, k, Cin, Cout] (channel-last for SIMD),
    reduction order per output entry: input channel outer, taps row-major
    inner.  Periodic wraps spatial indices; zero boundary skips them.
    """
    bsz, h, w, cin = x.shape
    k = wt.shape[0]
    cout = wt.shape[3]
    c0 = (k - 1) // 2
    out = np.zeros((bsz, out_h, out_w, cout), dtype=x.dtype)
    for c in range(cin):
        for kh in range(k):
            for kw in range(k):
                for b in range(bsz):
                    for oy in range(out_h):
                        iy = oy * stride + kh - c0
                        if periodic:
                            iy = iy % h
                        elif iy < 0 or iy >= h:
                            continue
                        for ox in range(out_w):
                            ix = ox * stride + kw - c0
                            if periodic:
                                ix = ix % w
                            elif ix < 0 or ix >= w:
                                continue
                            xv = x[b, iy, ix, c]
                            for o in range(cout):
                                out[b, oy, ox, o] = out[b, oy, ox, o] + wt[kh, kw, c, o] * xv
    for o in range(cout):
        bv = bias[o]
        for b in range(bsz):
            for oy in range(out_h):
                for ox in range(out_w):
                    out[b, oy, ox, o] = out[b, oy, ox, o] + bv
    return out


@njit(cache=True)
def conv2d_shuffled(x, wt, bias, stride, periodic, out_h, out_w, seed, call_index):
    bsz, h, w, cin = x.shape
    k = wt.shape[0]
    cout = wt.shape[3]
    c0 = (k - 1) // 2
    out = np.empty((bsz, out_h, out_w, cout), dtype=x.dtype)
    kmax = cin * k * k
    vals = np.empty(kmax, dtype=x.dtype)
    idx = np.empty(kmax, dtype=np.int64)
    for b in range(bsz):
        for oy in range(out_h):
            for ox in range(out_w):
                base = ((b * out_h + oy) * out_w + ox) * cout
                # gather valid products once per spatial entry, per channel o
                for o in range(cout):
                    nt = 0
                    for c in range(cin):
                        for kh in range(k):
                            iy = oy * stride + kh - c0
                            if periodic:
                                iy = iy % h
                            elif iy < 0 or iy >= h:
                                continue
                            for kw in range(k):
                                ix = ox * stride + kw - c0
                                if periodic:
                                    ix = ix % w
                                elif ix < 0 or ix >= w:
                                    continue
                                vals[nt] = wt[kh, kw, c, o] * x[b, iy, ix, c]
                                nt += 1
                    fill_permutation(idx[:nt], seed, call_index, uint64(base + o))
                    acc = x.dtype.type(0)
                    for t in range(nt):
                        acc = acc + vals[idx[t]]
                    out[b, oy, ox, o] = acc + bias[o]
    return out


@njit(cache=True)
def conv2d_bwd_input_ordered(dy, wt, stride, periodic, h, w):
    """dL/dx from dL/dy; per entry terms ordered (out channel, taps)."""
    bsz, out_h, out_w, cout = dy.shape
    k = wt.shape[0]
    cin = wt.shape[3]  # wt here is [k, k, Cout, Cin] channel-last in Cin
    c0 = (k - 1) // 2
    dx = np.zeros((bsz, h, w, cin), dtype=dy.dtype)
    for o in range(cout):
        for kh in range(k):
            for kw in range(k):
                for b in range(bsz):
                    for oy in range(out_h):
                        iy = oy * stride + kh - c0
                        if periodic:
                            iy = iy % h
                        elif iy < 0 or iy >= h:
                            continue
                        for ox in range(out_w):
                            ix = ox * stride + kw - c0
                            if periodic:
                                ix = ix % w
                            elif ix < 0 or ix >= w:
                                continue
                            g = dy[b, oy, ox, o]
                            for c in range(cin):
                                dx[b, iy, ix, c] = dx[b, iy, ix, c] + wt[kh, kw, o, c] * g
    return dx


@njit(cache=True)
def conv2d_bwd_input_shuffled(dy, wt, stride, periodic, h, w, seed, call_index):
    bsz, out_h, out_w, cout = dy.shape
    k = wt.shape[0]
    cin = wt.shape[3]
    c0 = (k - 1) // 2
    dx = np.empty((bsz, h, w, cin), dtype=dy.dtype)
    kmax = cout * k * k
    vals = np.empty(kmax, dtype=dy.dtype)
    idx = np.empty(kmax, dtype=np.int64)
    for b in range(bsz):
        for y in range(h):
            for xq in range(w):
                base = ((b * h + y) * w + xq) * cin
                for c in range(cin):
                    nt = 0
                    for o in range(cout):
                        for kh in range(k):
                            iy = y - (kh - c0)
                            if periodic:
                                iy = iy % h
                            if iy % stride != 0:
                                continue
                            oy = iy // stride
                            if oy < 0 or oy >= out_h:
                                continue
                            for kw in range(k):
                                ix = xq - (kw - c0)
                                if periodic:
                                    ix = ix % w
                                if ix % stride != 0:
                                    continue
                                ox = ix // stride
                                if ox < 0 or ox >= out_w:
                                    continue
                                vals[nt] = wt[kh, kw, o, c] * dy[b, oy, ox, o]
                                nt += 1
                    fill_permutation(idx[:nt], seed, call_index, uint64(base + c))
                    acc = dy.dtype.type(0)
                    for t in range(nt):
                        acc = acc + vals[idx[t]]
                    dx[b, y, xq, c] = acc
    return dx


@njit(cache=True)
def conv2d_bwd_weights_ordered(x, dy, stride, periodic, k):
    """dL/dW; per entry terms ordered (batch outer, output pixels row-major)."""
    bsz, h, w, cin = x.shape
    out_h, out_w, cout = dy.shape[1], dy.shape[2], dy.shape[3]
    c0 = (k - 1) // 2
    dw = np.zeros((k, k, cout, cin), dtype=x.dtype)
    for b in range(bsz):
        for oy in range(out_h):
            for ox in range(out_w):
                for kh in range(k):
                    iy = oy * stride + kh - c0
                    if periodic:
                        iy = iy % h
                    elif iy < 0 or iy >= h:
                        continue
                    for kw in range(k):
                        ix = ox * stride + kw - c0
                        if periodic:
                            ix = ix % w
                        elif ix < 0 or ix >= w:
                            continue
                        for o in range(cout):
                            g = dy[b, oy, ox, o]
                            for c in range(cin):
                                dw[kh, kw, o, c] = dw[kh, kw, o, c] + g * x[b, iy, ix, c]
    return dw


@njit(cache=True)
def conv2d_bwd_weights_shuffled(x, dy, stride, periodic, k, seed, call_index):
    bsz, h, w, cin = x.shape
    out_h, out_w, cout = dy.shape[1], dy.shape[2], dy.shape[3]
    c0 = (k - 1) // 2
    dw = np.empty((k, k, cout, cin), dtype=x.dtype)
    kmax = bsz * out_h * out_w
    vals = np.empty(kmax, dtype=x.dtype)
    idx = np.empty(kmax, dtype=np.int64)
    for kh in range(k):
        for kw in range(k):
            for o in range(cout):
                for c in range(cin):
                    nt = 0
                    for b in range(bsz):
                        for oy in range(out_h):
                            iy = oy * stride + kh - c0
                            if periodic:
                                iy = iy % h
                            elif iy < 0 or iy >= h:
                                continue
                            for ox in range(out_w):
                                ix = ox * stride + kw - c0
                                if periodic:
                                    ix = ix % w
                                elif ix < 0 or ix >= w:
                                    continue
                                vals[nt] = dy[b, oy, ox, o] * x[b, iy, ix, c]
                                nt += 1
                    entry = ((kh * k + kw) * cout + o) * cin + c
                    fill_permutation(idx[:nt], seed, call_index, uint64(entry))
                    acc = x.dtype.type(0)
                    for t in range(nt):
                        acc = acc + vals[idx[t]]
                    dw[kh, kw, o, c] = acc
    return dw
