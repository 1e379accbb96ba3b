"""Independent loop-level oracles for the vectorized primitives.

These are deliberately written as plain nested loops over numpy scalars (or
one-token-at-a-time recurrences) so they share no code path with the
implementations they check. Slow on purpose; use small shapes.
"""

from __future__ import annotations

import numpy as np


def conv2d_reference(x: np.ndarray, k: np.ndarray, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Six-nested-loop cross-correlation oracle."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow), dtype=x.dtype)
    for b in range(n):
        for co in range(c_out):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += (k[co, ci, dy, dx] *
                                        xp[b, ci, oy * stride + dy,
                                           ox * stride + dx])
                    out[b, co, oy, ox] = acc
    return out


def depthwise_conv2d_reference(x: np.ndarray, k: np.ndarray, stride: int = 1,
                               padding: int = 0) -> np.ndarray:
    n, c, h, w = x.shape
    _, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += (k[ch, 0, dy, dx] *
                                    xp[b, ch, oy * stride + dy,
                                       ox * stride + dx])
                    out[b, ch, oy, ox] = acc
    return out


def linear_reference(x: np.ndarray, w: np.ndarray,
                     b: np.ndarray | None = None) -> np.ndarray:
    """Explicit dot-product oracle over the trailing axis."""
    lead = x.shape[:-1]
    d_in = x.shape[-1]
    d_out = w.shape[0]
    x2 = x.reshape(-1, d_in)
    out = np.zeros((x2.shape[0], d_out), dtype=x.dtype)
    for r in range(x2.shape[0]):
        for o in range(d_out):
            acc = 0.0
            for i in range(d_in):
                acc += x2[r, i] * w[o, i]
            if b is not None:
                acc += b[o]
            out[r, o] = acc
    return out.reshape(lead + (d_out,))


def layer_norm_reference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         eps: float = 1e-5) -> np.ndarray:
    """Two-pass mean/variance oracle over the trailing axis."""
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    out = np.zeros_like(x2)
    for r in range(x2.shape[0]):
        mu = sum(x2[r, i] for i in range(c)) / c
        var = sum((x2[r, i] - mu) ** 2 for i in range(c)) / c
        for i in range(c):
            out[r, i] = (x2[r, i] - mu) / np.sqrt(var + eps) * gamma[i] + beta[i]
    return out.reshape(x.shape)


def selective_scan_reference(x: np.ndarray, core,
                             exact_input_discretization: bool | None = None,
                             segment_reset: bool | None = None,
                             n_segments: int = 1) -> np.ndarray:
    """One-token-at-a-time selective scan, independent of the fused path.

    x: [B, L, C]. ``core`` is an SsmCore; its projection weights are read as
    plain arrays here. Per token: delta = softplus(dt_proj(x_proj_dt(x)) +
    dt_bias), B/C read from the projection, state updated with the
    discretized recurrence, output C.h + D*x.
    """
    b, l, c = x.shape
    n = core.d_state
    exact = (core.exact_input_discretization
             if exact_input_discretization is None
             else exact_input_discretization)
    reset = core.segment_reset if segment_reset is None else segment_reset
    seg_len = l // n_segments if n_segments > 1 else l
    a = -np.exp(core.A_log.data)  # [C, N]
    d_skip = core.D_skip.data if core.D_skip is not None else None
    out = np.zeros((b, l, c), dtype=x.dtype)
    for bi in range(b):
        h = np.zeros((c, n), dtype=x.dtype)
        for t in range(l):
            if reset and n_segments > 1 and t % seg_len == 0:
                h = np.zeros((c, n), dtype=x.dtype)
            xt = x[bi, t]  # [C]
            if core.lti_mode:
                delta = np.logaddexp(0.0, core.dt_bias.data)
                b_t = core.B_const.data
                c_t = core.C_const.data
            else:
                proj = core.x_proj_weight.data @ xt
                dt_raw = proj[:core.dt_rank]
                b_t = proj[core.dt_rank:core.dt_rank + n]
                c_t = proj[core.dt_rank + n:]
                delta = np.logaddexp(
                    0.0, core.dt_proj_weight.data @ dt_raw + core.dt_bias.data)
            da = delta[:, None] * a  # [C, N]
            a_bar = np.exp(da)
            if exact:
                w = np.where(np.abs(da) < 1e-8,
                             delta[:, None], (a_bar - 1.0) / a)
            else:
                w = delta[:, None]
            h = a_bar * h + (w * b_t[None, :]) * xt[:, None]
            y = h @ c_t
            if d_skip is not None:
                y = y + d_skip * xt
            out[bi, t] = y
    return out


def causal_conv_reference(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """y[t] = sum_{s<=t} kern[t-s] * x[s]."""
    l = x.shape[0]
    out = np.zeros(l, dtype=x.dtype)
    for t in range(l):
        for s in range(t + 1):
            out[t] += kern[t - s] * x[s]
    return out


def central_difference(f, flat: np.ndarray, i: int, h: float,
                       order: int = 4) -> float:
    """Central difference of scalar-valued ``f`` in element i of ``flat``.

    order=2 is the two-point stencil; order=4 adds the +-2h points, which
    keeps truncation error well below 1e-4 relative at h=1e-4 even for
    sharply curved losses.
    """
    orig = flat[i]
    flat[i] = orig + h
    fp = f()
    flat[i] = orig - h
    fm = f()
    if order == 2:
        flat[i] = orig
        return (fp - fm) / (2.0 * h)
    flat[i] = orig + 2 * h
    fp2 = f()
    flat[i] = orig - 2 * h
    fm2 = f()
    flat[i] = orig
    return (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-4,
                     order: int = 4) -> np.ndarray:
    """Central finite differences of a scalar-valued f at every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        g.reshape(-1)[i] = central_difference(f, flat, i, h, order)
    return g
