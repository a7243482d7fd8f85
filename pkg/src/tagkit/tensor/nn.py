"""Network kernels built on the tensor core, each with an exact adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, TensorError, concat, make

BN_EPS = 1e-5


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """[B,T,F,C] channels-last -> [B*T*F, 9*C] zero-padded 3x3 patches."""
    B, T, F, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [B,T,F,C,3,3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * T * F, 9 * C)


def _conv_input_grad(g2: np.ndarray, wm: np.ndarray, shape) -> np.ndarray:
    """Adjoint of the patch GEMM, one shifted GEMM per tap (no [N, 9C] buffer)."""
    B, T, F, C = shape
    w9 = wm.reshape(3, 3, C, -1)
    gxp = np.zeros((B, T + 2, F + 2, C))
    for i in range(3):
        for j in range(3):
            gxp[:, i:i + T, j:j + F, :] += (g2 @ w9[i, j].T).reshape(B, T, F, C)
    return gxp[:, 1:-1, 1:-1, :]


def conv3x3_same_nhwc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Channels-last kernel behind ``conv2d_3x3_same``: x[B,T,F,C] -> [B,T,F,O]."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[3] \
            or b.shape != (w.shape[0],):
        raise TensorError(f"conv shape error: x{x.shape} w{w.shape} b{b.shape}")
    B, T, F, C = x.shape
    O = w.shape[0]
    cols = _im2col3x3(x.data)
    wm = w.data.transpose(2, 3, 1, 0).reshape(9 * C, O)
    out = (cols @ wm + b.data).reshape(B, T, F, O)

    def bw(g):
        g2 = g.reshape(-1, O)
        gw = (cols.T @ g2).reshape(3, 3, C, O).transpose(3, 2, 0, 1)
        gx = _conv_input_grad(g2, wm, x.shape) if x.requires_grad else None
        return gx, gw, g2.sum(axis=0)

    return make(out, (x, w, b), bw, "conv2d")


def conv2d_3x3_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Zero-padded 3x3 convolution, x[B,C,T,F] * w[O,C,3,3] + b[O] -> [B,O,T,F]."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise TensorError(f"conv shape error: x{x.shape} w{w.shape} b{b.shape}")
    out = conv3x3_same_nhwc(x.transpose(0, 2, 3, 1), w, b)
    return out.transpose(0, 3, 1, 2)


def lp_pool(x: Tensor, kt: int, kf: int, p: int = 4, channels_last: bool = False) -> Tensor:
    """(mean of x**p over each kt x kf window) ** (1/p).

    x is [B,C,T,F], or [B,T,F,C] when ``channels_last``.
    """
    if channels_last:
        B, T, F, C = x.shape
    else:
        B, C, T, F = x.shape
    if T % kt or F % kf:
        raise TensorError(f"pool shape error: {(T, F)} not divisible by {(kt, kf)}")
    if channels_last:
        xw = x.data.reshape(B, T // kt, kt, F // kf, kf, C)
        red, expand = (2, 4), (slice(None), slice(None), None, slice(None), None)
    else:
        xw = x.data.reshape(B, C, T // kt, kt, F // kf, kf)
        red, expand = (3, 5), (slice(None), slice(None), slice(None), None, slice(None), None)
    if p == 4:
        x2 = xw * xw
        out = np.sqrt(np.sqrt((x2 * x2).mean(axis=red)))
    else:
        out = (xw ** p).mean(axis=red) ** (1.0 / p)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(out > 0, g / (kt * kf * out ** (p - 1)), 0.0)
        gx = (x2 * xw if p == 4 else xw ** (p - 1)) * scale[expand]
        return (gx.reshape(x.shape),)

    return make(out, (x,), bw, "lp_pool")


def time_mask(lengths, T: int) -> np.ndarray:
    """Boolean [B,T] validity mask from per-sequence lengths."""
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, mask: np.ndarray | None = None, channels_last: bool = False) -> Tensor:
    """Per-channel normalisation of x[B,C,T,F] ([B,T,F,C] if ``channels_last``) or x[B,C].

    ``mask`` is a boolean [B,T]; masked positions are excluded from the batch
    statistics and are zero in the output.  Training mode normalises with the
    (biased) batch statistics and updates the running estimates.
    """
    if x.ndim == 4 and not channels_last:
        out = _batch_norm_2d(x.data.transpose(0, 2, 3, 1), gamma, beta, state, training, mask)
        data, bw = out
        return make(data.transpose(0, 3, 1, 2), (x, gamma, beta),
                    lambda g: _permute_first(bw(g.transpose(0, 2, 3, 1)), (0, 3, 1, 2)), "batch_norm")
    data, bw = _batch_norm_2d(x.data, gamma, beta, state, training, mask)
    return make(data, (x, gamma, beta), bw, "batch_norm")


def _permute_first(grads, axes):
    gx, gg, gb = grads
    return gx.transpose(axes), gg, gb


def _batch_norm_2d(xd: np.ndarray, gamma, beta, state, training, mask):
    """Channels-last batch norm over a [..., C] array; returns (out, adjoint fn)."""
    shape = xd.shape
    C = shape[-1]
    x2 = xd.reshape(-1, C)
    m = None
    if mask is not None and not np.all(mask):
        mk = np.asarray(mask, dtype=np.float64)
        if xd.ndim == 4:
            mk = np.broadcast_to(mk[:, :, None], shape[:3])
        m = mk.reshape(-1, 1)
    n = float(x2.shape[0] if m is None else m.sum())
    if training:
        if n < 1:
            raise TensorError("batch_norm on empty batch")
        mu = (x2.sum(axis=0) if m is None else (x2 * m).sum(axis=0)) / n
        xc = x2 - mu
        sq = xc * xc
        var = (sq.sum(axis=0) if m is None else (sq * m).sum(axis=0)) / n
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mu, var = state.running_mean, state.running_var
        xc = x2 - mu
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    if m is not None:
        out *= m

    def bw(g):
        g = g.reshape(-1, C)
        if m is not None:
            g = g * m
        gbeta = g.sum(axis=0)
        ggamma = (g * xhat).sum(axis=0)
        if training:
            gx = (g - gbeta / n - xhat * (ggamma / n)) * (gamma.data * inv)
            if m is not None:
                gx *= m
        else:
            gx = g * (gamma.data * inv)
        return gx.reshape(shape), ggamma, gbeta

    return out.reshape(shape), bw


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., In] @ w[Out, In].T + b[Out]."""
    if x.shape[-1] != w.shape[1]:
        raise TensorError(f"linear shape error: x{x.shape} w{w.shape}")
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def bw(g):
        gx = g @ w.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return tuple(grads)

    return make(out, parents, bw, "linear")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` [V, D] gathered by integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError("embedding index out of range")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make(table.data[ids], (table,), bw, "embedding")


def mean_over_axis(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Mean along ``axis``; with a boolean ``mask`` (shape x.shape[:axis+1]) only
    unmasked entries are averaged."""
    axis = axis % x.ndim
    if mask is None:
        w = np.full(x.shape[axis], 1.0 / x.shape[axis]).reshape(
            (1,) * axis + (-1,) + (1,) * (x.ndim - axis - 1))
    else:
        m = mask.astype(np.float64)
        cnt = m.sum(axis=-1, keepdims=True)
        if np.any(cnt == 0):
            raise TensorError("mean over an empty masked axis")
        w = (m / cnt).reshape(m.shape + (1,) * (x.ndim - axis - 1))
    out = (x.data * w).sum(axis=axis)

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return make(out, (x,), bw, "mean_over_axis")


def l2_norm_over_axis(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the adjoint at a zero vector is taken as zero."""
    out = np.sqrt((x.data ** 2).sum(axis=axis))

    def bw(g):
        o = np.expand_dims(out, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(o > 0, x.data / o, 0.0)
        return (np.expand_dims(g, axis) * unit,)

    return make(out, (x,), bw, "l2_norm")


def nearest_upsample_time(x: Tensor, factor: int) -> Tensor:
    """Repeat every frame of x[B,T,D] ``factor`` times along T."""
    B, T, D = x.shape
    out = np.repeat(x.data, factor, axis=1)
    return make(out, (x,), lambda g: (g.reshape(B, T, factor, D).sum(axis=2),), "upsample")


# -- recurrent ------------------------------------------------------------

def _sig(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _gru_forward(x, mask, w_ih, w_hh, b_ih, b_hh, reverse):
    B, T, _ = x.shape
    H = w_hh.shape[1]
    gi = x @ w_ih.T + b_ih  # [B,T,3H]
    h = np.zeros((B, H))
    out = np.zeros((B, T, H))
    cache = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        gh = h @ w_hh.T + b_hh
        r = _sig(gi[:, t, :H] + gh[:, :H])
        z = _sig(gi[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, t, 2 * H:] + r * gh[:, 2 * H:])
        m = mask[:, t, None]
        h_new = m * ((1.0 - z) * n + z * h) + (1.0 - m) * h
        cache[t] = (h, r, z, n, gh[:, 2 * H:])
        h = h_new
        out[:, t] = h
    return out, cache


def _gru_backward(gout, x, mask, w_ih, w_hh, cache, reverse):
    B, T, _ = x.shape
    H = w_hh.shape[1]
    dgi = np.zeros((B, T, 3 * H))
    dw_hh = np.zeros_like(w_hh)
    db_hh = np.zeros(3 * H)
    dh = np.zeros((B, H))
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        h_prev, r, z, n, ghn = cache[t]
        m = mask[:, t, None]
        dh = dh + gout[:, t]
        dhc = m * dh
        dprev = (1.0 - m) * dh + dhc * z
        dn = dhc * (1.0 - z)
        dz = dhc * (h_prev - n)
        dan = dn * (1.0 - n * n)
        dr = dan * ghn
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dgi[:, t] = np.concatenate([dar, daz, dan], axis=1)
        dw_hh += dgh.T @ h_prev
        db_hh += dgh.sum(axis=0)
        dh = dprev + dgh @ w_hh
    dgi2 = dgi.reshape(-1, 3 * H)
    dx = dgi @ w_ih
    dw_ih = dgi2.T @ x.reshape(-1, x.shape[-1])
    db_ih = dgi2.sum(axis=0)
    return dx, dw_ih, dw_hh, db_ih, db_hh


def gru(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor,
        mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Single-direction GRU over x[B,T,In] -> [B,T,H].

    Gates are ordered (reset, update, candidate); the reset gate multiplies the
    candidate's recurrent term after its bias is added.  Where ``mask`` is
    False the hidden state is carried through unchanged, so trailing padding
    never influences the reverse direction.
    """
    B, T, In = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (3 * H, In) or w_hh.shape != (3 * H, H) or b_ih.shape != (3 * H,) or b_hh.shape != (3 * H,):
        raise TensorError(f"gru shape error: x{x.shape} w_ih{w_ih.shape} w_hh{w_hh.shape}")
    mk = np.ones((B, T)) if mask is None else mask.astype(np.float64)
    out, cache = _gru_forward(x.data, mk, w_ih.data, w_hh.data, b_ih.data, b_hh.data, reverse)

    def bw(g):
        return _gru_backward(g, x.data, mk, w_ih.data, w_hh.data, cache, reverse)

    return make(out, (x, w_ih, w_hh, b_ih, b_hh), bw, "gru")


def bigru(x: Tensor, params: dict, mask: np.ndarray | None = None, prefix: str = "gru") -> Tensor:
    """Bidirectional GRU: forward and reverse outputs concatenated -> [B,T,2H].

    ``params`` holds ``{prefix}.{fwd,bwd}.{w_ih,w_hh,b_ih,b_hh}`` tensors.
    """
    halves = []
    for d, rev in (("fwd", False), ("bwd", True)):
        p = [params[f"{prefix}.{d}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")]
        halves.append(gru(x, *p, mask=mask, reverse=rev))
    return concat(halves, axis=-1)

