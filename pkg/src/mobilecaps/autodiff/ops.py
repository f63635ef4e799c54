"""Differentiable primitives.

Layout is NHWC throughout. Broadcasting is deliberately limited to
scalar-or-same-shape for the elementwise ops; bias addition over the channel
axis is its own op.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, make_node


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(b) -> bool:
    return not isinstance(b, Tensor) or b.ndim == 0


def _reduce_to_scalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum(), dtype=like.dtype).reshape(like.shape)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(only scalar or same-shape broadcasting is supported)")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    a = _tensor(a)
    if _is_scalar(b):
        if isinstance(b, Tensor):
            bt = b

            def bw(g):
                return g, _reduce_to_scalar(g, bt)
            return make_node(a.data + b.data.astype(a.dtype), (a, b), bw, "add")
        return make_node(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add")
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    a = _tensor(a)
    if _is_scalar(b):
        if isinstance(b, Tensor):
            bt = b

            def bw(g):
                return g, -_reduce_to_scalar(g, bt)
            return make_node(a.data - b.data.astype(a.dtype), (a, b), bw, "sub")
        return make_node(a.data - a.dtype.type(b), (a,), lambda g: (g,), "sub")
    _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    a = _tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    if b.ndim == 0:
        bv = b.data.astype(a.dtype)

        def bw_s(g):
            return g * bv, _reduce_to_scalar(g * a.data, b)
        return make_node(a.data * bv, (a, b), bw_s, "mul")
    _check_same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return make_node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _tensor(a)
    c = a.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu6(x: Tensor) -> Tensor:
    xv = x.data
    mask = (xv > 0) & (xv < 6)
    return make_node(np.clip(xv, 0, 6), (x,), lambda g: (g * mask,), "relu6")


def relu(x: Tensor) -> Tensor:
    xv = x.data
    mask = xv > 0
    return make_node(np.maximum(xv, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xv = x.data
    # split by sign keeps exp from overflowing
    e = np.exp(-np.abs(xv))
    y = np.where(xv >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_node(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def square(x: Tensor) -> Tensor:
    xv = x.data
    return make_node(xv * xv, (x,), lambda g: (2 * g * xv,), "square")


def logcosh(x: Tensor) -> Tensor:
    """log(cosh(x)) without overflow for large |x|."""
    xv = x.data
    ax = np.abs(xv)
    small = ax < 1
    with np.errstate(over="ignore"):
        near = np.log1p(2 * np.sinh(np.where(small, xv, 0) / 2) ** 2)
        far = ax + np.log1p(np.exp(-2 * ax)) - math.log(2)
    y = np.where(small, near, far).astype(x.dtype)
    return make_node(y, (x,), lambda g: (g * np.tanh(xv),), "logcosh")


# ---------------------------------------------------------------------------
# reductions and shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return make_node(np.asarray(y, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 1 for s in shape):
        raise ValueError(f"cannot reshape {x.shape} into {shape}")
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return make_node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast along the trailing (channel) axis."""
    if b.shape != x.shape[-1:]:
        raise ValueError(f"bias shape {b.shape} does not match channel extent of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return make_node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return make_node(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return make_node(y, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# regularisation and normalisation


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Normalise over every axis but the last.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},), "
                         f"got {gamma.shape} and {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    xv = x.data
    if training:
        count = xv.size // c
        if count == 0:
            raise ValueError("batch_norm: empty batch in training mode")
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean.data = (momentum * running_mean.data + (1 - momentum) * mu).astype(running_mean.dtype)
        running_var.data = (momentum * running_var.data + (1 - momentum) * var).astype(running_var.dtype)
    else:
        mu = running_mean.data.astype(xv.dtype)
        var = running_var.data.astype(xv.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mu) * inv_std
    gv = gamma.data
    y = xhat * gv + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gv
        if training:
            dx = inv_std * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta
    return make_node(y, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# convolution (cross-correlation, NHWC)


def _out_extent_and_pad(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if k > n:
            raise ValueError(f"kernel extent {k} larger than input extent {n}")
        return (n - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _conv_geometry(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    _, h, w, _ = x.shape
    ho, pt, pb = _out_extent_and_pad(h, kh, stride, padding)
    wo, pl, pr = _out_extent_and_pad(w, kw, stride, padding)
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")
    return ho, wo, (pt, pb, pl, pr)


def _pad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _tap(xp: np.ndarray, i: int, j: int, ho: int, wo: int, s: int):
    return xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """x[n,h,w,c_in] cross-correlated with k[kh,kw,c_in,c_out]."""
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError(f"conv2d expects x[n,h,w,c] and k[kh,kw,cin,cout], got {x.shape}, {k.shape}")
    kh, kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    ho, wo, pads = _conv_geometry(x.data, kh, kw, stride, padding)
    xp = _pad(x.data, pads)
    kv = k.data
    n = x.shape[0]
    if kh == kw == 1 and stride == 1:
        out = (xp.reshape(-1, cin) @ kv[0, 0]).reshape(n, ho, wo, cout)
    else:
        out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _tap(xp, i, j, ho, wo, stride) @ kv[i, j]

    def bw(g):
        g2 = g.reshape(-1, cout)
        dk = np.empty_like(kv)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dk[i, j] = _tap(xp, i, j, ho, wo, stride).reshape(-1, cin).T @ g2
                _tap(dxp, i, j, ho, wo, stride)[...] += g @ kv[i, j].T
        pt, pb, pl, pr = pads
        dx = dxp[:, pt:dxp.shape[1] - pb, pl:dxp.shape[2] - pr, :]
        return dx, dk
    return make_node(out, (x, k), bw, "conv2d")


def depthwise_conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """One kh x kw filter per channel; k has shape [kh, kw, c]."""
    if x.ndim != 4 or k.ndim != 3:
        raise ValueError(f"depthwise_conv2d expects x[n,h,w,c] and k[kh,kw,c], got {x.shape}, {k.shape}")
    kh, kw, c = k.shape
    if x.shape[-1] != c:
        raise ValueError(f"depthwise_conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    ho, wo, pads = _conv_geometry(x.data, kh, kw, stride, padding)
    xp = _pad(x.data, pads)
    kv = k.data
    out = np.zeros((x.shape[0], ho, wo, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, ho, wo, stride) * kv[i, j]

    def bw(g):
        dk = np.empty_like(kv)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dk[i, j] = (_tap(xp, i, j, ho, wo, stride) * g).sum(axis=(0, 1, 2))
                _tap(dxp, i, j, ho, wo, stride)[...] += g * kv[i, j]
        pt, pb, pl, pr = pads
        return dxp[:, pt:dxp.shape[1] - pb, pl:dxp.shape[2] - pr, :], dk
    return make_node(out, (x, k), bw, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# capsule primitives


def squash(s: Tensor, eps: float = 1e-7) -> Tensor:
    """v = |s|^2 / (1 + |s|^2) * s / (|s| + eps), over the last axis."""
    sv = s.data
    n = np.sqrt((sv * sv).sum(axis=-1, keepdims=True))
    n2 = n * n
    f = n2 / ((1 + n2) * (n + eps))
    v = f * sv

    def bw(g):
        # d f / d n divided by n, written without a 1/n factor so s = 0 is safe
        fprime_over_n = (n + 2 * eps - n2 * n) / ((1 + n2) ** 2 * (n + eps) ** 2)
        return (f * g + fprime_over_n * (sv * g).sum(axis=-1, keepdims=True) * sv,)
    return make_node(v.astype(s.dtype), (s,), bw, "squash")


def vector_length(v: Tensor) -> Tensor:
    """Euclidean norm over the last axis; gradient taken as 0 at v = 0."""
    vv = v.data
    n = np.sqrt((vv * vv).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1)
        return (np.where(n[..., None] > 0, g[..., None] * vv / safe[..., None], 0).astype(vv.dtype),)
    return make_node(n, (v,), bw, "vector_length")


def predict_votes(u: Tensor, w: Tensor) -> Tensor:
    """votes[b, i, j] = u[b, i] @ w[i mod g, j].

    u: [batch, I, d_in]; w: [g, J, d_in, d_out]; returns [batch, I, J, d_out].
    Input capsules are position-major, so i = position * g + group.
    """
    if u.ndim != 3 or w.ndim != 4:
        raise ValueError(f"predict_votes expects u[b,I,d] and W[g,J,d,e], got {u.shape}, {w.shape}")
    bsz, n_in, d_in = u.shape
    g, n_out, wd_in, d_out = w.shape
    if wd_in != d_in:
        raise ValueError(f"predict_votes: capsule width {d_in} != weight input width {wd_in}")
    if n_in % g:
        raise ValueError(f"predict_votes: {n_in} input capsules not divisible into {g} groups")
    positions = n_in // g
    # [g, b*P, d_in]
    ug = u.data.reshape(bsz * positions, g, d_in).transpose(1, 0, 2)
    # [g, d_in, J*d_out]
    wg = w.data.transpose(0, 2, 1, 3).reshape(g, d_in, n_out * d_out)
    out = np.matmul(ug, wg)  # [g, b*P, J*d_out]
    votes = out.reshape(g, bsz * positions, n_out, d_out).transpose(1, 0, 2, 3)
    votes = votes.reshape(bsz, n_in, n_out, d_out)

    def bw(gr):
        gg = gr.reshape(bsz * positions, g, n_out * d_out).transpose(1, 0, 2)
        du = np.matmul(gg, wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(bsz, n_in, d_in)
        dw = np.matmul(ug.transpose(0, 2, 1), gg)  # [g, d_in, J*d_out]
        dw = dw.reshape(g, d_in, n_out, d_out).transpose(0, 2, 1, 3)
        return du, np.ascontiguousarray(dw)
    return make_node(np.ascontiguousarray(votes), (u, w), bw, "predict_votes")


def route_sum(votes: Tensor, coupling: np.ndarray) -> Tensor:
    """s[b, j] = sum_i c[b, i, j] * votes[b, i, j]; c is a constant."""
    c = np.asarray(coupling, dtype=votes.dtype)
    if c.shape != votes.shape[:3]:
        raise ValueError(f"route_sum: coupling {c.shape} does not match votes {votes.shape}")
    s = np.einsum("bij,bije->bje", c, votes.data)

    def bw(g):
        return (c[..., None] * g[:, None, :, :],)
    return make_node(s, (votes,), bw, "route_sum")
