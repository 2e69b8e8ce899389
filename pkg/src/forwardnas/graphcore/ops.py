"""Forward and backward rules for every op kind.

Layouts are batch-first: feature tensors are ``(B, D)`` and image tensors
``(B, C, H, W)``. Spatial ops use "same" padding, so with stride 1 the
spatial size is preserved. Pools on ``(B, D)`` inputs slide along ``D``.

A rule's forward returns ``(out, cache, stats)`` where ``stats`` maps a
parameter slot index to an updated value (batch-norm running statistics).
Backward returns ``(input_grads, param_grads)``; an entry may be ``None``
when the input does not receive gradient (labels, targets).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError
from .graph import OpKind

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class OpRule:
    arity: int | None  # None means variadic (at least one)
    forward: Callable
    backward: Callable
    shape: Callable  # (in_shapes, param_shapes, attrs) -> per-example out shape


def _expect(cond, expected, actual, detail=""):
    if not cond:
        raise ShapeError(None, expected, actual, detail)


# -- sliding windows -----------------------------------------------------


def _geometry(n, k, stride, dilation):
    pad = dilation * (k - 1) // 2
    return pad, (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(x, kh, kw, stride, dilation, pad_value=0.0):
    """Strided view of shape (B, C, kh, kw, Ho, Wo) over a padded copy of x."""
    B, C, H, W = x.shape
    ph, ho = _geometry(H, kh, stride, dilation)
    pw, wo = _geometry(W, kw, stride, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    s = xp.strides
    win = as_strided(
        xp,
        shape=(B, C, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2] * dilation, s[3] * dilation, s[2] * stride, s[3] * stride),
        writeable=False,
    )
    return win, (ph, pw, ho, wo)


def _unwindow(dwin, in_shape, stride, dilation, geom):
    B, C, H, W = in_shape
    ph, pw, ho, wo = geom
    kh, kw = dwin.shape[2], dwin.shape[3]
    dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            dxp[:, :, r: r + stride * (ho - 1) + 1: stride, c: c + stride * (wo - 1) + 1: stride] += dwin[:, :, i, j]
    return dxp[:, :, ph: ph + H, pw: pw + W]


def _as_image(x):
    """View (B, D) as (B, 1, 1, D) so 1-D pools reuse the 2-D machinery."""
    return x[:, None, None, :] if x.ndim == 2 else x


def _spatial_out(shape, k, stride, dilation=1):
    if len(shape) == 1:
        return (_geometry(shape[0], k, stride, dilation)[1],)
    c, h, w = shape
    return (c, _geometry(h, k, stride, dilation)[1], _geometry(w, k, stride, dilation)[1])


# -- dense / projection -------------------------------------------------


def _dense_fwd(xs, ps, attrs, mode):
    (x,) = xs
    W = ps[0]
    _expect(x.ndim == 2 and x.shape[1] == W.shape[0], ("B", W.shape[0]), x.shape)
    out = x @ W
    if len(ps) > 1:
        out = out + ps[1]
    return out, None, None


def _dense_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    grads = [x.T @ dout]
    if len(ps) > 1:
        grads.append(dout.sum(axis=0))
    return [dout @ ps[0].T], grads


def _dense_shape(ins, pshapes, attrs):
    _expect(len(ins[0]) == 1 and ins[0][0] == pshapes[0][0], (pshapes[0][0],), ins[0])
    return (pshapes[0][1],)


def _proj_fwd(xs, ps, attrs, mode):
    (x,) = xs
    W = ps[0]
    _expect(x.ndim in (2, 4) and x.shape[1] == W.shape[0], ("B", W.shape[0], "..."), x.shape)
    if x.ndim == 2:
        return x @ W, None, None
    return np.einsum("bchw,co->bohw", x, W), None, None


def _proj_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    W = ps[0]
    if x.ndim == 2:
        return [dout @ W.T], [x.T @ dout]
    return [np.einsum("bohw,co->bchw", dout, W)], [np.einsum("bchw,bohw->co", x, dout)]


def _proj_shape(ins, pshapes, attrs):
    s = ins[0]
    _expect(s[0] == pshapes[0][0], (pshapes[0][0], "..."), s)
    return (pshapes[0][1],) + tuple(s[1:])


# -- convolutions -------------------------------------------------------


def _conv_fwd(xs, ps, attrs, mode):
    (x,) = xs
    W = ps[0]
    _expect(x.ndim == 4 and x.shape[1] == W.shape[1], ("B", W.shape[1], "H", "W"), x.shape)
    k, stride, dil = W.shape[2], attrs.get("stride", 1), attrs.get("dilation", 1)
    win, geom = _windows(x, k, k, stride, dil)
    out = np.einsum("bcijhw,ocij->bohw", win, W, optimize=True)
    return out, (win, geom), None


def _conv_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    W = ps[0]
    win, geom = cache
    dW = np.einsum("bohw,bcijhw->ocij", dout, win, optimize=True)
    dwin = np.einsum("bohw,ocij->bcijhw", dout, W, optimize=True)
    dx = _unwindow(dwin, x.shape, attrs.get("stride", 1), attrs.get("dilation", 1), geom)
    return [dx], [dW]


def _conv_shape(ins, pshapes, attrs):
    W = pshapes[0]
    _expect(len(ins[0]) == 3 and ins[0][0] == W[1], (W[1], "H", "W"), ins[0])
    c, h, w = _spatial_out(ins[0], W[2], attrs.get("stride", 1), attrs.get("dilation", 1))
    return (W[0], h, w)


def _sep_fwd(xs, ps, attrs, mode):
    """Depthwise k x k (optionally dilated) followed by pointwise 1x1."""
    (x,) = xs
    Wd, Wp = ps
    _expect(x.ndim == 4 and x.shape[1] == Wd.shape[0], ("B", Wd.shape[0], "H", "W"), x.shape)
    k, stride, dil = Wd.shape[1], attrs.get("stride", 1), attrs.get("dilation", 1)
    win, geom = _windows(x, k, k, stride, dil)
    mid = np.einsum("bcijhw,cij->bchw", win, Wd, optimize=True)
    out = np.einsum("bchw,co->bohw", mid, Wp)
    return out, (win, geom, mid), None


def _sep_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    Wd, Wp = ps
    win, geom, mid = cache
    dWp = np.einsum("bchw,bohw->co", mid, dout)
    dmid = np.einsum("bohw,co->bchw", dout, Wp)
    dWd = np.einsum("bchw,bcijhw->cij", dmid, win, optimize=True)
    dwin = np.einsum("bchw,cij->bcijhw", dmid, Wd, optimize=True)
    dx = _unwindow(dwin, x.shape, attrs.get("stride", 1), attrs.get("dilation", 1), geom)
    return [dx], [dWd, dWp]


def _sep_shape(ins, pshapes, attrs):
    Wd, Wp = pshapes
    _expect(len(ins[0]) == 3 and ins[0][0] == Wd[0] == Wp[0], (Wd[0], "H", "W"), ins[0])
    c, h, w = _spatial_out(ins[0], Wd[1], attrs.get("stride", 1), attrs.get("dilation", 1))
    return (Wp[1], h, w)


# -- pooling ------------------------------------------------------------


def _pool_args(x, attrs):
    k = attrs.get("kernel", 3)
    stride = attrs.get("stride", 1)
    if x.ndim == 2:
        return 1, k, stride
    _expect(x.ndim == 4, ("B", "C", "H", "W"), x.shape)
    return k, k, stride


def _maxpool_fwd(xs, ps, attrs, mode):
    (x,) = xs
    kh, kw, stride = _pool_args(x, attrs)
    xi = _as_image(x)
    win, geom = _windows(xi, kh, kw, stride, 1, pad_value=-np.inf)
    B, C = xi.shape[:2]
    flat = win.reshape(B, C, kh * kw, geom[2], geom[3])
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    if x.ndim == 2:
        out = out[:, 0, 0, :]
    return out, (idx, geom, xi.shape, kh, kw), None


def _maxpool_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    idx, geom, ishape, kh, kw = cache
    d = _as_image(dout)
    B, C = ishape[:2]
    dflat = np.zeros((B, C, kh * kw, geom[2], geom[3]))
    np.put_along_axis(dflat, idx[:, :, None], d[:, :, None], axis=2)
    dx = _unwindow(dflat.reshape(B, C, kh, kw, geom[2], geom[3]), ishape, attrs.get("stride", 1), 1, geom)
    return [dx.reshape(x.shape)], []


def _avgpool_counts(ishape, kh, kw, stride):
    ones = np.ones((1, 1) + tuple(ishape[2:]))
    win, geom = _windows(ones, kh, kw, stride, 1)
    return win.sum(axis=(2, 3)), geom


def _avgpool_fwd(xs, ps, attrs, mode):
    """Average over the in-bounds part of each window (padding not counted)."""
    (x,) = xs
    kh, kw, stride = _pool_args(x, attrs)
    xi = _as_image(x)
    win, geom = _windows(xi, kh, kw, stride, 1)
    counts, _ = _avgpool_counts(xi.shape, kh, kw, stride)
    out = win.sum(axis=(2, 3)) / counts
    if x.ndim == 2:
        out = out[:, 0, 0, :]
    return out, (counts, geom, xi.shape, kh, kw), None


def _avgpool_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    counts, geom, ishape, kh, kw = cache
    d = _as_image(dout) / counts
    dwin = np.broadcast_to(d[:, :, None, None], d.shape[:2] + (kh, kw) + d.shape[2:])
    dx = _unwindow(dwin, ishape, attrs.get("stride", 1), 1, geom)
    return [dx.reshape(x.shape)], []


def _pool_shape(ins, pshapes, attrs):
    s = ins[0]
    _expect(len(s) in (1, 3), ("D",), s, "pool needs (D,) or (C, H, W)")
    return _spatial_out(s, attrs.get("kernel", 3), attrs.get("stride", 1))


def _gap_fwd(xs, ps, attrs, mode):
    (x,) = xs
    _expect(x.ndim == 4, ("B", "C", "H", "W"), x.shape)
    return x.mean(axis=(2, 3)), None, None


def _gap_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    hw = x.shape[2] * x.shape[3]
    return [np.broadcast_to(dout[:, :, None, None] / hw, x.shape).copy()], []


def _gap_shape(ins, pshapes, attrs):
    _expect(len(ins[0]) == 3, ("C", "H", "W"), ins[0])
    return (ins[0][0],)


# -- batch norm ---------------------------------------------------------


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v if x.ndim == 2 else v[None, :, None, None]


def _bn_fwd(xs, ps, attrs, mode):
    (x,) = xs
    gamma, beta, rmean, rvar = ps
    _expect(x.ndim in (2, 4) and x.shape[1] == gamma.shape[0], ("B", gamma.shape[0], "..."), x.shape)
    axes = _bn_axes(x)
    if mode == "train":
        m = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - _bn_view(mean, x)) * _bn_view(inv, x)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats = {
            2: BN_MOMENTUM * rmean + (1 - BN_MOMENTUM) * mean,
            3: BN_MOMENTUM * rvar + (1 - BN_MOMENTUM) * unbiased,
        }
    else:
        inv = 1.0 / np.sqrt(rvar + BN_EPS)
        xhat = (x - _bn_view(rmean, x)) * _bn_view(inv, x)
        stats = None
    out = _bn_view(gamma, x) * xhat + _bn_view(beta, x)
    return out, (xhat, inv, mode), stats


def _bn_bwd(dout, xs, ps, attrs, cache):
    (x,) = xs
    gamma = ps[0]
    xhat, inv, mode = cache
    axes = _bn_axes(x)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _bn_view(gamma, x)
    if mode == "train":
        m = x.size // x.shape[1]
        s1 = _bn_view(dxhat.sum(axis=axes), x)
        s2 = _bn_view((dxhat * xhat).sum(axis=axes), x)
        dx = _bn_view(inv, x) / m * (m * dxhat - s1 - xhat * s2)
    else:
        dx = dxhat * _bn_view(inv, x)
    return [dx], [dgamma, dbeta, None, None]


def _same_shape(ins, pshapes, attrs):
    return tuple(ins[0])


# -- elementwise and structural ----------------------------------------


def _identity_fwd(xs, ps, attrs, mode):
    return xs[0], None, None


def _identity_bwd(dout, xs, ps, attrs, cache):
    return [dout], []


def _relu_fwd(xs, ps, attrs, mode):
    return np.maximum(xs[0], 0.0), None, None


def _relu_bwd(dout, xs, ps, attrs, cache):
    return [dout * (xs[0] > 0)], []


def _tanh_fwd(xs, ps, attrs, mode):
    y = np.tanh(xs[0])
    return y, y, None


def _tanh_bwd(dout, xs, ps, attrs, cache):
    return [dout * (1.0 - cache * cache)], []


def _sg_bwd(dout, xs, ps, attrs, cache):
    return [np.zeros_like(xs[0])], []


def _sf_fwd(xs, ps, attrs, mode):
    return np.zeros_like(xs[0]), None, None


def _add_fwd(xs, ps, attrs, mode):
    first = xs[0]
    for x in xs[1:]:
        _expect(x.shape == first.shape, first.shape, x.shape)
    out = first
    for x in xs[1:]:
        out = out + x
    return out, None, None


def _add_bwd(dout, xs, ps, attrs, cache):
    return [dout] * len(xs), []


def _add_shape(ins, pshapes, attrs):
    for s in ins[1:]:
        _expect(tuple(s) == tuple(ins[0]), tuple(ins[0]), tuple(s))
    return tuple(ins[0])


def _concat_fwd(xs, ps, attrs, mode):
    for x in xs[1:]:
        _expect(x.ndim == xs[0].ndim and x.shape[2:] == xs[0].shape[2:] and x.shape[0] == xs[0].shape[0],
                xs[0].shape, x.shape, "concat along axis 1")
    return np.concatenate(xs, axis=1), None, None


def _concat_bwd(dout, xs, ps, attrs, cache):
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    return [np.ascontiguousarray(d) for d in np.split(dout, splits, axis=1)], []


def _concat_shape(ins, pshapes, attrs):
    for s in ins[1:]:
        _expect(tuple(s[1:]) == tuple(ins[0][1:]), ins[0], s)
    return (sum(s[0] for s in ins),) + tuple(ins[0][1:])


def _gate_fwd(xs, ps, attrs, mode):
    return ps[0] * xs[0], None, None


def _gate_bwd(dout, xs, ps, attrs, cache):
    return [ps[0] * dout], [np.array(np.sum(dout * xs[0]))]


def _wsum_fwd(xs, ps, attrs, mode):
    _expect(len(ps) == len(xs), len(xs), len(ps), "one weight per input")
    out = ps[0] * xs[0]
    for a, x in zip(ps[1:], xs[1:]):
        _expect(x.shape == xs[0].shape, xs[0].shape, x.shape)
        out = out + a * x
    return out, None, None


def _wsum_bwd(dout, xs, ps, attrs, cache):
    return [a * dout for a in ps], [np.array(np.sum(dout * x)) for x in xs]


# -- losses -------------------------------------------------------------


def _xent_fwd(xs, ps, attrs, mode):
    logits, labels = xs
    _expect(logits.ndim == 2 and labels.shape == (logits.shape[0],), (logits.shape[0],), labels.shape,
            "labels must be a vector aligned with the logits batch")
    lab = labels.astype(np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(lab)), lab].mean()
    return np.array(loss), (logp, lab), None


def _xent_bwd(dout, xs, ps, attrs, cache):
    logp, lab = cache
    g = np.exp(logp)
    g[np.arange(len(lab)), lab] -= 1.0
    return [g * (dout / len(lab)), None], []


def _mse_fwd(xs, ps, attrs, mode):
    pred, target = xs
    _expect(pred.shape == target.shape, pred.shape, target.shape, "prediction vs target")
    diff = pred - target
    return np.array(np.mean(diff * diff)), diff, None


def _mse_bwd(dout, xs, ps, attrs, cache):
    g = cache * (2.0 * dout / cache.size)
    return [g, -g], []


def _scalar_shape(ins, pshapes, attrs):
    return ()


def _placeholder(*args):
    raise RuntimeError("placeholders are fed by the engine")


RULES: dict[OpKind, OpRule] = {
    OpKind.DENSE: OpRule(1, _dense_fwd, _dense_bwd, _dense_shape),
    OpKind.PROJ_1X1: OpRule(1, _proj_fwd, _proj_bwd, _proj_shape),
    OpKind.CONV: OpRule(1, _conv_fwd, _conv_bwd, _conv_shape),
    OpKind.SEP_CONV: OpRule(1, _sep_fwd, _sep_bwd, _sep_shape),
    OpKind.DILATED_CONV: OpRule(1, _sep_fwd, _sep_bwd, _sep_shape),
    OpKind.MAX_POOL: OpRule(1, _maxpool_fwd, _maxpool_bwd, _pool_shape),
    OpKind.AVG_POOL: OpRule(1, _avgpool_fwd, _avgpool_bwd, _pool_shape),
    OpKind.GLOBAL_AVG_POOL: OpRule(1, _gap_fwd, _gap_bwd, _gap_shape),
    OpKind.BATCH_NORM: OpRule(1, _bn_fwd, _bn_bwd, _same_shape),
    OpKind.IDENTITY: OpRule(1, _identity_fwd, _identity_bwd, _same_shape),
    OpKind.RELU: OpRule(1, _relu_fwd, _relu_bwd, _same_shape),
    OpKind.TANH: OpRule(1, _tanh_fwd, _tanh_bwd, _same_shape),
    OpKind.STOP_GRADIENT: OpRule(1, _identity_fwd, _sg_bwd, _same_shape),
    OpKind.STOP_FORWARD: OpRule(1, _sf_fwd, _identity_bwd, _same_shape),
    OpKind.SCALAR_GATE: OpRule(1, _gate_fwd, _gate_bwd, _same_shape),
    OpKind.ADD: OpRule(None, _add_fwd, _add_bwd, _add_shape),
    OpKind.CONCAT: OpRule(None, _concat_fwd, _concat_bwd, _concat_shape),
    OpKind.WEIGHTED_SUM: OpRule(None, _wsum_fwd, _wsum_bwd, _add_shape),
    OpKind.SOFTMAX_XENT: OpRule(2, _xent_fwd, _xent_bwd, _scalar_shape),
    OpKind.MSE: OpRule(2, _mse_fwd, _mse_bwd, _scalar_shape),
    OpKind.PLACEHOLDER: OpRule(0, _placeholder, _placeholder, _placeholder),
}
