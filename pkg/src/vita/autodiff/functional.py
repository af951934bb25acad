"""Differentiable layers and losses on top of :mod:`vita.autodiff.tensor`."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, get_dtype, make_node

NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


# convolution -------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Patch matrix ``[Cin*kh*kw, N*H'*W']`` built from ``kh*kw`` strided slice copies."""
    n, c, hp, wp = xp.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(dcols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add ``[C*kh*kw, N*H'*W']`` back to NCHW."""
    n, c, hp, wp = padded_shape
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, ``[N,Cin,H,W] -> [N,Cout,H',W']``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = _pad(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def grad_fn(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = gk = gb = None
        if x.requires_grad:
            gx = _crop(_col2im(wmat.T @ gm, xp.shape, kh, kw, stride, ho, wo), padding)
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, grad_fn)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``kernel`` is laid out ``[Cin, Cout, kH, kW]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {cin}, kernel expects {kcin}")
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ShapeError("conv_transpose2d padding removes the whole output")
    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, -1)
    wmat = kernel.data.reshape(cin, -1)
    full = _col2im(wmat.T @ xm, (n, cout, hp, wp), kh, kw, stride, h, w)
    out = _crop(full, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gcols, _, _ = _im2col(_pad(g, padding), kh, kw, stride)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3))
        if kernel.requires_grad:
            gk = (xm @ gcols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn)


# activations --------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` without the underflow of composing the two."""
    z = x.data
    out = np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return make_node(out.astype(z.dtype), (x,), lambda g: (g * (1.0 - s),))


# normalization and resampling ----------------------------------------------------

def instance_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
                  eps: float = NORM_EPS) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"instance_norm requires rank-4 input, got {x.shape}")
    return _normalize(x, (2, 3), weight, bias, eps)


def _normalize(x: Tensor, axes: tuple, weight, bias, eps: float,
               mu: Optional[np.ndarray] = None, var: Optional[np.ndarray] = None) -> Tensor:
    """Shared body of instance/batch norm. Given ``mu``/``var`` are treated as constants."""
    fixed = mu is not None
    if not fixed:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mu) * inv
    shape = (1, -1, 1, 1)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(shape)
    if bias is not None:
        out = out + bias.data.reshape(shape)

    def grad_fn(g):
        gxhat = g * weight.data.reshape(shape) if weight is not None else g
        if fixed:
            gx = gxhat * inv
        else:
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        gw = (g * xhat).sum(axis=(0, 2, 3)) if weight is not None else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)

    def routed(g):
        gx, gw, gb = grad_fn(g)
        return tuple(v for v, keep in ((gx, True), (gw, weight is not None), (gb, bias is not None)) if keep)

    return make_node(out.astype(x.data.dtype), parents, routed)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = NORM_EPS) -> Tensor:
    """Batch norm over (N, H, W). In training mode the running buffers are updated in place."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm requires rank-4 input, got {x.shape}")
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        return _normalize(x, (0, 2, 3), weight, bias, eps)
    return _normalize(x, (0, 2, 3), weight, bias, eps,
                      running_mean.reshape(1, -1, 1, 1), running_var.reshape(1, -1, 1, 1))


def avg_pool(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool factor {k} does not divide spatial dims {h}x{w}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return make_node(out, (x,), grad_fn)


def nearest_upsample(x: Tensor, k: int) -> Tensor:
    if x.ndim != 4 or k < 1:
        raise ShapeError(f"nearest_upsample needs rank-4 input and k >= 1, got {x.shape}, k={k}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return make_node(out, (x,), lambda g: (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return make_node(x.data.mean(axis=(2, 3)), (x,),
                     lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# probabilities and losses ---------------------------------------------------------

def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(x.data, axis)
    p = np.exp(out)
    return make_node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(x) -> np.ndarray:
    z = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=get_dtype())
    return np.exp(_log_softmax(z, -1))


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} at row {bad[0]} outside [0, {k})")
    return labels


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch mean of ``-log_softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    y = _check_labels(labels, n, k)
    logp = _log_softmax(logits.data, 1)
    rows = np.arange(n)
    out = np.array(-logp[rows, y].mean(), dtype=logp.dtype)

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * (g / n),)

    return make_node(out, (logits,), grad_fn)


def kl_divergence(log_p: Tensor, log_q: Tensor, tol: float = 1e-5) -> Tensor:
    """Row-mean of ``sum_k p_k (log p_k - log q_k)`` for log-probability rows."""
    if log_p.shape != log_q.shape or log_p.ndim != 2:
        raise ShapeError(f"kl_divergence expects matching [N, K] inputs, got {log_p.shape} and {log_q.shape}")
    for name, t in (("log_p", log_p), ("log_q", log_q)):
        z = t.data.astype(np.float64)
        m = z.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))).ravel()
        bad = np.flatnonzero(~(np.abs(lse) <= tol))
        if bad.size:
            raise ValueError(f"{name} row {bad[0]} is not normalized (log-sum-exp {lse[bad[0]]:.3g})")
    n = log_p.shape[0]
    p = np.exp(log_p.data)
    # 0 * log 0 contributes nothing
    diff = np.where(p > 0, log_p.data - log_q.data, 0.0)
    out = np.array((p * diff).sum() / n, dtype=p.dtype)

    def grad_fn(g):
        s = g / n
        gp = (p * (diff + 1.0) * s).astype(p.dtype) if log_p.requires_grad else None
        gq = (-p * s).astype(p.dtype) if log_q.requires_grad else None
        return gp, gq

    return make_node(out, (log_p, log_q), grad_fn)


# dispatch -------------------------------------------------------------------------

LAYER_KINDS = ("relu", "leaky_relu", "tanh", "sigmoid", "instance_norm", "avg_pool",
               "nearest_upsample", "transposed_conv", "log_softmax")


def layer_forward(kind: str, x: Tensor, **params) -> Tensor:
    """Apply a catalogued layer by name.

    ``params`` carries the kind-specific arguments: ``slope`` for leaky_relu,
    ``k`` for pooling/upsampling, ``kernel``/``bias``/``stride``/``padding`` for
    transposed_conv, ``axis`` for log_softmax, optional ``weight``/``bias`` for
    instance_norm.
    """
    x = as_tensor(x)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, params.get("slope", 0.2))
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "instance_norm":
        return instance_norm(x, params.get("weight"), params.get("bias"))
    if kind == "avg_pool":
        return avg_pool(x, params["k"])
    if kind == "nearest_upsample":
        return nearest_upsample(x, params["k"])
    if kind == "transposed_conv":
        return conv_transpose2d(x, params["kernel"], params.get("bias"),
                                params.get("stride", 1), params.get("padding", 0))
    if kind == "log_softmax":
        return log_softmax(x, params.get("axis", -1))
    raise ValueError(f"unsupported layer kind {kind!r}; expected one of {LAYER_KINDS}")
