"""Forward and backward kernels for the fixed layer set.

All kernels operate on NCHW ndarrays (here N, C, T, F: batch, channel, time,
frequency) and preserve the input dtype, so the same code runs at float32 in
the network and at float64 inside test oracles.

Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _pad(x: np.ndarray, pt: int, pf: int) -> np.ndarray:
    if pt == 0 and pf == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf)))


def _check_conv(x: np.ndarray, weight: np.ndarray, padding) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D [N, C, T, F], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be 4-D [C_out, C_in, k_t, k_f], got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv channel mismatch: input shape {x.shape} has {x.shape[1]} channels, "
            f"weight shape {weight.shape} expects {weight.shape[1]}"
        )
    pt, pf = padding
    _, _, t, f = x.shape
    _, _, kt, kf = weight.shape
    if t + 2 * pt < kt or f + 2 * pf < kf:
        raise ShapeError(
            f"conv input shape {x.shape} (padding {padding}) is smaller than kernel of weight shape {weight.shape}"
        )
    return kt, kf


def im2col(x: np.ndarray, kt: int, kf: int, stride, padding) -> np.ndarray:
    """Column matrix ``[k_t, k_f, C, N, T', F']`` of a padded input.

    Built from k_t*k_f strided slice copies; rows are ordered (k_t, k_f, C)
    to match :func:`_weight_matrix`.
    """
    st, sf = stride
    pt, pf = padding
    n, c, t, f = x.shape
    to, fo = conv_output_size(t, kt, st, pt), conv_output_size(f, kf, sf, pf)
    xp = _pad(x, pt, pf).transpose(1, 0, 2, 3)
    cols = np.empty((kt, kf, c, n, to, fo), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            cols[i, j] = xp[:, :, i : i + st * (to - 1) + 1 : st, j : j + sf * (fo - 1) + 1 : sf]
    return cols


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    # [C_out, C_in, k_t, k_f] -> [C_out, k_t*k_f*C_in]
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv2d(x, weight, bias=None, stride=1, padding=0, cols=None) -> np.ndarray:
    """Cross-correlate ``x`` [N, C_in, T, F] with ``weight`` [C_out, C_in, k_t, k_f].

    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    stride, padding = _pair(stride), _pair(padding)
    kt, kf = _check_conv(x, weight, padding)
    if cols is None:
        cols = im2col(x, kt, kf, stride, padding)
    _, _, _, n, to, fo = cols.shape
    cout = weight.shape[0]
    out = _weight_matrix(weight) @ cols.reshape(-1, n * to * fo)
    out = out.reshape(cout, n, to, fo)
    if bias is not None:
        out += bias.reshape(cout, 1, 1, 1)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_grad(grad_out, x, weight, stride=1, padding=0, with_bias=True, cols=None):
    """Gradients of :func:`conv2d` w.r.t. input, weight and (optionally) bias."""
    stride, padding = _pair(stride), _pair(padding)
    kt, kf = _check_conv(x, weight, padding)
    n, c, t, f = x.shape
    cout = weight.shape[0]
    st, sf = stride
    pt, pf = padding
    to, fo = conv_output_size(t, kt, st, pt), conv_output_size(f, kf, sf, pf)
    if grad_out.shape != (n, cout, to, fo):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output shape {(n, cout, to, fo)}")
    if cols is None:
        cols = im2col(x, kt, kf, stride, padding)
    m = n * to * fo
    go = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(cout, m)
    gw = go @ cols.reshape(-1, m).T
    grad_w = np.ascontiguousarray(gw.reshape(cout, kt, kf, c).transpose(0, 3, 1, 2))
    gcols = (_weight_matrix(weight).T @ go).reshape(kt, kf, c, n, to, fo)
    grad_xp = np.zeros((c, n, t + 2 * pt, f + 2 * pf), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            grad_xp[:, :, i : i + st * (to - 1) + 1 : st, j : j + sf * (fo - 1) + 1 : sf] += gcols[i, j]
    grad_x = np.ascontiguousarray(grad_xp[:, :, pt : pt + t, pf : pf + f].transpose(1, 0, 2, 3))
    grad_b = go.sum(axis=1) if with_bias else None
    return grad_x, grad_w, grad_b


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over (N, T, F) per channel.

    In training mode ``running_mean``/``running_var`` are updated in place.
    Returns ``(out, cache)``; ``cache`` feeds :func:`batchnorm2d_grad`.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm input shape {x.shape} does not match {gamma.shape[0]} channels")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return out, (xhat, inv_std, gamma, training)


def batchnorm2d_grad(grad_out, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * gamma.reshape(1, -1, 1, 1)
    if training:
        m = grad_out.size // grad_out.shape[1]
        mean_g = g.sum(axis=(0, 2, 3), keepdims=True) / m
        mean_gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) / m
        grad_x = (g - mean_g - xhat * mean_gx) * inv_std.reshape(1, -1, 1, 1)
    else:
        grad_x = g * inv_std.reshape(1, -1, 1, 1)
    return grad_x, grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0)


def relu_grad(grad_out, x):
    return grad_out * (x > 0)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def _pool_view(x, k):
    n, c, t, f = x.shape
    to, fo = t // k, f // k
    if to < 1 or fo < 1:
        raise ShapeError(f"pooling kernel {k} larger than input shape {x.shape}")
    return x[:, :, : to * k, : fo * k].reshape(n, c, to, k, fo, k), to, fo


def max_pool2d(x, k=2):
    """Non-overlapping k×k max pooling (stride k, trailing rows dropped)."""
    v, _, _ = _pool_view(x, k)
    return v.max(axis=(3, 5))


def max_pool2d_grad(grad_out, x, k=2):
    v, to, fo = _pool_view(x, k)
    n, c = x.shape[:2]
    # first maximum in row-major window order receives the gradient
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, to, fo, k * k)
    idx = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1, axis=-1)
    g = onehot * grad_out[..., None]
    g = g.reshape(n, c, to, fo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, to * k, fo * k)
    grad_x = np.zeros_like(x)
    grad_x[:, :, : to * k, : fo * k] = g
    return grad_x


def avg_pool2d(x, k=2):
    v, _, _ = _pool_view(x, k)
    return v.mean(axis=(3, 5))


def avg_pool2d_grad(grad_out, x, k=2):
    _, to, fo = _pool_view(x, k)
    g = np.repeat(np.repeat(grad_out, k, axis=2), k, axis=3) / (k * k)
    grad_x = np.zeros_like(x)
    grad_x[:, :, : to * k, : fo * k] = g
    return grad_x


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_grad(grad_out, x_shape):
    n, c, t, f = x_shape
    g = grad_out.reshape(n, c, 1, 1) / (t * f)
    return np.broadcast_to(g, x_shape).astype(grad_out.dtype)


def linear(x, weight, bias=None):
    """``x`` [N, in] times ``weight`` [out, in] transposed, plus bias."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input shape {x.shape} incompatible with weight shape {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def linear_grad(grad_out, x, weight, with_bias=True):
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0) if with_bias else None
    return grad_x, grad_w, grad_b


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch. Returns ``(loss, grad_logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D [N, K], got shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits shape {logits.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return float(loss), grad.astype(logits.dtype, copy=False)
