"""Dense layer primitives with hand-derived backward passes.

Everything here operates on plain numpy arrays. Feature maps are (n, d)
matrices, or (B, n, d) when batched; layers keep their tensors in whatever
dtype they were initialized with (float32 for training, float64 when a
gradient check wants full precision).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, TooFewRowsError


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

@dataclass
class AffineLayer:
    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray    # (d_out,)


def affine_init(d_in, d_out, rng, dtype=np.float32):
    """Uniform(-sqrt(6/(d_in+d_out)), +sqrt(6/(d_in+d_out))) weights, zero bias."""
    bound = np.sqrt(6.0 / (d_in + d_out))
    w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
    b = np.zeros(d_out, dtype=dtype)
    return AffineLayer(w, b)


def affine_forward(layer, x):
    """y = x @ W + b for x of shape (..., d_in)."""
    if x.shape[-1] != layer.weight.shape[0]:
        raise ShapeMismatchError(
            f"affine expects {layer.weight.shape[0]} input features, got {x.shape[-1]}")
    y = x @ layer.weight + layer.bias
    return y, (layer, x)


def affine_backward(cache, dy):
    layer, x = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ layer.weight.T).reshape(x.shape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9


def batchnorm_init(d, dtype=np.float32):
    return BatchNormLayer(
        gamma=np.ones(d, dtype=dtype),
        beta=np.zeros(d, dtype=dtype),
        running_mean=np.zeros(d, dtype=dtype),
        running_var=np.ones(d, dtype=dtype),
    )


def batchnorm_forward(layer, x, train, groups=1):
    """Normalize columns of x (rows, d) to zero mean / unit variance.

    Train mode uses population statistics of the current rows and updates
    the running statistics in place with momentum; infer mode normalizes by
    the running statistics. With groups > 1, x is treated as `groups`
    stacked blocks of rows and each block is normalized by its own
    statistics (used where something other than the batch plays the batch
    role); the running stats absorb the mean over blocks.
    """
    rows, d = x.shape
    if d != layer.gamma.shape[0]:
        raise ShapeMismatchError(f"batchnorm width {layer.gamma.shape[0]}, input {d}")
    if train:
        per = rows // groups
        if per < 2 or rows % groups != 0:
            raise TooFewRowsError(
                f"batchnorm train mode needs >=2 rows per group, got {rows} rows / {groups} groups")
        xg = x.reshape(groups, per, d)
        mean = xg.mean(axis=1)                      # (groups, d)
        var = xg.var(axis=1)                        # population variance
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = (xg - mean[:, None, :]) * inv[:, None, :]
        xhat = xhat.reshape(rows, d)
        m = layer.momentum
        layer.running_mean[:] = m * layer.running_mean + (1.0 - m) * mean.mean(axis=0)
        layer.running_var[:] = m * layer.running_var + (1.0 - m) * var.mean(axis=0)
        cache = (layer, xhat, inv, groups)
    else:
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xhat = (x - layer.running_mean) * inv
        cache = (layer, xhat, inv, 0)   # groups=0 marks infer mode
    y = xhat * layer.gamma + layer.beta
    return y, cache


def batchnorm_backward(cache, dy):
    layer, xhat, inv, groups = cache
    rows, d = dy.shape
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    if groups == 0:
        dx = dy * layer.gamma * inv
        return dx, dgamma, dbeta
    per = rows // groups
    dyg = (dy * layer.gamma).reshape(groups, per, d)
    xhg = xhat.reshape(groups, per, d)
    mean_dy = dyg.mean(axis=1, keepdims=True)
    mean_dy_xhat = (dyg * xhg).mean(axis=1, keepdims=True)
    dx = inv[:, None, :] * (dyg - mean_dy - xhg * mean_dy_xhat)
    return dx.reshape(rows, d), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), (x > 0)


def relu_backward(cache, dy):
    return dy * cache


def elu_forward(x):
    neg = x < 0
    y = np.where(neg, np.expm1(x), x)
    return y, (neg, y)


def elu_backward(cache, dy):
    neg, y = cache
    return dy * np.where(neg, y + 1.0, 1.0)


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(cache, dy):
    return dy * (1.0 - cache * cache)


def sigmoid_forward(x):
    y = 1.0 / (1.0 + np.exp(-x))
    return y, y


def sigmoid_backward(cache, dy):
    return dy * cache * (1.0 - cache)


# ---------------------------------------------------------------------------
# sorting with permutation tracking
# ---------------------------------------------------------------------------

def column_sort_desc(F):
    """Sort every column in descending order, tracking where rows came from.

    Returns (F_sorted, perm) where perm[i, j] is the original row index of
    the value now at sorted position i in column j. Ties keep the smaller
    original row index first (stable).

    Works on (n, d) or batched (B, n, d); sorting is along the row axis.
    """
    perm = np.argsort(-F, axis=-2, kind="stable")
    return np.take_along_axis(F, perm, axis=-2), perm


def scatter_grad_by_perm(dF_sorted, perm):
    """Route a sorted-order gradient back to original row positions."""
    if dF_sorted.shape != perm.shape:
        raise ShapeMismatchError(
            f"gradient shape {dF_sorted.shape} != permutation shape {perm.shape}")
    dF = np.empty_like(dF_sorted)
    np.put_along_axis(dF, perm, dF_sorted, axis=-2)
    return dF


# ---------------------------------------------------------------------------
# column resampling (linear interpolation)
# ---------------------------------------------------------------------------

def _resample_weights(n, m):
    """Index/weight arrays mapping positions [0, m-1] affinely onto [0, n-1]."""
    if m == 1:
        t = np.zeros(1)
    else:
        t = np.arange(m) * ((n - 1) / (m - 1))
    lo = np.minimum(np.floor(t).astype(np.intp), max(n - 2, 0))
    w = t - lo
    if n == 1:
        lo = np.zeros(m, dtype=np.intp)
        w = np.zeros(m)
    return lo, w


def resample_column(v, m):
    """Linearly resample a length-n vector to length m, endpoints preserved."""
    v = np.asarray(v)
    n = v.shape[0]
    lo, w = _resample_weights(n, m)
    hi = np.minimum(lo + 1, n - 1)
    w = w.astype(v.dtype)
    return v[lo] * (1.0 - w) + v[hi] * w


def resample_rows(F, m):
    """Resample along the row axis of (..., n, d) to (..., m, d)."""
    n = F.shape[-2]
    lo, w = _resample_weights(n, m)
    hi = np.minimum(lo + 1, n - 1)
    w = w.astype(F.dtype)[:, None]
    out = F[..., lo, :] * (1.0 - w) + F[..., hi, :] * w
    return out, (n, lo, hi, w)


def resample_rows_backward(cache, dout):
    """Adjoint of resample_rows: scatter-add interpolation weights."""
    n, lo, hi, w = cache
    shape = dout.shape[:-2] + (n,) + dout.shape[-1:]
    dF = np.zeros(shape, dtype=dout.dtype)
    np.add.at(dF, (..., lo, slice(None)), dout * (1.0 - w))
    np.add.at(dF, (..., hi, slice(None)), dout * w)
    return dF


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, h=1e-3):
    """Central-difference gradient of a scalar function, entry by entry.

    The function is evaluated on float64 copies so that cancellation in the
    oracle itself does not mask real errors in an analytic backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return grad


def rel_error(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor) — the usual gradient check metric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
