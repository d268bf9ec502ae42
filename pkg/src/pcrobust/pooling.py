"""The nine symmetric pooling operations.

Every pooling maps a feature set F of shape (n, d) — or a batch (B, n, d) —
to a global feature vector whose value is invariant to row permutations,
and comes with an exact backward pass. Parametric poolings keep their
trainable tensors in small dataclasses so checkpoints can address them by
dotted path (see params.named_arrays).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInputError,
    HeadDivisibilityError,
    ShapeMismatchError,
    WrongWidthError,
)
from .numcore import (
    AffineLayer,
    BatchNormLayer,
    affine_backward,
    affine_forward,
    affine_init,
    batchnorm_backward,
    batchnorm_forward,
    batchnorm_init,
    column_sort_desc,
    relu_backward,
    relu_forward,
    resample_rows,
    resample_rows_backward,
    scatter_grad_by_perm,
)

POOL_KINDS = ("max", "sum", "median", "att", "att_gate", "pma",
              "fspool", "softpool", "deepsym")
FIXED_KINDS = ("max", "sum", "median")


@dataclass
class PoolSpec:
    kind: str
    d_in: int
    n_train: int
    att_width: int = 512                       # L in the attention scorers
    pma_heads: int = 4
    pma_seeds: int = 1
    pma_hidden: int = 128
    soft_top_k: int = 32
    soft_d_m: int = 8
    mlp_widths: tuple = (512, 128, 32, 8, 1)   # deep pooling MLP

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ValueError(f"unknown pool kind {self.kind!r}")
        if self.d_in < 1:
            raise ValueError("d_in must be positive")
        if self.kind == "softpool" and self.d_in != self.soft_d_m:
            raise WrongWidthError(
                f"softpool expects d_in == {self.soft_d_m}, got {self.d_in}")

    @property
    def d_out(self):
        if self.kind == "softpool":
            return self.soft_top_k * self.soft_d_m
        return self.d_in


# --- parameter containers ---------------------------------------------------

@dataclass
class AttPoolParams:
    w: np.ndarray  # (L,)
    V: np.ndarray  # (L, d)


@dataclass
class AttGatePoolParams:
    w: np.ndarray
    V: np.ndarray
    U: np.ndarray


@dataclass
class PMAPoolParams:
    seeds: np.ndarray          # (k, d)
    fc_in: list                # two AffineLayers, d -> hidden -> d
    wq: AffineLayer
    wk: AffineLayer
    wv: AffineLayer
    fc_out: list               # two AffineLayers, d -> hidden -> d


@dataclass
class FSPoolParams:
    weight: np.ndarray         # (n_train, d)


@dataclass
class SoftPoolParams:
    kernel: np.ndarray         # (k, k) shared across the d_m sort regions


@dataclass
class MLPBlock:
    affine: AffineLayer
    bn: BatchNormLayer | None  # None on the output layer


@dataclass
class DeepSymPoolParams:
    premap: np.ndarray         # (d, d)
    mlp: list


def init_pool_params(spec, rng, dtype=np.float32):
    """Create the trainable tensors for a pooling spec (None for fixed kinds)."""
    d = spec.d_in
    if spec.kind in FIXED_KINDS:
        return None
    if spec.kind in ("att", "att_gate"):
        L = spec.att_width
        bound_v = np.sqrt(6.0 / (L + d))
        bound_w = np.sqrt(6.0 / (L + 1))
        w = rng.uniform(-bound_w, bound_w, size=L).astype(dtype)
        V = rng.uniform(-bound_v, bound_v, size=(L, d)).astype(dtype)
        if spec.kind == "att":
            return AttPoolParams(w, V)
        U = rng.uniform(-bound_v, bound_v, size=(L, d)).astype(dtype)
        return AttGatePoolParams(w, V, U)
    if spec.kind == "pma":
        if d % spec.pma_heads != 0:
            raise HeadDivisibilityError(f"d_in {d} not divisible by {spec.pma_heads} heads")
        h = spec.pma_hidden
        bound_s = np.sqrt(6.0 / (spec.pma_seeds + d))
        return PMAPoolParams(
            seeds=rng.uniform(-bound_s, bound_s, size=(spec.pma_seeds, d)).astype(dtype),
            fc_in=[affine_init(d, h, rng, dtype), affine_init(h, d, rng, dtype)],
            wq=affine_init(d, d, rng, dtype),
            wk=affine_init(d, d, rng, dtype),
            wv=affine_init(d, d, rng, dtype),
            fc_out=[affine_init(d, h, rng, dtype), affine_init(h, d, rng, dtype)],
        )
    if spec.kind == "fspool":
        return FSPoolParams(np.full((spec.n_train, d), 1.0 / spec.n_train, dtype=dtype))
    if spec.kind == "softpool":
        k = spec.soft_top_k
        bound = np.sqrt(6.0 / (2 * k))
        return SoftPoolParams(rng.uniform(-bound, bound, size=(k, k)).astype(dtype))
    if spec.kind == "deepsym":
        bound = np.sqrt(6.0 / (2 * d))
        premap = rng.uniform(-bound, bound, size=(d, d)).astype(dtype)
        widths = (spec.n_train,) + tuple(spec.mlp_widths)
        blocks = []
        for i in range(len(widths) - 1):
            last = i == len(widths) - 2
            blocks.append(MLPBlock(
                affine=affine_init(widths[i], widths[i + 1], rng, dtype),
                bn=None if last else batchnorm_init(widths[i + 1], dtype),
            ))
        return DeepSymPoolParams(premap, blocks)
    raise ValueError(spec.kind)


# --- shape plumbing ----------------------------------------------------------

def _batched(F):
    F = np.asarray(F)
    if F.ndim == 2:
        return F[None], True
    if F.ndim != 3:
        raise ShapeMismatchError(f"feature map must be (n, d) or (B, n, d), got {F.shape}")
    return F, False


def _check_nonempty(F):
    if F.shape[-2] < 1:
        raise EmptyInputError("pooling needs at least one row")


# --- fixed poolings ----------------------------------------------------------

def fixed_pool(kind, F):
    """MAX / SUM / MEDIAN column aggregation."""
    if kind not in FIXED_KINDS:
        raise ValueError(f"not a fixed pooling: {kind!r}")
    F, squeeze = _batched(F)
    _check_nonempty(F)
    B, n, d = F.shape
    if kind == "max":
        idx = np.argmax(F, axis=1)  # first max row wins ties
        g = np.take_along_axis(F, idx[:, None, :], axis=1)[:, 0, :]
        cache = ("max", F.shape, F.dtype, idx, squeeze)
    elif kind == "sum":
        g = F.sum(axis=1)
        cache = ("sum", F.shape, F.dtype, None, squeeze)
    else:
        order = np.argsort(F, axis=1, kind="stable")
        if n % 2 == 1:
            mid = order[:, n // 2, :][:, None, :]
            g = np.take_along_axis(F, mid, axis=1)[:, 0, :]
            cache = ("median", F.shape, F.dtype, (mid,), squeeze)
        else:
            lo = order[:, n // 2 - 1, :][:, None, :]
            hi = order[:, n // 2, :][:, None, :]
            g = 0.5 * (np.take_along_axis(F, lo, axis=1)
                       + np.take_along_axis(F, hi, axis=1))[:, 0, :]
            cache = ("median", F.shape, F.dtype, (lo, hi), squeeze)
    return (g[0] if squeeze else g), cache


def fixed_pool_backward(cache, dg):
    kind, shape, dtype, aux, squeeze = cache
    if squeeze:
        dg = np.asarray(dg)[None]
    dF = np.zeros(shape, dtype=dtype)
    if kind == "max":
        np.put_along_axis(dF, aux[:, None, :], dg[:, None, :].astype(dtype), axis=1)
    elif kind == "sum":
        dF += dg[:, None, :]
    else:
        if len(aux) == 1:
            np.put_along_axis(dF, aux[0], dg[:, None, :].astype(dtype), axis=1)
        else:
            lo, hi = aux
            half = (0.5 * dg[:, None, :]).astype(dtype)
            np.put_along_axis(dF, lo, half, axis=1)
            np.put_along_axis(dF, hi, half, axis=1)
    return dF[0] if squeeze else dF


# --- attention poolings -------------------------------------------------------

def attention_pool(kind, params, F):
    """ATT / ATT-GATE: softmax point weights from a small scorer, then a
    weighted column sum."""
    F, squeeze = _batched(F)
    _check_nonempty(F)
    if F.shape[-1] != params.V.shape[1]:
        raise ShapeMismatchError(
            f"pool built for width {params.V.shape[1]}, got {F.shape[-1]}")
    t = np.tanh(F @ params.V.T)                      # (B, n, L)
    if kind == "att_gate":
        u = 1.0 / (1.0 + np.exp(-(F @ params.U.T)))  # sigmoid gate
        h = t * u
    else:
        u = None
        h = t
    s = h @ params.w                                 # (B, n)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=1, keepdims=True)
    g = np.einsum("bn,bnd->bd", a, F)
    cache = (kind, params, F, t, u, a, squeeze)
    return (g[0] if squeeze else g), cache


def attention_pool_backward(cache, dg):
    kind, params, F, t, u, a, squeeze = cache
    if squeeze:
        dg = np.asarray(dg)[None]
    dF = a[:, :, None] * dg[:, None, :]
    da = np.einsum("bd,bnd->bn", dg, F)
    ds = a * (da - (a * da).sum(axis=1, keepdims=True))
    h = t if u is None else t * u
    dw = np.einsum("bn,bnl->l", ds, h)
    dh = ds[:, :, None] * params.w
    if u is None:
        dpre_t = dh * (1.0 - t * t)
        dF += dpre_t @ params.V
        grads = {
            "w": dw.astype(params.w.dtype),
            "V": np.einsum("bnl,bnd->ld", dpre_t, F).astype(params.V.dtype),
        }
    else:
        dt = dh * u
        du = dh * t
        dpre_t = dt * (1.0 - t * t)
        dpre_u = du * u * (1.0 - u)
        dF += dpre_t @ params.V + dpre_u @ params.U
        grads = {
            "w": dw.astype(params.w.dtype),
            "V": np.einsum("bnl,bnd->ld", dpre_t, F).astype(params.V.dtype),
            "U": np.einsum("bnl,bnd->ld", dpre_u, F).astype(params.U.dtype),
        }
    return (dF[0] if squeeze else dF), grads


# --- multihead attention pooling ----------------------------------------------

def _mlp2_forward(layers, x):
    y1, c1 = affine_forward(layers[0], x)
    r, cr = relu_forward(y1)
    y2, c2 = affine_forward(layers[1], r)
    return y2, (c1, cr, c2)


def _mlp2_backward(cache, dy, prefix, grads):
    c1, cr, c2 = cache
    dr, dw2, db2 = affine_backward(c2, dy)
    dy1 = relu_backward(cr, dr)
    dx, dw1, db1 = affine_backward(c1, dy1)
    grads[f"{prefix}.0.weight"] = dw1
    grads[f"{prefix}.0.bias"] = db1
    grads[f"{prefix}.1.weight"] = dw2
    grads[f"{prefix}.1.bias"] = db2
    return dx


def pma_pool(spec, params, F):
    """Multihead attention over learnable seed queries, k=1 by default."""
    F, squeeze = _batched(F)
    _check_nonempty(F)
    B, n, d = F.shape
    if d != params.seeds.shape[1]:
        raise ShapeMismatchError(f"pool built for width {params.seeds.shape[1]}, got {d}")
    nh = spec.pma_heads
    if d % nh != 0:
        raise HeadDivisibilityError(f"width {d} not divisible by {nh} heads")
    dh = d // nh
    k = params.seeds.shape[0]

    Y, c_in = _mlp2_forward(params.fc_in, F)         # (B, n, d)
    S = np.broadcast_to(params.seeds, (B, k, d))
    Q, c_q = affine_forward(params.wq, S)
    K, c_k = affine_forward(params.wk, Y)
    V, c_v = affine_forward(params.wv, Y)
    Qh = Q.reshape(B, k, nh, dh)
    Kh = K.reshape(B, n, nh, dh)
    Vh = V.reshape(B, n, nh, dh)
    scores = np.einsum("bkhd,bnhd->bhkn", Qh, Kh) / np.sqrt(d).astype(F.dtype)
    scores = scores - scores.max(axis=3, keepdims=True)
    e = np.exp(scores)
    A = e / e.sum(axis=3, keepdims=True)             # (B, nh, k, n)
    Oh = np.einsum("bhkn,bnhd->bkhd", A, Vh)
    O = Oh.reshape(B, k, d)
    H = S + O
    F2, c_out = _mlp2_forward(params.fc_out, H)
    out = H + F2                                     # (B, k, d)
    g = out[:, 0, :] if k == 1 else out.mean(axis=1)
    cache = (spec, params, F, c_in, c_q, c_k, c_v, Qh, Kh, Vh, A, H, c_out, squeeze)
    return (g[0] if squeeze else g), cache


def pma_pool_backward(cache, dg):
    spec, params, F, c_in, c_q, c_k, c_v, Qh, Kh, Vh, A, H, c_out, squeeze = cache
    if squeeze:
        dg = np.asarray(dg)[None]
    B, n, d = F.shape
    nh = spec.pma_heads
    dh = d // nh
    k = params.seeds.shape[0]
    dout = (dg[:, None, :] if k == 1 else
            np.broadcast_to(dg[:, None, :] / k, (B, k, d))).astype(F.dtype)

    grads = {}
    dH = dout.copy()
    dH += _mlp2_backward(c_out, dout, "fc_out", grads)
    dS = dH.copy()
    dO = dH
    dOh = dO.reshape(B, k, nh, dh)
    dA = np.einsum("bkhd,bnhd->bhkn", dOh, Vh)
    dVh = np.einsum("bhkn,bkhd->bnhd", A, dOh)
    dscores = A * (dA - (A * dA).sum(axis=3, keepdims=True))
    dscores = dscores / np.sqrt(d).astype(F.dtype)
    dQh = np.einsum("bhkn,bnhd->bkhd", dscores, Kh)
    dKh = np.einsum("bhkn,bkhd->bnhd", dscores, Qh)

    dQ = dQh.reshape(B, k, d)
    dK = dKh.reshape(B, n, d)
    dV = dVh.reshape(B, n, d)
    dSq, dwq, dbq = affine_backward(c_q, dQ)
    dY_k, dwk, dbk = affine_backward(c_k, dK)
    dY_v, dwv, dbv = affine_backward(c_v, dV)
    dS += dSq
    dY = dY_k + dY_v
    dF = _mlp2_backward(c_in, dY, "fc_in", grads)

    grads["seeds"] = dS.sum(axis=0)
    grads["wq.weight"], grads["wq.bias"] = dwq, dbq
    grads["wk.weight"], grads["wk.bias"] = dwk, dbk
    grads["wv.weight"], grads["wv.bias"] = dwv, dbv
    return (dF[0] if squeeze else dF), grads


# --- sorting-based poolings -----------------------------------------------------

def fspool(spec, params, F):
    """Descending column sort, resample to the trained length, weighted sum."""
    F, squeeze = _batched(F)
    _check_nonempty(F)
    B, n, d = F.shape
    if d != params.weight.shape[1]:
        raise ShapeMismatchError(f"pool built for width {params.weight.shape[1]}, got {d}")
    Fs, perm = column_sort_desc(F)
    if n != spec.n_train:
        Fr, rs = resample_rows(Fs, spec.n_train)
    else:
        Fr, rs = Fs, None
    g = (params.weight[None] * Fr).sum(axis=1)
    cache = (params, perm, Fr, rs, squeeze)
    return (g[0] if squeeze else g), cache


def fspool_backward(cache, dg):
    params, perm, Fr, rs, squeeze = cache
    if squeeze:
        dg = np.asarray(dg)[None]
    dFr = params.weight[None] * dg[:, None, :]
    dW = (Fr * dg[:, None, :]).sum(axis=0)
    dFs = resample_rows_backward(rs, dFr) if rs is not None else dFr
    dF = scatter_grad_by_perm(dFs.astype(Fr.dtype), perm)
    grads = {"weight": dW.astype(params.weight.dtype)}
    return (dF[0] if squeeze else dF), grads


def softpool(spec, params, F):
    """Per-dimension top-k sorting regions, each aggregated by a shared
    linear kernel over the sorted sort-key column."""
    F, squeeze = _batched(F)
    _check_nonempty(F)
    B, n, d = F.shape
    if d != spec.soft_d_m:
        raise WrongWidthError(f"softpool expects {spec.soft_d_m} columns, got {d}")
    k = spec.soft_top_k
    order = np.argsort(-F, axis=1, kind="stable")          # (B, n, d)
    sel = order[:, np.arange(k) % n, :]                    # cyclic repeat if n < k
    c = np.take_along_axis(F, sel, axis=1)                 # (B, k, d) sorted keys
    g3 = np.einsum("ti,bij->bjt", params.kernel, c)        # (B, d, k)
    g = g3.reshape(B, d * k)
    cache = (params, F.shape, F.dtype, sel, c, squeeze)
    return (g[0] if squeeze else g), cache


def softpool_backward(cache, dg):
    params, shape, dtype, sel, c, squeeze = cache
    if squeeze:
        dg = np.asarray(dg)[None]
    B, n, d = shape
    k = sel.shape[1]
    dg3 = dg.reshape(B, d, k)
    dK = np.einsum("bjt,bij->ti", dg3, c)
    dc = np.einsum("ti,bjt->bij", params.kernel, dg3)
    dF = np.zeros(shape, dtype=dtype)
    b_idx = np.arange(B)[:, None, None]
    col_idx = np.arange(d)[None, None, :]
    np.add.at(dF, (b_idx, sel, col_idx), dc.astype(dtype))
    grads = {"kernel": dK.astype(params.kernel.dtype)}
    return (dF[0] if squeeze else dF), grads


def deepsym(spec, params, F, train=False):
    """Linear re-map, per-column descending sort, column resampling, then a
    deep MLP shared across columns (one scalar out per column)."""
    F, squeeze = _batched(F)
    _check_nonempty(F)
    B, n, d = F.shape
    if d != params.premap.shape[0]:
        raise ShapeMismatchError(f"pool built for width {params.premap.shape[0]}, got {d}")
    Fp = F @ params.premap.T
    Fs, perm = column_sort_desc(Fp)
    if n != spec.n_train:
        Fr, rs = resample_rows(Fs, spec.n_train)
    else:
        Fr, rs = Fs, None
    x = Fr.transpose(0, 2, 1).reshape(B * d, spec.n_train)  # columns become rows
    layer_caches = []
    for block in params.mlp:
        x, ca = affine_forward(block.affine, x)
        if block.bn is not None:
            x, cb = batchnorm_forward(block.bn, x, train, groups=B)
            x, cr = relu_forward(x)
        else:
            cb = cr = None
        layer_caches.append((ca, cb, cr))
    g = x.reshape(B, d)
    cache = (params, F, perm, rs, layer_caches, B, d, squeeze)
    return (g[0] if squeeze else g), cache


def deepsym_backward(cache, dg):
    params, F, perm, rs, layer_caches, B, d, squeeze = cache
    if squeeze:
        dg = np.asarray(dg)[None]
    grads = {}
    dx = dg.reshape(B * d, 1).astype(F.dtype)
    for i in range(len(params.mlp) - 1, -1, -1):
        block = params.mlp[i]
        ca, cb, cr = layer_caches[i]
        if block.bn is not None:
            dx = relu_backward(cr, dx)
            dx, dgamma, dbeta = batchnorm_backward(cb, dx)
            grads[f"mlp.{i}.bn.gamma"] = dgamma
            grads[f"mlp.{i}.bn.beta"] = dbeta
        dx, dw, db = affine_backward(ca, dx)
        grads[f"mlp.{i}.affine.weight"] = dw
        grads[f"mlp.{i}.affine.bias"] = db
    n_train = dx.shape[1]
    dFr = dx.reshape(B, d, n_train).transpose(0, 2, 1)
    dFs = resample_rows_backward(rs, dFr) if rs is not None else dFr
    dFp = scatter_grad_by_perm(dFs.astype(F.dtype), perm)
    dF = dFp @ params.premap
    grads["premap"] = np.einsum("bnd,bne->de", dFp, F).astype(params.premap.dtype)
    return (dF[0] if squeeze else dF), grads


# --- dispatch -------------------------------------------------------------------

def pool_forward(spec, params, F, train=False):
    """Dispatch to the pooling named by the spec. Returns (g, cache)."""
    if spec.kind in FIXED_KINDS:
        return fixed_pool(spec.kind, F)
    if spec.kind in ("att", "att_gate"):
        return attention_pool(spec.kind, params, F)
    if spec.kind == "pma":
        return pma_pool(spec, params, F)
    if spec.kind == "fspool":
        return fspool(spec, params, F)
    if spec.kind == "softpool":
        return softpool(spec, params, F)
    if spec.kind == "deepsym":
        return deepsym(spec, params, F, train)
    raise ValueError(spec.kind)


def pool_backward(spec, cache, dg):
    """Dispatch backward. Returns (dF, grads) with grads keyed by tensor path."""
    if spec.kind in FIXED_KINDS:
        return fixed_pool_backward(cache, dg), {}
    if spec.kind in ("att", "att_gate"):
        return attention_pool_backward(cache, dg)
    if spec.kind == "pma":
        return pma_pool_backward(cache, dg)
    if spec.kind == "fspool":
        return fspool_backward(cache, dg)
    if spec.kind == "softpool":
        return softpool_backward(cache, dg)
    if spec.kind == "deepsym":
        return deepsym_backward(cache, dg)
    raise ValueError(spec.kind)
