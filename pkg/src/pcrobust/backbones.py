"""Point-cloud classifier backbones with full manual backward passes.

Four architectures share the equivariant-layers / symmetric-pool / FC-head
layout: three flat backbones (pointnet, deepsets, dss) and a single-level
grouped backbone that hosts gather vectors for the masking defense.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    LabelOutOfRangeError,
    ShapeMismatchError,
    StaleCacheError,
    TooFewPointsError,
    TooManyCentroidsError,
)
from .numcore import (
    AffineLayer,
    affine_backward,
    affine_forward,
    affine_init,
    batchnorm_backward,
    batchnorm_forward,
    batchnorm_init,
    elu_backward,
    elu_forward,
    relu_backward,
    relu_forward,
    tanh_backward,
    tanh_forward,
)
from .pooling import PoolSpec, init_pool_params, pool_backward, pool_forward

BACKBONE_KINDS = ("pointnet", "deepsets", "dss", "grouped")

# equivariant widths and activations per architecture
_PHI_WIDTHS = {
    "pointnet": (3, 64, 64, 128, 1024),
    "deepsets": (3, 256, 256),
    "dss": (3, 64, 256, 256),
}
_PHI_ACT = {"pointnet": "relu", "deepsets": "elu", "dss": "relu"}
_SIGMA_HIDDEN = {
    "pointnet": (512, 256),
    "deepsets": (256,),
    "dss": (256,),
    "grouped": (256,),
}
_SIGMA_ACT = {"pointnet": "relu", "deepsets": "tanh", "dss": "relu", "grouped": "relu"}

GROUPED_LOCAL_WIDTHS = (3, 64, 128, 256)
GROUPED_GATHER_WIDTHS = (256, 640, 640, 3)


@dataclass
class BackboneSpec:
    kind: str
    n_classes: int
    n_train: int
    pool: PoolSpec
    n_centroids: int = 128
    ball_radius: float = 0.2
    ball_cap: int = 32
    mask_radius: float = 0.08
    gather_lambda: float = 1.0

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")

    def phi_widths(self):
        if self.kind == "grouped":
            return GROUPED_LOCAL_WIDTHS
        widths = list(_PHI_WIDTHS[self.kind])
        if self.pool.kind == "softpool":
            widths[-1] = self.pool.soft_d_m
        return tuple(widths)

    def sigma_widths(self):
        return (self.pool.d_out,) + _SIGMA_HIDDEN[self.kind] + (self.n_classes,)


def make_spec(kind, pool_kind, n_classes, n_train, **kwargs):
    """Wire up a BackboneSpec with a pool of the matching width."""
    pool_kwargs = {k[5:]: v for k, v in kwargs.items() if k.startswith("pool_")}
    spec_kwargs = {k: v for k, v in kwargs.items() if not k.startswith("pool_")}
    if kind == "grouped":
        d_in = GROUPED_LOCAL_WIDTHS[-1]
    else:
        d_in = _PHI_WIDTHS[kind][-1]
    if pool_kind == "softpool":
        d_in = pool_kwargs.get("soft_d_m", 8)
    pool = PoolSpec(pool_kind, d_in=d_in, n_train=n_train, **pool_kwargs)
    return BackboneSpec(kind, n_classes, n_train, pool, **spec_kwargs)


# --- parameter containers -----------------------------------------------------

@dataclass
class PhiLayer:
    fc: AffineLayer
    fc2: AffineLayer | None    # second branch (dss only)
    bn: object


@dataclass
class SigmaLayer:
    fc: AffineLayer
    bn: object


@dataclass
class ModelParams:
    phi: list
    pool: object
    sigma: list


@dataclass
class GroupedModelParams:
    local: list     # PhiLayer without fc2
    gather: list    # AffineLayers
    pool: object
    sigma: list


def _init_sigma(spec, rng, dtype):
    widths = spec.sigma_widths()
    layers = []
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        layers.append(SigmaLayer(
            fc=affine_init(widths[i], widths[i + 1], rng, dtype),
            bn=None if last else batchnorm_init(widths[i + 1], dtype),
        ))
    return layers


def init_model(spec, rng, dtype=np.float32):
    """Deterministically initialize all trainable tensors for a spec."""
    if spec.pool.kind != "softpool" and spec.pool.d_in != spec.phi_widths()[-1]:
        raise ConfigError(
            f"pool d_in {spec.pool.d_in} does not match backbone width {spec.phi_widths()[-1]}")
    if spec.kind == "grouped":
        local = [PhiLayer(affine_init(GROUPED_LOCAL_WIDTHS[i], GROUPED_LOCAL_WIDTHS[i + 1],
                                      rng, dtype),
                          None, batchnorm_init(GROUPED_LOCAL_WIDTHS[i + 1], dtype))
                 for i in range(len(GROUPED_LOCAL_WIDTHS) - 1)]
        gather = [affine_init(GROUPED_GATHER_WIDTHS[i], GROUPED_GATHER_WIDTHS[i + 1], rng, dtype)
                  for i in range(len(GROUPED_GATHER_WIDTHS) - 1)]
        pool = init_pool_params(spec.pool, rng, dtype)
        sigma = _init_sigma(spec, rng, dtype)
        return GroupedModelParams(local, gather, pool, sigma)
    widths = spec.phi_widths()
    phi = []
    for i in range(len(widths) - 1):
        fc2 = affine_init(widths[i], widths[i + 1], rng, dtype) if spec.kind == "dss" else None
        phi.append(PhiLayer(affine_init(widths[i], widths[i + 1], rng, dtype),
                            fc2, batchnorm_init(widths[i + 1], dtype)))
    pool = init_pool_params(spec.pool, rng, dtype)
    sigma = _init_sigma(spec, rng, dtype)
    return ModelParams(phi, pool, sigma)


# --- activations ----------------------------------------------------------------

_ACT_FWD = {"relu": relu_forward, "elu": elu_forward, "tanh": tanh_forward}
_ACT_BWD = {"relu": relu_backward, "elu": elu_backward, "tanh": tanh_backward}


# --- losses ----------------------------------------------------------------------

def xent_loss(logits, y):
    """Mean softmax cross-entropy; returns (loss, dlogits)."""
    logits = np.asarray(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B, C = logits.shape
    if y.min() < 0 or y.max() >= C:
        raise LabelOutOfRangeError(f"labels must be in [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -float(logp[np.arange(B), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    dlogits = dlogits.astype(logits.dtype)
    return loss, (dlogits[0] if squeeze else dlogits)


def gather_loss(outputs):
    """Mean-over-batch L1 distance of predicted centers from the origin.

    Returns (value, dcenters) with the subgradient at zero set to 0.
    """
    c = outputs.centers
    B = c.shape[0]
    value = float(np.abs(c).sum() / B)
    dcenters = np.sign(c).astype(c.dtype) / B
    return value, dcenters


# --- flat backbones ---------------------------------------------------------------

def _batched_clouds(X):
    X = np.asarray(X)
    if X.ndim == 2:
        return X[None], True
    if X.ndim != 3 or X.shape[2] != 3:
        raise ShapeMismatchError(f"expected (B, n, 3) clouds, got {X.shape}")
    return X, False


def _flat_forward(spec, params, X, train):
    B, n, _ = X.shape
    F = X.reshape(B * n, 3)
    phi_caches = []
    width = 3
    for layer in params.phi:
        if spec.kind == "pointnet":
            h, ca = affine_forward(layer.fc, F)
            extra = None
        else:
            F3 = F.reshape(B, n, width)
            zidx = np.argmax(F3, axis=1)                       # (B, width)
            z = np.take_along_axis(F3, zidx[:, None, :], axis=1)[:, 0, :]
            if spec.kind == "deepsets":
                sub = (F3 - z[:, None, :]).reshape(B * n, width)
                h, ca = affine_forward(layer.fc, sub)
                extra = (zidx, None)
            else:  # dss: FC1(F) + FC2(max(F)) broadcast over rows
                h1, ca = affine_forward(layer.fc, F)
                h2, ca2 = affine_forward(layer.fc2, z)
                h = (h1.reshape(B, n, -1) + h2[:, None, :]).reshape(B * n, -1)
                extra = (zidx, ca2)
        h, cb = batchnorm_forward(layer.bn, h, train)
        act = _ACT_FWD[_PHI_ACT[spec.kind]]
        F, cact = act(h)
        width = F.shape[1]
        phi_caches.append((ca, cb, cact, extra))
    Fmap = F.reshape(B, n, width)
    g, pool_cache = pool_forward(spec.pool, params.pool, Fmap, train)
    sigma_caches = []
    h = g
    for i, layer in enumerate(params.sigma):
        h, ca = affine_forward(layer.fc, h)
        if layer.bn is not None:
            h, cb = batchnorm_forward(layer.bn, h, train)
            act = _ACT_FWD[_SIGMA_ACT[spec.kind]]
            h, cact = act(h)
        else:
            cb = cact = None
        sigma_caches.append((ca, cb, cact))
    return h, {"spec": spec, "B": B, "n": n, "phi": phi_caches,
               "pool": pool_cache, "sigma": sigma_caches}


def _flat_backward(spec, params, cache, dlogits):
    B, n = cache["B"], cache["n"]
    grads = {}
    dh = dlogits
    for i in range(len(params.sigma) - 1, -1, -1):
        ca, cb, cact = cache["sigma"][i]
        if cact is not None:
            dh = _ACT_BWD[_SIGMA_ACT[spec.kind]](cact, dh)
            dh, dgamma, dbeta = batchnorm_backward(cb, dh)
            grads[f"sigma.{i}.bn.gamma"] = dgamma
            grads[f"sigma.{i}.bn.beta"] = dbeta
        dh, dw, db = affine_backward(ca, dh)
        grads[f"sigma.{i}.fc.weight"] = dw
        grads[f"sigma.{i}.fc.bias"] = db
    dF3, pool_grads = pool_backward(spec.pool, cache["pool"], dh)
    for name, gval in pool_grads.items():
        grads[f"pool.{name}"] = gval
    dF = dF3.reshape(B * n, -1)
    for i in range(len(params.phi) - 1, -1, -1):
        ca, cb, cact, extra = cache["phi"][i]
        dF = _ACT_BWD[_PHI_ACT[spec.kind]](cact, dF)
        dF, dgamma, dbeta = batchnorm_backward(cb, dF)
        grads[f"phi.{i}.bn.gamma"] = dgamma
        grads[f"phi.{i}.bn.beta"] = dbeta
        if spec.kind == "pointnet":
            dF, dw, db = affine_backward(ca, dF)
        elif spec.kind == "deepsets":
            zidx, _ = extra
            dsub, dw, db = affine_backward(ca, dF)
            din = dsub.shape[1]
            dsub3 = dsub.reshape(B, n, din)
            dz = -dsub3.sum(axis=1)                             # (B, din)
            dF3 = dsub3.copy()
            b_idx = np.arange(B)[:, None]
            col_idx = np.arange(din)[None, :]
            np.add.at(dF3, (b_idx, zidx, col_idx), dz)
            dF = dF3.reshape(B * n, din)
        else:  # dss
            zidx, ca2 = extra
            dout = dF.reshape(B, n, -1)
            dz_out = dout.sum(axis=1)
            dF, dw, db = affine_backward(ca, dF)
            dz, dw2, db2 = affine_backward(ca2, dz_out)
            din = dF.shape[1]
            dF3 = dF.reshape(B, n, din)
            b_idx = np.arange(B)[:, None]
            col_idx = np.arange(din)[None, :]
            np.add.at(dF3, (b_idx, zidx, col_idx), dz)
            dF = dF3.reshape(B * n, din)
            grads[f"phi.{i}.fc2.weight"] = dw2
            grads[f"phi.{i}.fc2.bias"] = db2
        grads[f"phi.{i}.fc.weight"] = dw
        grads[f"phi.{i}.fc.bias"] = db
    dX = dF.reshape(B, n, 3)
    return dX, grads


# --- farthest point sampling and grouping -------------------------------------------

def _lex_smallest(points, candidates):
    """Among candidate indices, the lexicographically smallest coordinate;
    equal coordinates resolve to the lowest index."""
    sub = points[candidates]
    order = np.lexsort((candidates, sub[:, 2], sub[:, 1], sub[:, 0]))
    return int(candidates[order[0]])


def fps(points, m):
    """Greedy farthest-point sampling of m centroid indices.

    Starts at the point farthest from the centroid so the selected
    coordinate set is permutation-invariant on tie-free clouds.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if m > n:
        raise TooManyCentroidsError(f"asked for {m} centroids from {n} points")
    centroid = points.mean(axis=0)
    d0 = np.linalg.norm(points - centroid, axis=1)
    cand = np.flatnonzero(d0 == d0.max())
    first = _lex_smallest(points, cand) if cand.size > 1 else int(cand[0])
    selected = np.empty(m, dtype=np.intp)
    selected[0] = first
    min_d = np.linalg.norm(points - points[first], axis=1)
    min_d[first] = -np.inf
    for i in range(1, m):
        top = min_d.max()
        cand = np.flatnonzero(min_d == top)
        nxt = _lex_smallest(points, cand) if cand.size > 1 else int(cand[0])
        selected[i] = nxt
        min_d = np.minimum(min_d, np.linalg.norm(points - points[nxt], axis=1))
        min_d[nxt] = -np.inf
    return selected


@dataclass
class GatherOutputs:
    local_features: np.ndarray   # (B, n', 256)
    vectors: np.ndarray          # (B, n', 3) predicted offsets
    centers: np.ndarray          # (B, n', 3) x_ci + v_i
    mask: np.ndarray             # (B, n') 1 where kept
    masked_features: np.ndarray  # (B, n', 256)
    centroid_idx: np.ndarray     # (B, n')


def _group(spec, X):
    """FPS centroids plus nearest-within-radius members, slots padded by
    repeating the nearest member so every group has ball_cap rows."""
    B, n, _ = X.shape
    m, cap, radius = spec.n_centroids, spec.ball_cap, spec.ball_radius
    if n < m:
        raise TooFewPointsError(f"grouped backbone needs at least {m} points, got {n}")
    centroid_idx = np.stack([fps(X[b], m) for b in range(B)])
    centers = np.take_along_axis(X, centroid_idx[:, :, None], axis=1)  # (B, m, 3)
    diff = centers[:, :, None, :] - X[:, None, :, :]
    dist = np.linalg.norm(diff, axis=3)                                # (B, m, n)
    order = np.argsort(dist, axis=2, kind="stable")[:, :, :cap]
    od = np.take_along_axis(dist, order, axis=2)
    valid = od < radius
    valid[:, :, 0] = True                 # empty ball falls back to the nearest point
    member_idx = np.where(valid, order, order[:, :, :1])
    return centroid_idx, centers, member_idx


def grouped_forward(spec, params, X, train=False):
    """Forward pass of the grouped backbone.

    Returns (logits, GatherOutputs, cache). Local features are masked to
    zero when their predicted center misses the origin by >= mask_radius;
    an all-masked cloud classifies from the zero feature.
    """
    X, squeeze = _batched_clouds(X)
    B, n, _ = X.shape
    centroid_idx, centers, member_idx = _group(spec, X)
    m, cap = spec.n_centroids, spec.ball_cap
    member_xyz = X[np.arange(B)[:, None, None], member_idx]            # (B, m, cap, 3)

    h = member_xyz.reshape(B * m * cap, 3)
    local_caches = []
    for layer in params.local:
        h, ca = affine_forward(layer.fc, h)
        h, cb = batchnorm_forward(layer.bn, h, train)
        h, cr = relu_forward(h)
        local_caches.append((ca, cb, cr))
    d_local = h.shape[1]
    member_feat = h.reshape(B, m, cap, d_local)
    fidx = np.argmax(member_feat, axis=2)                              # (B, m, d)
    f = np.take_along_axis(member_feat, fidx[:, :, None, :], axis=2)[:, :, 0, :]

    v = f.reshape(B * m, d_local)
    gather_caches = []
    for i, layer in enumerate(params.gather):
        v, ca = affine_forward(layer, v)
        if i < len(params.gather) - 1:
            v, cr = relu_forward(v)
        else:
            cr = None
        gather_caches.append((ca, cr))
    v = v.reshape(B, m, 3)
    c = centers + v
    mask = (np.linalg.norm(c, axis=2) < spec.mask_radius).astype(X.dtype)
    Fg = f * mask[:, :, None]

    g, pool_cache = pool_forward(spec.pool, params.pool, Fg, train)
    sigma_caches = []
    hlog = g
    for layer in params.sigma:
        hlog, ca = affine_forward(layer.fc, hlog)
        if layer.bn is not None:
            hlog, cb = batchnorm_forward(layer.bn, hlog, train)
            hlog, cact = relu_forward(hlog)
        else:
            cb = cact = None
        sigma_caches.append((ca, cb, cact))

    outputs = GatherOutputs(f, v, c, mask, Fg, centroid_idx)
    cache = {"spec": spec, "B": B, "n": n, "squeeze": squeeze,
             "centroid_idx": centroid_idx, "member_idx": member_idx,
             "local": local_caches, "fidx": fidx, "f": f, "mask": mask,
             "gather": gather_caches, "pool": pool_cache, "sigma": sigma_caches,
             "cap": cap, "d_local": d_local}
    logits = hlog[0] if squeeze else hlog
    return logits, outputs, cache


def grouped_backward(spec, params, cache, dlogits, dcenters=None):
    """Backward through the grouped model.

    dcenters carries the gather-loss gradient with respect to the predicted
    centers; pass None when only the classification loss matters.
    """
    if cache["spec"] is not spec:
        raise StaleCacheError("cache was produced by a different spec")
    B, n = cache["B"], cache["n"]
    m, cap, d_local = spec.n_centroids, cache["cap"], cache["d_local"]
    if cache["squeeze"]:
        dlogits = np.asarray(dlogits)[None]
        if dcenters is not None:
            dcenters = np.asarray(dcenters)[None]
    grads = {}
    dh = dlogits
    for i in range(len(params.sigma) - 1, -1, -1):
        ca, cb, cact = cache["sigma"][i]
        if cact is not None:
            dh = relu_backward(cact, dh)
            dh, dgamma, dbeta = batchnorm_backward(cb, dh)
            grads[f"sigma.{i}.bn.gamma"] = dgamma
            grads[f"sigma.{i}.bn.beta"] = dbeta
        dh, dw, db = affine_backward(ca, dh)
        grads[f"sigma.{i}.fc.weight"] = dw
        grads[f"sigma.{i}.fc.bias"] = db
    dFg, pool_grads = pool_backward(spec.pool, cache["pool"], dh)
    for name, gval in pool_grads.items():
        grads[f"pool.{name}"] = gval

    mask = cache["mask"]
    df = dFg * mask[:, :, None]          # masking is a constant 0/1 gate
    dc = np.zeros((B, m, 3), dtype=df.dtype)
    if dcenters is not None:
        dc += dcenters
    dv = dc.reshape(B * m, 3)
    for i in range(len(params.gather) - 1, -1, -1):
        ca, cr = cache["gather"][i]
        if cr is not None:
            dv = relu_backward(cr, dv)
        dv, dw, db = affine_backward(ca, dv)
        grads[f"gather.{i}.weight"] = dw
        grads[f"gather.{i}.bias"] = db
    df = df + dv.reshape(B, m, d_local)

    dmember = np.zeros((B, m, cap, d_local), dtype=df.dtype)
    np.put_along_axis(dmember, cache["fidx"][:, :, None, :], df[:, :, None, :], axis=2)
    dh = dmember.reshape(B * m * cap, d_local)
    for i in range(len(params.local) - 1, -1, -1):
        ca, cb, cr = cache["local"][i]
        dh = relu_backward(cr, dh)
        dh, dgamma, dbeta = batchnorm_backward(cb, dh)
        grads[f"local.{i}.bn.gamma"] = dgamma
        grads[f"local.{i}.bn.beta"] = dbeta
        dh, dw, db = affine_backward(ca, dh)
        grads[f"local.{i}.fc.weight"] = dw
        grads[f"local.{i}.fc.bias"] = db
    dmember_xyz = dh.reshape(B, m, cap, 3)

    dX = np.zeros((B, n, 3), dtype=df.dtype)
    b_idx = np.arange(B)[:, None, None]
    np.add.at(dX, (b_idx, cache["member_idx"]), dmember_xyz)
    # centers feed c = x_centroid + v
    np.add.at(dX, (np.arange(B)[:, None], cache["centroid_idx"]), dc)
    return (dX[0] if cache["squeeze"] else dX), grads


# --- unified entry points -------------------------------------------------------

def forward(spec, params, X, train=False):
    """Logits for a batch of clouds; returns (logits, cache).

    For the grouped backbone the cache also stores the GatherOutputs under
    cache["outputs"].
    """
    X, squeeze = _batched_clouds(X)
    if spec.kind == "grouped":
        logits, outputs, cache = grouped_forward(spec, params, X, train)
        cache["outputs"] = outputs
        cache["squeeze"] = squeeze
        return (logits[0] if squeeze else logits), cache
    logits, cache = _flat_forward(spec, params, X, train)
    cache["squeeze"] = squeeze
    return (logits[0] if squeeze else logits), cache


def backward(spec, params, cache, dlogits, dcenters=None):
    """Exact gradients w.r.t. inputs and every trainable tensor."""
    if cache["spec"] is not spec:
        raise StaleCacheError("cache was produced by a different spec")
    if spec.kind == "grouped":
        return grouped_backward(spec, params, cache, dlogits, dcenters)
    squeeze = cache.get("squeeze", False)
    if squeeze:
        dlogits = np.asarray(dlogits)[None]
    dX, grads = _flat_backward(spec, params, cache, dlogits)
    return (dX[0] if squeeze else dX), grads


def loss_and_grads(spec, params, X, y, train=False):
    """Total training loss with input and parameter gradients.

    The grouped backbone adds gather_lambda times the gather loss; other
    kinds use plain cross-entropy. Returns (loss, logits, dX, grads).
    """
    X, squeeze = _batched_clouds(X)
    logits, cache = forward(spec, params, X, train)
    loss, dlogits = xent_loss(logits, y)
    dcenters = None
    if spec.kind == "grouped":
        gl, dcenters = gather_loss(cache["outputs"])
        loss = loss + spec.gather_lambda * gl
        dcenters = spec.gather_lambda * dcenters
    dX, grads = backward(spec, params, cache, dlogits, dcenters)
    if squeeze:
        dX = dX if dX.ndim == 2 else dX[0]
        logits = logits if logits.ndim == 1 else logits[0]
    return loss, logits, dX, grads


class Classifier:
    """A backbone spec bundled with its parameters.

    The attack and training code talk to models through this: logits and
    predictions in inference mode, losses with input gradients for
    gradient-based attacks.
    """

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    def logits(self, X, train=False):
        out, _ = forward(self.spec, self.params, X, train)
        return out

    def predict(self, X):
        out = self.logits(X)
        return int(np.argmax(out)) if out.ndim == 1 else np.argmax(out, axis=1)

    def loss_and_input_grad(self, X, y):
        loss, _, dX, _ = loss_and_grads(self.spec, self.params, X, y, train=False)
        return loss, dX

    def xent_and_input_grad(self, X, y):
        """Cross-entropy only (no gather term), for attack objectives."""
        logits, cache = forward(self.spec, self.params, X, train=False)
        loss, dlogits = xent_loss(logits, y)
        dX, _ = backward(self.spec, self.params, cache, dlogits)
        return loss, dX

    def forward_with_backprop(self, X):
        """(logits, aux, backprop) in inference mode.

        aux is the GatherOutputs for grouped backbones, else None.
        backprop(dlogits, dcenters=None) returns the input gradient.
        """
        logits, cache = forward(self.spec, self.params, X, train=False)
        aux = cache.get("outputs")

        def backprop(dlogits, dcenters=None):
            dX, _ = backward(self.spec, self.params, cache, dlogits, dcenters)
            return dX

        return logits, aux, backprop
