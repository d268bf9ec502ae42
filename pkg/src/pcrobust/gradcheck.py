"""Finite-difference verification of every analytic backward pass.

All checks run in float64. Sorting- and argmax-based operations are only
piecewise smooth, so inputs are drawn tie-free where possible and any
entry that fails at the default step is re-checked at a smaller one:
finite-difference error from grazing a kink shrinks as the step does,
while a genuinely wrong gradient stays wrong at every step size.
"""

from dataclasses import dataclass

import numpy as np

from . import backbones as bb
from . import numcore as nc
from . import pooling as pl
from .params import named_arrays, trainable_arrays

TOLERANCE = 1e-3
_FLOOR = 1e-6


@dataclass
class CheckResult:
    component: str
    name: str
    worst: float
    passed: bool


def _entry_error(analytic, f, arr, idx, flip=False):
    a = float(analytic[idx])
    if flip:
        a = -a if a != 0 else 1.0
    err = np.inf
    for h in (1e-4, 1e-6, 1e-7):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        fd = (fp - fm) / (2.0 * h)
        if max(abs(a), abs(fd)) < _FLOOR:
            return abs(a - fd)  # both zero up to finite-difference noise
        err = abs(a - fd) / max(abs(a), abs(fd), _FLOOR)
        if err < TOLERANCE:
            return err
    return err


def _pick_entries(arr, rng, cap=6):
    idx = list(np.ndindex(arr.shape))
    if len(idx) <= cap:
        return idx
    chosen = rng.choice(len(idx), size=cap, replace=False)
    return [idx[i] for i in chosen]


def _check_array(analytic, f, arr, rng, cap=24, flip=False):
    worst = 0.0
    for idx in _pick_entries(arr, rng, cap):
        worst = max(worst, _entry_error(analytic, f, arr, idx, flip))
    return worst


def _tiefree(rng, n, d, gap=5e-3):
    """Random matrix whose per-column sorted gaps exceed `gap`."""
    for _ in range(100):
        F = rng.uniform(-1.0, 1.0, size=(n, d))
        s = np.sort(F, axis=0)
        if np.min(np.diff(s, axis=0)) > gap:
            return F
    raise RuntimeError("could not draw a tie-free matrix")


# ---------------------------------------------------------------------------
# numcore layer checks
# ---------------------------------------------------------------------------

def _snapshot_stats(layer):
    return layer.running_mean.copy(), layer.running_var.copy()


def _restore_stats(layer, snap):
    layer.running_mean[...] = snap[0]
    layer.running_var[...] = snap[1]


def check_numcore(seed=0, trials=20, flip=False):
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(trials):
        n, d_in, d_out = rng.integers(2, 8), rng.integers(1, 6), rng.integers(1, 6)
        layer = nc.affine_init(d_in, d_out, rng, np.float64)
        x = rng.normal(size=(n, d_in))
        dy = rng.normal(size=(n, d_out))
        y, cache = nc.affine_forward(layer, x)
        dx, dw, db = nc.affine_backward(cache, dy)

        def f():
            return float((nc.affine_forward(layer, x)[0] * dy).sum())
        worst = max(worst, _check_array(dx, f, x, rng, flip=flip))
        worst = max(worst, _check_array(dw, f, layer.weight, rng, flip=flip))
        worst = max(worst, _check_array(db, f, layer.bias, rng, flip=flip))
    results.append(CheckResult("numcore", "affine", worst, worst < TOLERANCE))

    worst = 0.0
    for _ in range(trials):
        n, d = rng.integers(2, 8), rng.integers(1, 6)
        layer = nc.batchnorm_init(d, np.float64)
        layer.gamma[...] = rng.normal(size=d)
        layer.beta[...] = rng.normal(size=d)
        x = rng.normal(size=(n, d))
        dy = rng.normal(size=(n, d))
        snap = _snapshot_stats(layer)
        y, cache = nc.batchnorm_forward(layer, x, train=True)
        _restore_stats(layer, snap)
        dx, dgamma, dbeta = nc.batchnorm_backward(cache, dy)

        def f():
            out, _ = nc.batchnorm_forward(layer, x, train=True)
            _restore_stats(layer, snap)
            return float((out * dy).sum())
        worst = max(worst, _check_array(dx, f, x, rng, flip=flip))
        worst = max(worst, _check_array(dgamma, f, layer.gamma, rng, flip=flip))
        worst = max(worst, _check_array(dbeta, f, layer.beta, rng, flip=flip))
    results.append(CheckResult("numcore", "batchnorm", worst, worst < TOLERANCE))

    worst = 0.0
    for _ in range(trials):
        n, m, d = int(rng.integers(2, 8)), int(rng.integers(1, 8)), int(rng.integers(1, 5))
        x = rng.normal(size=(n, d))
        dy = rng.normal(size=(m, d))
        out, cache = nc.resample_rows(x, m)
        dx = nc.resample_rows_backward(cache, dy)

        def f():
            return float((nc.resample_rows(x, m)[0] * dy).sum())
        worst = max(worst, _check_array(dx, f, x, rng, flip=flip))
    results.append(CheckResult("numcore", "resample", worst, worst < TOLERANCE))

    worst = 0.0
    for _ in range(trials):
        n, d = int(rng.integers(2, 8)), int(rng.integers(1, 5))
        x = _tiefree(rng, n, d)
        dy = rng.normal(size=(n, d))
        xs, perm = nc.column_sort_desc(x)
        dx = nc.scatter_grad_by_perm(dy, perm)

        def f():
            return float((nc.column_sort_desc(x)[0] * dy).sum())
        worst = max(worst, _check_array(dx, f, x, rng, flip=flip))
    results.append(CheckResult("numcore", "sort_scatter", worst, worst < TOLERANCE))
    return results


# ---------------------------------------------------------------------------
# pooling checks
# ---------------------------------------------------------------------------

def _small_pool_spec(kind, d, n_train):
    return pl.PoolSpec(kind, d_in=d, n_train=n_train, att_width=5,
                       pma_hidden=7, soft_d_m=d, soft_top_k=4, mlp_widths=(5, 1))


def check_pooling(seed=0, trials=20, kinds=None, flip=False):
    rng = np.random.default_rng(seed)
    results = []
    for kind in kinds or pl.POOL_KINDS:
        worst = 0.0
        for _ in range(trials):
            d = 8 if kind in ("pma", "softpool") else int(rng.integers(2, 6))
            n = int(rng.integers(2, 8))
            n_train = int(rng.integers(2, 8))
            spec = _small_pool_spec(kind, d, n_train)
            pp = pl.init_pool_params(spec, rng, np.float64)
            F = _tiefree(rng, n, d)
            dg = rng.normal(size=spec.d_out)
            g, cache = pl.pool_forward(spec, pp, F)
            dF, grads = pl.pool_backward(spec, cache, dg)

            def f():
                out, _ = pl.pool_forward(spec, pp, F)
                return float((out * dg).sum())
            worst = max(worst, _check_array(dF, f, F, rng, flip=flip))
            if pp is not None:
                tensors = trainable_arrays(pp)
                assert set(grads) == set(tensors), f"{kind}: grad keys mismatch"
                for name, arr in tensors.items():
                    worst = max(worst, _check_array(grads[name], f, arr, rng,
                                                    cap=4, flip=flip))
        results.append(CheckResult("pooling", kind, worst, worst < TOLERANCE))
    return results


# ---------------------------------------------------------------------------
# backbone checks
# ---------------------------------------------------------------------------

def _small_backbone(kind, rng):
    if kind == "grouped":
        spec = bb.make_spec("grouped", "max", n_classes=3, n_train=6,
                            n_centroids=4, ball_cap=3, ball_radius=0.9,
                            mask_radius=0.6)
        n = 6
    else:
        pool = {"pointnet": "max", "deepsets": "max", "dss": "sum"}[kind]
        spec = bb.make_spec(kind, pool, n_classes=3, n_train=6)
        n = int(rng.integers(4, 8))
    params = bb.init_model(spec, rng, np.float64)
    return spec, params, n


def _stats_snapshot(params):
    return {k: v.copy() for k, v in named_arrays(params).items()
            if k.endswith(("running_mean", "running_var"))}


def _stats_restore(params, snap):
    arrays = named_arrays(params)
    for k, v in snap.items():
        arrays[k][...] = v


def _grouped_instance(spec, params, rng, n):
    """Draw a cloud and place the mask radius mid-gap between center norms,
    so some features are kept and no center sits on the mask boundary."""
    from .backbones import grouped_forward
    X = rng.uniform(-1.0, 1.0, size=(2, n, 3))
    _, outputs, _ = grouped_forward(spec, params, X)
    per_sample = np.linalg.norm(outputs.centers, axis=2)
    needed = per_sample.min(axis=1).max()   # radius must keep >=1 center per sample
    norms = np.sort(per_sample.ravel())
    best = None
    for a, b in zip(norms[:-1], norms[1:]):
        mid = 0.5 * (a + b)
        if mid > needed and (best is None or b - a > best[0]):
            best = (b - a, mid)
    spec.mask_radius = float(best[1]) if best else float(norms[-1] + 1.0)
    return X


def check_backbones(seed=0, trials=20, kinds=None, flip=False):
    rng = np.random.default_rng(seed)
    results = []
    for kind in kinds or bb.BACKBONE_KINDS:
        worst = 0.0
        for t in range(trials):
            spec, params, n = _small_backbone(kind, rng)
            if kind == "grouped":
                X = _grouped_instance(spec, params, rng, n)
            else:
                X = rng.uniform(-1.0, 1.0, size=(2, n, 3))
            y = rng.integers(0, spec.n_classes, size=2)
            train = kind == "pointnet" and t % 2 == 1  # exercise train-mode BN too
            snap = _stats_snapshot(params)
            loss, _, dX, grads = bb.loss_and_grads(spec, params, X, y, train=train)
            _stats_restore(params, snap)

            def f():
                val = bb.loss_and_grads(spec, params, X, y, train=train)[0]
                _stats_restore(params, snap)
                return float(val)
            worst = max(worst, _check_array(dX, f, X, rng, cap=12, flip=flip))
            tensors = trainable_arrays(params)
            assert set(grads) == set(tensors), (
                f"{kind}: grad keys mismatch {sorted(set(grads) ^ set(tensors))[:4]}")
            for name, arr in tensors.items():
                worst = max(worst, _check_array(grads[name], f, arr, rng,
                                                cap=2, flip=flip))
        results.append(CheckResult("backbones", kind, worst, worst < TOLERANCE))
    return results


# ---------------------------------------------------------------------------
# suite entry point
# ---------------------------------------------------------------------------

COMPONENTS = ("numcore", "pooling", "backbones")


def run_suite(component=None, kind=None, seed=0, trials=20, flip=False):
    """Run the requested checks; returns (results, all_passed)."""
    results = []
    if component in (None, "numcore") and kind is None:
        results.extend(check_numcore(seed, trials, flip))
    if component in (None, "pooling"):
        kinds = [kind] if kind else None
        results.extend(check_pooling(seed, trials, kinds, flip))
    if component in (None, "backbones"):
        kinds = [kind] if kind and kind in bb.BACKBONE_KINDS else None
        if kind is None or kinds:
            results.extend(check_backbones(seed, trials, kinds, flip))
    return results, all(r.passed for r in results)
