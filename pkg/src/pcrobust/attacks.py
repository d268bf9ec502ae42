"""White-box, adaptive, and black-box attacks.

Attack entry points take either a single cloud (n, 3) or a batch
(B, n, 3); batched calls run every sample in lockstep against a shared
read-only model, which is exactly equivalent to attacking them one by one
because models evaluate in inference mode. Per-sample determinism comes
from explicit seeds.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import AllPointsRemovedError, NonFiniteGradientError

__all__ = [
    "LinfAttackConfig", "L2AttackConfig", "CWConfig", "BlackBoxConfig",
    "AttackOutcome", "linf_step_size", "fgsm", "pgd_linf", "mim", "pgd_l2",
    "cw_l2_targeted", "bpda_pipeline_attack", "gather_adaptive_attack",
    "score_blackbox_attack", "evolution_attack",
]


# ---------------------------------------------------------------------------
# configs and outcomes
# ---------------------------------------------------------------------------

@dataclass
class LinfAttackConfig:
    epsilon: float
    steps: int
    random_start: bool = True
    step_rule: str = "pgd"          # "pgd": eps/T below 10 steps else eps/10; "bim": eps/T

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 0:
            raise ValueError("epsilon and steps must be non-negative")
        if self.step_rule not in ("pgd", "bim"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass
class L2AttackConfig:
    delta: float
    steps: int = 50

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    def epsilon(self, n, d_in=3):
        return self.delta * np.sqrt(n * d_in)


@dataclass
class CWConfig:
    target: int
    lam_lo: float = 10.0
    lam_hi: float = 80.0
    binary_steps: int = 10
    iters: int = 500
    step: float = 0.01

    def __post_init__(self):
        if not self.lam_lo < self.lam_hi:
            raise ValueError("lambda range must satisfy low < high")


@dataclass
class BlackBoxConfig:
    kind: str                        # "spsa", "nes", or "evolution"
    epsilon: float
    sample_size: int = 32
    query_budget: int = 2000
    keep: int = 4                    # evolution survivors
    smoothing: float = 0.01          # spsa/nes perturbation scale

    def __post_init__(self):
        if self.kind not in ("spsa", "nes", "evolution"):
            raise ValueError(f"unknown black-box kind {self.kind!r}")
        # evolution budgets count generations, not per-sample loss queries
        if self.kind != "evolution" and self.query_budget < self.sample_size:
            raise ValueError("query budget must cover at least one sample batch")


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    success: bool
    queries: int
    linf: float
    l2: float
    loss: float
    extra: dict = field(default_factory=dict)


def linf_step_size(epsilon, steps, rule="pgd"):
    if steps <= 0:
        return 0.0
    if rule == "bim":
        return epsilon / steps
    return epsilon / steps if steps < 10 else epsilon / 10.0


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _as_batch(X, y=None):
    X = np.asarray(X)
    single = X.ndim == 2
    Xb = X[None] if single else X
    yb = None
    if y is not None:
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if yb.shape[0] != Xb.shape[0]:
            yb = np.full(Xb.shape[0], int(y), dtype=np.int64)
    return Xb.astype(np.float32, copy=True), yb, single


def _xent_per_sample(logits, y):
    """Per-sample cross-entropy and its un-averaged logits gradient."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    losses = -logp[np.arange(B), y]
    dlogits = np.exp(logp)
    dlogits[np.arange(B), y] -= 1.0
    return losses, dlogits.astype(logits.dtype)


def _check_finite(g):
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("input gradient contains NaN or Inf")


def _norms(X0, X1):
    d = (X1 - X0).reshape(X0.shape[0], -1).astype(np.float64)
    return np.abs(d).max(axis=1), np.linalg.norm(d, axis=1)


def _outcomes(model, X0, X1, y, queries, extra=None):
    logits = np.atleast_2d(model.logits(X1))
    losses, _ = _xent_per_sample(logits, y)
    preds = logits.argmax(axis=1)
    linf, l2 = _norms(X0, X1)
    return [AttackOutcome(X1[i].copy(), bool(preds[i] != y[i]), queries,
                          float(linf[i]), float(l2[i]), float(losses[i]),
                          dict(extra or {}))
            for i in range(X0.shape[0])]


def _unwrap(outcomes, single):
    return outcomes[0] if single else outcomes


def _starts_from_seeds(shape, epsilon, rng, seeds):
    B = shape[0]
    if seeds is not None:
        rows = [np.random.default_rng(int(s)).uniform(-epsilon, epsilon, size=shape[1:])
                for s in seeds]
        return np.stack(rows).astype(np.float32)
    if rng is None:
        rng = np.random.default_rng(0)
    return rng.uniform(-epsilon, epsilon, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# white-box attacks
# ---------------------------------------------------------------------------

def fgsm(model, X, y, epsilon):
    """Single step along the sign of the cross-entropy input gradient."""
    Xb, yb, single = _as_batch(X, y)
    logits, _, backprop = model.forward_with_backprop(Xb)
    _, dlogits = _xent_per_sample(np.atleast_2d(logits), yb)
    g = backprop(dlogits)
    _check_finite(g)
    Xadv = Xb + np.float32(epsilon) * np.sign(g, dtype=np.float32)
    return _unwrap(_outcomes(model, Xb, Xadv, yb, queries=1), single)


def pgd_linf(model, X, y, cfg, rng=None, seeds=None):
    """Iterated sign steps projected back onto the L-inf ball around X."""
    Xb, yb, single = _as_batch(X, y)
    alpha = np.float32(linf_step_size(cfg.epsilon, cfg.steps, cfg.step_rule))
    eps = np.float32(cfg.epsilon)
    lo, hi = Xb - eps, Xb + eps
    Xt = Xb.copy()
    if cfg.random_start and cfg.step_rule == "pgd":
        Xt = Xt + _starts_from_seeds(Xb.shape, cfg.epsilon, rng, seeds)
        Xt = np.clip(Xt, lo, hi)
    for _ in range(cfg.steps):
        logits, _, backprop = model.forward_with_backprop(Xt)
        _, dlogits = _xent_per_sample(np.atleast_2d(logits), yb)
        g = backprop(dlogits)
        _check_finite(g)
        Xt = np.clip(Xt + alpha * np.sign(g, dtype=np.float32), lo, hi)
    return _unwrap(_outcomes(model, Xb, Xt, yb, queries=max(cfg.steps, 1)), single)


def mim(model, X, y, epsilon, steps):
    """Momentum iterative method: mu=1, alpha=eps/T, no random start.

    A sample whose gradient L1 norm hits exactly zero is terminal: it keeps
    its current iterate while the rest of the batch continues.
    """
    if steps < 1:
        raise ValueError("mim needs at least one step")
    Xb, yb, single = _as_batch(X, y)
    B = Xb.shape[0]
    alpha = np.float32(epsilon / steps)
    mom = np.zeros_like(Xb)
    alive = np.ones(B, dtype=bool)
    Xt = Xb.copy()
    for _ in range(steps):
        if not alive.any():
            break
        logits, _, backprop = model.forward_with_backprop(Xt)
        _, dlogits = _xent_per_sample(np.atleast_2d(logits), yb)
        g = backprop(dlogits)
        _check_finite(g)
        l1 = np.abs(g).reshape(B, -1).sum(axis=1)
        alive = alive & (l1 > 0)
        scale = np.where(l1 > 0, l1, 1.0).astype(np.float32)
        mom = mom + g / scale[:, None, None]
        step = alpha * np.sign(mom, dtype=np.float32)
        Xt = Xt + step * alive[:, None, None]
    return _unwrap(_outcomes(model, Xb, Xt, yb, queries=steps), single)


def pgd_l2(model, X, y, cfg, rng=None, seeds=None):
    """L2 PGD: unit-gradient steps, projection onto the L2 ball of radius
    delta * sqrt(3n) around X."""
    Xb, yb, single = _as_batch(X, y)
    B, n, _ = Xb.shape
    eps = float(cfg.epsilon(n))
    alpha = np.float32(eps / cfg.steps)
    alive = np.ones(B, dtype=bool)
    Xt = Xb.copy()
    for _ in range(cfg.steps):
        if not alive.any():
            break
        logits, _, backprop = model.forward_with_backprop(Xt)
        _, dlogits = _xent_per_sample(np.atleast_2d(logits), yb)
        g = backprop(dlogits)
        _check_finite(g)
        norm = np.linalg.norm(g.reshape(B, -1), axis=1)
        alive = alive & (norm > 0)
        scale = np.where(norm > 0, norm, 1.0).astype(np.float32)
        Xt = Xt + (alpha * alive[:, None, None]) * (g / scale[:, None, None])
        delta = Xt - Xb
        dnorm = np.linalg.norm(delta.reshape(B, -1), axis=1)
        factor = np.minimum(1.0, eps / np.maximum(dnorm, 1e-12)).astype(np.float32)
        Xt = Xb + delta * factor[:, None, None]
    out = _outcomes(model, Xb, Xt, yb, queries=cfg.steps)
    for o in out:
        o.extra["epsilon_l2"] = eps
    return _unwrap(out, single)


# ---------------------------------------------------------------------------
# targeted C&W with binary search
# ---------------------------------------------------------------------------

def _cw_class_term(logits, target):
    """(max_{i != t} Z_i - Z_t)^+ and its logits gradient."""
    masked = logits.copy()
    masked[target] = -np.inf
    other = int(np.argmax(masked))
    value = logits[other] - logits[target]
    dlogits = np.zeros_like(logits)
    if value > 0:
        dlogits[other] = 1.0
        dlogits[target] = -1.0
    return max(value, 0.0), dlogits, other


def cw_l2_targeted(model, X, target, cfg):
    """Targeted C&W-style attack, minimizing (max_i!=t Z_i - Z_t)^+ +
    lambda * ||X - X'||_2 with a 10-step binary search on lambda.

    A larger lambda weights the distance term harder (smaller perturbation),
    so the search raises the low end on success. Returns the successful
    example found at the largest lambda, or a failure outcome.
    """
    X0 = np.asarray(X, dtype=np.float32).copy()
    lo, hi = cfg.lam_lo, cfg.lam_hi
    best = None           # (lam, adversarial)
    queries = 0
    last_X = X0.copy()
    for _ in range(cfg.binary_steps):
        lam = 0.5 * (lo + hi)
        Xa = X0.copy()
        lam_best = None   # successful iterate with the smallest distance
        lam_best_dist = np.inf
        stale = 0
        prev_loss = np.inf
        for _ in range(cfg.iters):
            logits, _, backprop = model.forward_with_backprop(Xa)
            queries += 1
            logits1 = np.atleast_1d(np.squeeze(logits))
            cls, dlogits, _ = _cw_class_term(logits1, target)
            dist = float(np.linalg.norm(Xa - X0))
            loss = cls + lam * dist
            if int(np.argmax(logits1)) == target and dist < lam_best_dist:
                lam_best = Xa.copy()
                lam_best_dist = dist
            gX = backprop(dlogits.astype(np.float32))
            if dist > 0:
                gX = gX + np.float32(lam) * (Xa - X0) / np.float32(dist)
            _check_finite(gX)
            Xa = Xa - np.float32(cfg.step) * gX
            # plateau exit once we are inside the target region
            if lam_best is not None and loss >= prev_loss - 1e-7:
                stale += 1
                if stale >= 50:
                    break
            else:
                stale = 0
            prev_loss = loss
        last_X = Xa
        if lam_best is not None:
            best = (lam, lam_best)
            lo = lam
        else:
            hi = lam
    if best is None:
        linf, l2 = _norms(X0[None], last_X[None])
        return AttackOutcome(last_X, False, queries, float(linf[0]), float(l2[0]),
                             float("nan"), {"lam": None})
    lam, Xa = best
    linf, l2 = _norms(X0[None], Xa[None])
    logits = np.atleast_1d(np.squeeze(model.logits(Xa)))
    success = int(np.argmax(logits)) == target
    return AttackOutcome(Xa, success, queries, float(linf[0]), float(l2[0]),
                         float(logits[target]), {"lam": lam})


# ---------------------------------------------------------------------------
# adaptive attacks on the two defenses
# ---------------------------------------------------------------------------

def bpda_pipeline_attack(pipeline, X, y=None, cfg=None, target=None, rng=None, seeds=None):
    """Attack the denoise/upsample/classify pipeline end to end.

    The pipeline's backward pass treats the denoiser as deterministic
    masking, so gradients reach kept points and removed points get zero.
    Drives PGD for untargeted configs and the C&W loop when a target class
    is given. An attack iterate that empties the keep-mask is terminal.
    """
    try:
        if target is not None:
            cw_cfg = cfg if isinstance(cfg, CWConfig) else CWConfig(target=target)
            return cw_l2_targeted(pipeline, X, target, cw_cfg)
        return pgd_linf(pipeline, X, y, cfg, rng=rng, seeds=seeds)
    except AllPointsRemovedError:
        X0 = np.asarray(X, dtype=np.float32)
        return AttackOutcome(X0.copy(), False, 0, 0.0, 0.0, float("nan"),
                             {"all_points_removed": True})


def _gather_sums(aux):
    return np.abs(aux.centers).sum(axis=(1, 2))


def _adaptive_pgd(model, Xb, yb, cfg, beta, rng=None, seeds=None, gather_only=False):
    """PGD ascent on L_xent - beta * L_gather (or on L_gather alone)."""
    B, n, _ = Xb.shape
    if isinstance(cfg, L2AttackConfig):
        eps = float(cfg.epsilon(n))
        alpha = np.float32(eps / cfg.steps)
        linf_ball = False
        steps = cfg.steps
        start = None
    else:
        eps = cfg.epsilon
        alpha = np.float32(linf_step_size(cfg.epsilon, cfg.steps, cfg.step_rule))
        linf_ball = True
        steps = cfg.steps
        start = (_starts_from_seeds(Xb.shape, eps, rng, seeds)
                 if (cfg.random_start and cfg.step_rule == "pgd") else None)
    beta = np.asarray(beta, dtype=np.float32).reshape(-1)
    lo, hi = Xb - np.float32(eps), Xb + np.float32(eps)
    Xt = Xb.copy()
    if start is not None:
        Xt = np.clip(Xt + start, lo, hi)
    for _ in range(steps):
        logits, aux, backprop = model.forward_with_backprop(Xt)
        dcenters = np.sign(aux.centers).astype(np.float32)
        if gather_only:
            dlogits = np.zeros_like(np.atleast_2d(logits))
        else:
            _, dlogits = _xent_per_sample(np.atleast_2d(logits), yb)
            dcenters = -beta[:, None, None] * dcenters
        g = backprop(dlogits, dcenters)
        _check_finite(g)
        if linf_ball:
            Xt = np.clip(Xt + alpha * np.sign(g, dtype=np.float32), lo, hi)
        else:
            norm = np.linalg.norm(g.reshape(B, -1), axis=1)
            scale = np.where(norm > 0, norm, 1.0).astype(np.float32)
            Xt = Xt + alpha * (g / scale[:, None, None])
            delta = Xt - Xb
            dnorm = np.linalg.norm(delta.reshape(B, -1), axis=1)
            factor = np.minimum(1.0, eps / np.maximum(dnorm, 1e-12)).astype(np.float32)
            Xt = Xb + delta * factor[:, None, None]
    return Xt


def gather_adaptive_attack(model, X, y, cfg, objective="adaptive",
                           beta_range=(0.0, 10.0), beta_steps=10,
                           rng=None, seeds=None):
    """Adaptive attack on the gather-vector masking classifier.

    objective "adaptive" maximizes L_xent - beta * L_gather with a
    per-sample binary search for the smallest prediction-flipping beta;
    "gather_only" maximizes the gather loss alone (driving local features
    to be masked out); "xent" degenerates to plain PGD on cross-entropy.
    """
    Xb, yb, single = _as_batch(X, y)
    B = Xb.shape[0]
    if objective == "xent":
        Xadv = _adaptive_pgd(model, Xb, yb, cfg, np.zeros(B), rng=rng, seeds=seeds)
        return _unwrap(_outcomes(model, Xb, Xadv, yb, cfg.steps, {"objective": "xent"}), single)
    if objective == "gather_only":
        Xadv = _adaptive_pgd(model, Xb, yb, cfg, np.zeros(B), rng=rng, seeds=seeds,
                             gather_only=True)
        return _unwrap(_outcomes(model, Xb, Xadv, yb, cfg.steps,
                                 {"objective": "gather_only"}), single)
    if objective != "adaptive":
        raise ValueError(f"unknown objective {objective!r}")

    lo = np.full(B, beta_range[0])
    hi = np.full(B, beta_range[1])
    best_beta = np.full(B, np.nan)
    best_X = Xb.copy()
    found = np.zeros(B, dtype=bool)
    fallback_X = Xb.copy()
    fallback_loss = np.full(B, -np.inf)
    queries = 0
    for _ in range(beta_steps):
        beta = 0.5 * (lo + hi)
        Xadv = _adaptive_pgd(model, Xb, yb, cfg, beta, rng=rng, seeds=seeds)
        queries += cfg.steps
        logits = np.atleast_2d(model.logits(Xadv))
        losses, _ = _xent_per_sample(logits, yb)
        flipped = logits.argmax(axis=1) != yb
        # smaller beta next on success; the smallest flipping beta wins
        take = flipped & (~found | (beta < best_beta))
        best_beta[take] = beta[take]
        best_X[take] = Xadv[take]
        found |= flipped
        better = ~flipped & (losses > fallback_loss)
        fallback_loss[better] = losses[better]
        fallback_X[better] = Xadv[better]
        hi = np.where(flipped, beta, hi)
        lo = np.where(flipped, lo, beta)
    Xfinal = np.where(found[:, None, None], best_X, fallback_X)
    outs = _outcomes(model, Xb, Xfinal, yb, queries, {"objective": "adaptive"})
    for i, o in enumerate(outs):
        o.extra["beta"] = float(best_beta[i]) if found[i] else None
    return _unwrap(outs, single)


# ---------------------------------------------------------------------------
# black-box attacks
# ---------------------------------------------------------------------------

def _bb_losses(model, Xpert, y):
    logits = np.atleast_2d(model.logits(Xpert))
    losses, _ = _xent_per_sample(logits, np.full(len(logits), y, dtype=np.int64))
    return losses


def spsa_gradient_estimate(loss_fn, X, sample_size, smoothing, rng):
    """Antithetic Rademacher two-point estimate, averaged over sample pairs.

    loss_fn maps a stack of perturbed clouds (S, n, 3) to S loss values.
    """
    u = rng.integers(0, 2, size=(sample_size,) + X.shape).astype(np.float32) * 2 - 1
    d = float(smoothing)
    losses = loss_fn(np.concatenate([X[None] + d * u, X[None] - d * u]))
    diff = (losses[:sample_size] - losses[sample_size:]) / (2.0 * d)
    return (diff[:, None, None] * u).mean(axis=0), 2 * sample_size


def nes_gradient_estimate(loss_fn, X, sample_size, smoothing, rng):
    """Gaussian score-function estimate with antithetic pairs.

    Pairing (+u, -u) cancels the loss baseline, so the estimate converges
    to the true gradient as the smoothing radius shrinks.
    """
    u = rng.normal(size=(sample_size,) + X.shape).astype(np.float32)
    sig = float(smoothing)
    losses = loss_fn(np.concatenate([X[None] + sig * u, X[None] - sig * u]))
    diff = (losses[:sample_size] - losses[sample_size:]) / (2.0 * sig)
    return (diff[:, None, None] * u).mean(axis=0), 2 * sample_size


def score_blackbox_attack(model, X, y, cfg, rng=None):
    """SPSA or NES gradient estimation feeding the L-inf PGD step rule.

    Stops at the first misclassification or when the next estimation round
    would exceed the query budget (every model evaluation is one query).
    """
    if cfg.kind not in ("spsa", "nes"):
        raise ValueError("score_blackbox_attack handles spsa/nes only")
    if rng is None:
        rng = np.random.default_rng(0)
    X0 = np.asarray(X, dtype=np.float32).copy()
    y = int(y)
    estimator = spsa_gradient_estimate if cfg.kind == "spsa" else nes_gradient_estimate
    evals_per_step = 2 * cfg.sample_size
    planned = max(1, cfg.query_budget // (evals_per_step + 1))
    alpha = np.float32(linf_step_size(cfg.epsilon, planned, "pgd"))
    eps = np.float32(cfg.epsilon)
    lo, hi = X0 - eps, X0 + eps
    Xt = X0.copy()
    queries = 0
    success = False

    def loss_fn(Xpert):
        return _bb_losses(model, Xpert, y)

    while queries + evals_per_step + 1 <= cfg.query_budget:
        g, used = estimator(loss_fn, Xt, cfg.sample_size, cfg.smoothing, rng)
        queries += used
        Xt = np.clip(Xt + alpha * np.sign(g, dtype=np.float32), lo, hi)
        pred = int(np.argmax(model.logits(Xt)))
        queries += 1
        if pred != y:
            success = True
            break
    linf, l2 = _norms(X0[None], Xt[None])
    logits = np.atleast_1d(np.squeeze(model.logits(Xt)))
    losses, _ = _xent_per_sample(logits[None], np.array([y]))
    return AttackOutcome(Xt, success, queries, float(linf[0]), float(l2[0]),
                         float(losses[0]), {"kind": cfg.kind})


def evolution_attack(model, X, y, cfg, rng=None):
    """Decision-side evolutionary search inside the L-inf ball.

    A population of 32 perturbations (N(0,1) init, clipped to the ball) is
    scored by the loss; the top `keep` survive unchanged each generation —
    so the best fitness never decreases — and the rest are refilled by
    mutating survivors with fresh N(0,1) noise. The query budget counts
    generations, following the evaluation protocol this mirrors.
    """
    if cfg.kind != "evolution":
        raise ValueError("evolution_attack needs kind='evolution'")
    if rng is None:
        rng = np.random.default_rng(0)
    X0 = np.asarray(X, dtype=np.float32).copy()
    y = int(y)
    eps = np.float32(cfg.epsilon)
    pop_n = cfg.sample_size
    pert = np.clip(rng.normal(size=(pop_n,) + X0.shape).astype(np.float32), -eps, eps)
    queries = 0
    success = False
    best = None
    best_fit = -np.inf
    history = []
    for _ in range(cfg.query_budget):
        cand = X0[None] + pert
        logits = np.atleast_2d(model.logits(cand))
        queries += pop_n
        fits, _ = _xent_per_sample(logits, np.full(pop_n, y, dtype=np.int64))
        order = np.argsort(-fits, kind="stable")
        history.append(float(fits[order[0]]))
        if fits[order[0]] > best_fit:
            best_fit = float(fits[order[0]])
            best = cand[order[0]].copy()
        preds = logits.argmax(axis=1)
        wrong = np.flatnonzero(preds != y)
        if wrong.size:
            best = cand[wrong[np.argmax(fits[wrong])]].copy()
            success = True
            break
        elite = pert[order[: cfg.keep]]
        children = []
        for i in range(pop_n - cfg.keep):
            parent = elite[i % cfg.keep]
            children.append(np.clip(
                parent + rng.normal(size=X0.shape).astype(np.float32), -eps, eps))
        pert = np.concatenate([elite, np.stack(children)])
    Xadv = best if best is not None else X0.copy()
    linf, l2 = _norms(X0[None], Xadv[None])
    return AttackOutcome(Xadv, success, queries, float(linf[0]), float(l2[0]),
                         best_fit, {"kind": "evolution", "fitness_history": history})
