"""The two defenses under test: an outlier-removal + upsample classification
pipeline, and the gather-vector masking classifier.

Both are exposed so attacks can target them adaptively: the pipeline
reports its keep-mask and offers a backward pass that treats the denoiser
as deterministic masking; the masking classifier surfaces its gather
outputs so an attack can penalize them.
"""

from dataclasses import dataclass

import numpy as np

from .backbones import forward, backward, xent_loss
from .errors import AllPointsRemovedError, TooFewPointsError
from .validation import check_points


@dataclass
class SORConfig:
    k: int = 2
    alpha: float = 1.1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class KeepMask:
    keep: np.ndarray  # (n,) bool

    @property
    def kept(self):
        return int(self.keep.sum())

    def indices(self):
        return np.flatnonzero(self.keep)


def sor_denoise(X, cfg):
    """Statistical outlier removal.

    Each point's score is its mean distance to its k nearest neighbors
    (never itself); points at score >= mean + alpha * std of all scores are
    dropped. All-equal scores (std exactly 0) keep everything, since the
    strict inequality would otherwise delete the whole cloud.
    """
    X = check_points(X)
    n = X.shape[0]
    if n <= cfg.k:
        raise TooFewPointsError(f"SOR with k={cfg.k} needs more than {cfg.k} points, got {n}")
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = np.partition(d2, cfg.k - 1, axis=1)[:, :cfg.k]
    scores = np.sqrt(nearest).mean(axis=1)
    mu = scores.mean()
    sigma = scores.std()
    if sigma == 0.0:
        keep = np.ones(n, dtype=bool)
    else:
        keep = scores < mu + cfg.alpha * sigma
    return X[keep], KeepMask(keep)


def upsample(X, kind, target, rng=None):
    """Grow (or trim) a cloud to `target` points.

    "identity" cycles through the input points unchanged;
    "duplicate_jitter" keeps the originals and appends jittered duplicates
    (sigma 0.005). Returns (X_up, src_idx) where src_idx maps each output
    row to the input row it came from, so a backward pass can sum
    duplicate gradients onto their source.
    """
    X = check_points(X)
    n = X.shape[0]
    src = np.arange(target) % n
    out = X[src]
    if kind == "duplicate_jitter":
        if target > n:
            if rng is None:
                rng = np.random.default_rng(0)
            jitter = rng.normal(scale=0.005, size=(target - n, 3)).astype(X.dtype)
            out[n:] += jitter
    elif kind != "identity":
        raise ValueError(f"unknown upsampler {kind!r}")
    return out, src


@dataclass
class PipelineSpec:
    sor: SORConfig
    upsampler: str = "duplicate_jitter"   # "identity" or "duplicate_jitter"
    target_count: int = 2048
    ratio: int = 2
    jitter_seed: int = 0

    def target_for(self, n_in):
        if self.target_count is not None:
            return self.target_count
        return self.ratio * n_in


class DefendedPipeline:
    """Denoise, upsample, classify — with the keep-mask exposed.

    The forward path is the true pipeline. The backward path treats the
    denoiser as a deterministic 0/1 mask: gradients reach kept points
    exactly, removed points get exactly zero, and the jitter offsets are
    constants. Jitter offsets are drawn once per output slot from
    jitter_seed so the pipeline is a pure function of its input.
    """

    def __init__(self, classifier, spec):
        self.classifier = classifier
        self.spec = spec
        self._jitter_cache = {}

    def _offsets(self, target):
        if target not in self._jitter_cache:
            rng = np.random.default_rng(self.spec.jitter_seed)
            self._jitter_cache[target] = rng.normal(
                scale=0.005, size=(target, 3)).astype(np.float32)
        return self._jitter_cache[target]

    def _transform(self, X):
        kept, mask = sor_denoise(X, self.spec.sor)
        if kept.shape[0] == 0:
            raise AllPointsRemovedError("denoiser removed every point")
        target = self.spec.target_for(X.shape[0])
        n_kept = kept.shape[0]
        src = np.arange(target) % n_kept
        out = kept[src].astype(X.dtype)
        if self.spec.upsampler == "duplicate_jitter" and target > n_kept:
            out[n_kept:] += self._offsets(target)[n_kept:].astype(X.dtype)
        return out, src, mask

    def classify(self, X):
        """(logits, KeepMask) of the full f(p(g(X))) composition."""
        up, _, mask = self._transform(X)
        return self.classifier.logits(up), mask

    def logits(self, X):
        X = np.asarray(X)
        if X.ndim == 3:
            return np.stack([self.classify(x)[0] for x in X])
        return self.classify(X)[0]

    def predict(self, X):
        out = self.logits(X)
        return int(np.argmax(out)) if out.ndim == 1 else np.argmax(out, axis=1)

    def forward_with_backprop(self, X):
        """BPDA surface: (logits, KeepMask, backprop).

        backprop(dlogits) routes classifier input gradients through the
        duplicate map onto kept points and returns zeros for removed ones.
        Batched input runs the pipeline per sample; kept-set sizes may
        differ between samples.
        """
        X = np.asarray(X)
        if X.ndim == 3:
            parts = [self.forward_with_backprop(x) for x in X]
            logits = np.stack([p[0] for p in parts])
            masks = [p[1] for p in parts]

            def batch_backprop(dlogits, dcenters=None):
                return np.stack([p[2](dlogits[i]) for i, p in enumerate(parts)])

            return logits, masks, batch_backprop

        up, src, mask = self._transform(X)
        sub_logits, cache = forward(self.classifier.spec, self.classifier.params, up)

        def backprop(dlogits, dcenters=None):
            dup, _ = backward(self.classifier.spec, self.classifier.params, cache, dlogits)
            keep_idx = mask.indices()
            dkept = np.zeros((keep_idx.size, 3), dtype=dup.dtype)
            np.add.at(dkept, src, dup)
            dX = np.zeros_like(X, dtype=dup.dtype)
            dX[keep_idx] = dkept
            return dX

        return sub_logits, mask, backprop

    def xent_and_input_grad(self, X, y):
        logits, _, backprop = self.forward_with_backprop(X)
        loss, dlogits = xent_loss(logits, y)
        return loss, backprop(dlogits)


def pipeline_classify(classifier, pipeline_spec, X):
    """One-shot functional form of DefendedPipeline.classify."""
    return DefendedPipeline(classifier, pipeline_spec).classify(X)


def gvg_classify(classifier, X):
    """Masking classifier: logits plus the gather outputs attacks target."""
    from .backbones import grouped_forward
    if classifier.spec.kind != "grouped":
        raise ValueError("gvg_classify needs a grouped backbone")
    logits, outputs, _ = grouped_forward(classifier.spec, classifier.params, X)
    return logits, outputs
