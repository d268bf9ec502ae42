import numpy as np
import pytest

from pcrobust import defenses as df
from pcrobust.backbones import Classifier, init_model, make_spec
from pcrobust.errors import AllPointsRemovedError, TooFewPointsError
from pcrobust.numcore import finite_diff_grad, rel_error


def brute_force_sor(X, k, alpha):
    """Independent O(n^2) reference: full sort per point, no partitioning."""
    n = len(X)
    scores = np.empty(n)
    for i in range(n):
        d = np.sqrt(((X - X[i]) ** 2).sum(axis=1))
        d = np.delete(d, i)
        scores[i] = np.sort(d)[:k].mean()
    mu, sigma = scores.mean(), scores.std()
    if sigma == 0.0:
        return np.ones(n, dtype=bool)
    return scores < mu + alpha * sigma


class TestSOR:
    def test_collinear_worked_example(self):
        # points at x = 0, 1, 3 with k=1: scores [1, 1, 2]
        X = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]], dtype=np.float32)
        kept, mask = df.sor_denoise(X, df.SORConfig(k=1, alpha=1.1))
        np.testing.assert_array_equal(mask.keep, [True, True, False])
        np.testing.assert_array_equal(kept, X[:2])

    def test_identical_points_all_kept(self):
        X = np.ones((5, 3), dtype=np.float32)
        kept, mask = df.sor_denoise(X, df.SORConfig(k=2, alpha=1.1))
        assert mask.kept == 5

    def test_too_few_points(self):
        with pytest.raises(TooFewPointsError):
            df.sor_denoise(np.zeros((2, 3), dtype=np.float32), df.SORConfig(k=2))

    def test_output_is_subset_with_original_coordinates(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(40, 3)).astype(np.float32)
        kept, mask = df.sor_denoise(X, df.SORConfig())
        np.testing.assert_array_equal(kept, X[mask.keep])

    @pytest.mark.parametrize("k,alpha", [(1, 0.5), (2, 1.1), (5, 2.0)])
    def test_matches_brute_force(self, k, alpha):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(k + 1, 64))
            X = rng.uniform(-1, 1, size=(n, 3)).astype(np.float32)
            _, mask = df.sor_denoise(X, df.SORConfig(k=k, alpha=alpha))
            np.testing.assert_array_equal(mask.keep, brute_force_sor(X, k, alpha))

    def test_keep_set_permutation_invariant(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-1, 1, size=(30, 3)).astype(np.float32)
        _, mask1 = df.sor_denoise(X, df.SORConfig())
        p = rng.permutation(30)
        _, mask2 = df.sor_denoise(X[p], df.SORConfig())
        kept1 = {tuple(v) for v in X[mask1.keep]}
        kept2 = {tuple(v) for v in X[p][mask2.keep]}
        assert kept1 == kept2


class TestUpsample:
    def test_identity_when_count_matches(self):
        X = np.random.default_rng(3).normal(size=(8, 3)).astype(np.float32)
        out, src = df.upsample(X, "identity", 8)
        np.testing.assert_array_equal(out, X)
        np.testing.assert_array_equal(src, np.arange(8))

    def test_identity_cyclic_repeat(self):
        X = np.arange(9, dtype=np.float32).reshape(3, 3)
        out, src = df.upsample(X, "identity", 7)
        np.testing.assert_array_equal(src, [0, 1, 2, 0, 1, 2, 0])
        np.testing.assert_array_equal(out, X[src])

    def test_duplicate_jitter_reaches_target(self):
        X = np.random.default_rng(4).normal(size=(5, 3)).astype(np.float32)
        out, src = df.upsample(X, "duplicate_jitter", 2048, np.random.default_rng(0))
        assert out.shape == (2048, 3)
        np.testing.assert_array_equal(out[:5], X)          # originals unchanged
        assert np.abs(out[5:] - X[src[5:]]).max() < 0.05   # jitter is small

    def test_duplicate_jitter_backward_sums_to_source(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(4, 3)).astype(np.float64)
        dout = rng.normal(size=(10, 3))

        def run(Xv):
            out, _ = df.upsample(Xv, "duplicate_jitter", 10, np.random.default_rng(9))
            return float((out * dout).sum())

        _, src = df.upsample(X, "duplicate_jitter", 10, np.random.default_rng(9))
        dX = np.zeros_like(X)
        np.add.at(dX, src, dout)
        assert rel_error(dX, finite_diff_grad(run, X)) < 1e-3


@pytest.fixture(scope="module")
def tiny_classifier():
    spec = make_spec("pointnet", "max", n_classes=3, n_train=16)
    return Classifier(spec, init_model(spec, np.random.default_rng(6)))


class TestPipeline:
    def test_keep_all_matches_f_of_p(self, tiny_classifier):
        rng = np.random.default_rng(7)
        X = rng.uniform(-1, 1, size=(20, 3)).astype(np.float32)
        spec = df.PipelineSpec(df.SORConfig(k=2, alpha=1e9), upsampler="identity",
                               target_count=40)
        pipe = df.DefendedPipeline(tiny_classifier, spec)
        logits, mask = pipe.classify(X)
        assert mask.kept == 20
        up, _ = df.upsample(X, "identity", 40)
        np.testing.assert_array_equal(logits, tiny_classifier.logits(up))

    def test_default_target_is_2048(self):
        assert df.PipelineSpec(df.SORConfig()).target_for(1024) == 2048

    def test_ratio_used_when_target_unset(self):
        spec = df.PipelineSpec(df.SORConfig(), target_count=None, ratio=2)
        assert spec.target_for(24) == 48

    def test_all_points_removed(self, tiny_classifier):
        rng = np.random.default_rng(8)
        X = rng.uniform(-1, 1, size=(12, 3)).astype(np.float32)
        spec = df.PipelineSpec(df.SORConfig(k=2, alpha=-100.0), target_count=24)
        pipe = df.DefendedPipeline(tiny_classifier, spec)
        with pytest.raises(AllPointsRemovedError):
            pipe.classify(X)

    def test_removed_points_get_exactly_zero_gradient(self, tiny_classifier):
        rng = np.random.default_rng(9)
        X = rng.uniform(-0.3, 0.3, size=(16, 3)).astype(np.float32)
        X[3] = [5.0, 5.0, 5.0]      # blatant outlier
        spec = df.PipelineSpec(df.SORConfig(k=2, alpha=1.1), target_count=32)
        pipe = df.DefendedPipeline(tiny_classifier, spec)
        logits, mask, backprop = pipe.forward_with_backprop(X)
        assert not mask.keep[3]
        dX = backprop(np.ones_like(logits))
        np.testing.assert_array_equal(dX[3], 0.0)
        assert np.abs(dX[mask.keep]).sum() > 0

    def test_jitter_is_deterministic_per_pipeline(self, tiny_classifier):
        rng = np.random.default_rng(10)
        X = rng.uniform(-1, 1, size=(16, 3)).astype(np.float32)
        spec = df.PipelineSpec(df.SORConfig(), target_count=32, jitter_seed=4)
        pipe = df.DefendedPipeline(tiny_classifier, spec)
        l1, _ = pipe.classify(X)
        l2, _ = pipe.classify(X)
        np.testing.assert_array_equal(l1, l2)

    def test_bpda_grad_matches_fd_through_pipeline(self):
        # with a keep-all threshold and identity upsampler the BPDA gradient
        # is the true pipeline gradient
        spec64 = make_spec("pointnet", "max", n_classes=3, n_train=16)
        clf = Classifier(spec64, init_model(spec64, np.random.default_rng(6), np.float64))
        rng = np.random.default_rng(11)
        X = rng.uniform(-1, 1, size=(10, 3))
        spec = df.PipelineSpec(df.SORConfig(k=2, alpha=1e9), upsampler="identity",
                               target_count=20)
        pipe = df.DefendedPipeline(clf, spec)
        loss, dX = pipe.xent_and_input_grad(X, 1)

        def run(Xv):
            return pipe.xent_and_input_grad(Xv, 1)[0]
        fd = finite_diff_grad(run, X, h=1e-5)
        assert rel_error(dX, fd) < 1e-3


class TestGvg:
    def test_gvg_exposes_gather_outputs(self):
        spec = make_spec("grouped", "max", n_classes=3, n_train=16,
                         n_centroids=8, ball_cap=4, ball_radius=0.8)
        model = Classifier(spec, init_model(spec, np.random.default_rng(12)))
        X = np.random.default_rng(13).uniform(-1, 1, size=(16, 3)).astype(np.float32)
        logits, outputs = df.gvg_classify(model, X)
        assert logits.shape == (3,)
        assert outputs.mask.shape == (1, 8)

    def test_gvg_rejects_flat_models(self, tiny_classifier):
        with pytest.raises(ValueError):
            df.gvg_classify(tiny_classifier, np.zeros((16, 3), dtype=np.float32))
