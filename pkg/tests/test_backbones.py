import numpy as np
import pytest

from pcrobust import backbones as bb
from pcrobust.errors import (
    LabelOutOfRangeError,
    StaleCacheError,
    TooFewPointsError,
    TooManyCentroidsError,
)
from pcrobust.params import named_arrays, trainable_arrays


def flat_spec(kind, pool="max", n_train=16):
    return bb.make_spec(kind, pool, n_classes=5, n_train=n_train)


def grouped_spec(**kw):
    defaults = dict(n_classes=5, n_train=16, n_centroids=8, ball_cap=4,
                    ball_radius=0.8, mask_radius=0.5)
    defaults.update(kw)
    return bb.make_spec("grouped", "max", **defaults)


class TestInit:
    def test_deterministic_under_seed(self):
        spec = flat_spec("pointnet")
        a = bb.init_model(spec, np.random.default_rng(3))
        b = bb.init_model(spec, np.random.default_rng(3))
        for (ka, va), (kb, vb) in zip(named_arrays(a).items(), named_arrays(b).items()):
            assert ka == kb
            np.testing.assert_array_equal(va, vb)

    def test_pointnet_tensor_order_and_widths(self):
        spec = flat_spec("pointnet")
        params = bb.init_model(spec, np.random.default_rng(0))
        names = list(named_arrays(params))
        # equivariant layers first, then pool, then the FC head
        assert names[0] == "phi.0.fc.weight"
        phi_shapes = [params.phi[i].fc.weight.shape for i in range(4)]
        assert phi_shapes == [(3, 64), (64, 64), (64, 128), (128, 1024)]
        sigma_shapes = [layer.fc.weight.shape for layer in params.sigma]
        assert sigma_shapes == [(1024, 512), (512, 256), (256, 5)]
        assert [n for n in names if n.startswith("sigma")] == names[-len(
            [n for n in names if n.startswith("sigma")]):]

    def test_deepsets_widths_and_no_second_branch(self):
        params = bb.init_model(flat_spec("deepsets"), np.random.default_rng(1))
        assert [p.fc.weight.shape for p in params.phi] == [(3, 256), (256, 256)]
        assert all(p.fc2 is None for p in params.phi)
        assert [s.fc.weight.shape for s in params.sigma] == [(256, 256), (256, 5)]

    def test_dss_has_two_affine_blocks_per_phi(self):
        params = bb.init_model(flat_spec("dss"), np.random.default_rng(2))
        assert all(p.fc2 is not None for p in params.phi)
        assert [p.fc.weight.shape for p in params.phi] == [(3, 64), (64, 256), (256, 256)]
        assert [p.fc2.weight.shape for p in params.phi] == [(3, 64), (64, 256), (256, 256)]

    def test_bn_running_stats_start_at_zero_one(self):
        params = bb.init_model(flat_spec("pointnet"), np.random.default_rng(4))
        arrays = named_arrays(params)
        for name, arr in arrays.items():
            if name.endswith("running_mean"):
                assert np.all(arr == 0)
            if name.endswith("running_var"):
                assert np.all(arr == 1)

    def test_softpool_forces_narrow_last_phi(self):
        for kind, expect in (("pointnet", 1024), ("deepsets", 256), ("dss", 256)):
            spec = flat_spec(kind, pool="softpool")
            params = bb.init_model(spec, np.random.default_rng(5))
            assert params.phi[-1].fc.weight.shape[1] == 8
            assert params.sigma[0].fc.weight.shape[0] == 256
            plain = flat_spec(kind)
            assert plain.sigma_widths()[0] == expect


class TestXent:
    def test_uniform_logits(self):
        loss, d = bb.xent_loss(np.array([0.0, 0.0]), 0)
        assert abs(loss - np.log(2)) < 1e-7

    def test_logsumexp_stability(self):
        loss, d = bb.xent_loss(np.array([1000.0, 0.0]), 0)
        assert loss < 1e-6
        assert np.all(np.isfinite(d))

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRangeError):
            bb.xent_loss(np.zeros((2, 3)), np.array([0, 3]))

    def test_gradient_is_softmax_minus_onehot_over_batch(self):
        logits = np.array([[1.0, 2.0], [0.5, -0.5]])
        _, d = bb.xent_loss(logits, np.array([0, 1]))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = z / z.sum(axis=1, keepdims=True)
        p[0, 0] -= 1
        p[1, 1] -= 1
        np.testing.assert_allclose(d, p / 2, rtol=1e-6)


class TestFlatForward:
    @pytest.mark.parametrize("kind", ["pointnet", "deepsets", "dss"])
    def test_permutation_invariant_logits(self, kind):
        rng = np.random.default_rng(6)
        spec = flat_spec(kind)
        params = bb.init_model(spec, rng)
        X = rng.uniform(-1, 1, size=(12, 3)).astype(np.float32)
        l1, _ = bb.forward(spec, params, X)
        l2, _ = bb.forward(spec, params, rng.permutation(X, axis=0))
        assert np.abs(l1 - l2).max() <= 1e-4

    def test_single_point_cloud_finite(self):
        spec = flat_spec("pointnet")
        params = bb.init_model(spec, np.random.default_rng(7))
        X = np.array([[0.3, -0.2, 0.9]], dtype=np.float32)
        logits, cache = bb.forward(spec, params, X)
        assert logits.shape == (5,)
        assert np.all(np.isfinite(logits))

    def test_zero_dlogits_zero_grads(self):
        spec = flat_spec("deepsets")
        params = bb.init_model(spec, np.random.default_rng(8))
        X = np.random.default_rng(9).uniform(-1, 1, size=(2, 10, 3)).astype(np.float32)
        logits, cache = bb.forward(spec, params, X)
        dX, grads = bb.backward(spec, params, cache, np.zeros_like(logits))
        assert np.all(dX == 0)
        assert all(np.all(g == 0) for g in grads.values())

    def test_max_pool_input_grad_hits_argmax_points_only(self):
        spec = flat_spec("pointnet")
        params = bb.init_model(spec, np.random.default_rng(10))
        X = np.random.default_rng(11).uniform(-1, 1, size=(1, 9, 3)).astype(np.float32)
        logits, cache = bb.forward(spec, params, X)
        dX, _ = bb.backward(spec, params, cache, np.ones_like(logits))
        argmax_rows = set(cache["pool"][3][0].tolist())   # max-pool row indices
        nonzero_rows = set(np.flatnonzero(np.abs(dX[0]).sum(axis=1)).tolist())
        assert nonzero_rows <= argmax_rows

    def test_stale_cache_rejected(self):
        spec = flat_spec("pointnet")
        other = flat_spec("pointnet")
        params = bb.init_model(spec, np.random.default_rng(12))
        X = np.zeros((1, 4, 3), dtype=np.float32)
        logits, cache = bb.forward(spec, params, X)
        with pytest.raises(StaleCacheError):
            bb.backward(other, params, cache, np.zeros_like(logits))

    def test_deepsets_translation_cancellation(self):
        # adding a constant row vector leaves F - colmax(F) unchanged
        rng = np.random.default_rng(13)
        F = rng.normal(size=(8, 6))
        c = rng.normal(size=6)
        a = F - F.max(axis=0)
        b = (F + c) - (F + c).max(axis=0)
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestFPS:
    def test_all_points_when_m_equals_n(self):
        pts = np.random.default_rng(14).normal(size=(6, 3))
        sel = bb.fps(pts, 6)
        assert sorted(sel.tolist()) == list(range(6))

    def test_two_points_tie_goes_lexicographic(self):
        pts = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        assert bb.fps(pts, 1)[0] == 1      # (-1,0,0) < (1,0,0)

    def test_farthest_from_centroid_starts(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
        assert bb.fps(pts, 1)[0] == 2

    def test_permutation_invariant_coordinate_set(self):
        rng = np.random.default_rng(15)
        pts = rng.normal(size=(20, 3))
        sel1 = bb.fps(pts, 7)
        p = rng.permutation(20)
        sel2 = bb.fps(pts[p], 7)
        set1 = {tuple(np.round(pts[i], 9)) for i in sel1}
        set2 = {tuple(np.round(pts[p][i], 9)) for i in sel2}
        assert set1 == set2

    def test_too_many_centroids(self):
        with pytest.raises(TooManyCentroidsError):
            bb.fps(np.zeros((3, 3)), 4)


class TestGrouped:
    def test_centers_identity_and_mask_rule(self):
        rng = np.random.default_rng(16)
        spec = grouped_spec()
        params = bb.init_model(spec, rng)
        X = rng.uniform(-1, 1, size=(16, 3)).astype(np.float32)
        logits, outputs, _ = bb.grouped_forward(spec, params, X)
        centroids = X[outputs.centroid_idx[0]]
        np.testing.assert_array_equal(outputs.centers[0],
                                      centroids + outputs.vectors[0])
        expect_mask = (np.linalg.norm(outputs.centers[0], axis=1)
                       < spec.mask_radius).astype(np.float32)
        np.testing.assert_array_equal(outputs.mask[0], expect_mask)

    def test_zero_head_masks_by_centroid_norm(self):
        # zero gather head -> v=0 -> c equals the centroid coordinate
        rng = np.random.default_rng(17)
        spec = grouped_spec(mask_radius=0.08)
        params = bb.init_model(spec, rng)
        for layer in params.gather:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        X = np.zeros((16, 3), dtype=np.float32)
        X[:, 0] = 0.1          # every candidate centroid sits at norm 0.1 >= 0.08
        X[:, 1] = np.linspace(-1, 1, 16) * 1e-3
        _, outputs, _ = bb.grouped_forward(spec, params, X)
        assert np.all(outputs.mask == 0)
        np.testing.assert_array_equal(outputs.masked_features, 0.0)

    def test_all_masked_still_classifies(self):
        rng = np.random.default_rng(18)
        spec = grouped_spec(mask_radius=1e-9)
        params = bb.init_model(spec, rng)
        X = rng.uniform(-1, 1, size=(16, 3)).astype(np.float32)
        logits, outputs, _ = bb.grouped_forward(spec, params, X)
        assert np.all(outputs.mask == 0)
        assert np.all(np.isfinite(logits))

    def test_huge_radius_equals_unmasked_model(self):
        rng = np.random.default_rng(19)
        spec = grouped_spec(mask_radius=1e9)
        params = bb.init_model(spec, rng)
        X = rng.uniform(-1, 1, size=(16, 3)).astype(np.float32)
        logits, outputs, _ = bb.grouped_forward(spec, params, X)
        assert np.all(outputs.mask == 1)
        np.testing.assert_array_equal(outputs.masked_features, outputs.local_features)

    def test_too_few_points(self):
        spec = grouped_spec(n_centroids=8)
        params = bb.init_model(spec, np.random.default_rng(20))
        with pytest.raises(TooFewPointsError):
            bb.grouped_forward(spec, params, np.zeros((4, 3), dtype=np.float32))

    def test_permutation_invariant_logits(self):
        rng = np.random.default_rng(21)
        spec = grouped_spec()
        params = bb.init_model(spec, rng)
        X = rng.uniform(-1, 1, size=(16, 3)).astype(np.float32)
        l1, _, _ = bb.grouped_forward(spec, params, X)
        l2, _, _ = bb.grouped_forward(spec, params, rng.permutation(X, axis=0))
        assert np.abs(l1 - l2).max() <= 1e-4


class TestGatherLoss:
    def test_zero_centers(self):
        out = bb.GatherOutputs(None, None, np.zeros((1, 4, 3)), None, None, None)
        value, d = bb.gather_loss(out)
        assert value == 0.0
        np.testing.assert_array_equal(d, 0.0)

    def test_single_center_l1(self):
        c = np.zeros((1, 1, 3))
        c[0, 0] = [0.1, -0.2, 0.0]
        value, d = bb.gather_loss(bb.GatherOutputs(None, None, c, None, None, None))
        assert abs(value - 0.3) < 1e-12
        np.testing.assert_array_equal(d[0, 0], [1.0, -1.0, 0.0])

    def test_subgradient_zero_at_origin(self):
        c = np.zeros((1, 2, 3))
        _, d = bb.gather_loss(bb.GatherOutputs(None, None, c, None, None, None))
        np.testing.assert_array_equal(d, 0.0)
