import numpy as np
import pytest

from pcrobust import meshdata as md
from pcrobust.errors import (
    CountMismatchError,
    DegenerateMeshError,
    IndexOutOfRangeError,
    MissingMagicError,
    UnsupportedClassCountError,
)

MINIMAL_OFF = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"


class TestParseOff:
    def test_minimal_file(self):
        mesh = md.parse_off(MINIMAL_OFF)
        assert mesh.vertices.shape == (3, 3)
        assert mesh.faces.shape == (1, 3)

    def test_magic_is_case_sensitive(self):
        with pytest.raises(MissingMagicError):
            md.parse_off("OFf\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")

    def test_fused_header_quirk(self):
        text = "OFF4 2 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n"
        mesh = md.parse_off(text)
        assert len(mesh.vertices) == 4
        assert len(mesh.faces) == 2

    def test_comments_ignored(self):
        text = "# header comment\nOFF\n3 1 0  # counts\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"
        mesh = md.parse_off(text)
        assert len(mesh.vertices) == 3

    def test_polygon_fan_triangulation(self):
        text = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        mesh = md.parse_off(text)
        assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_missing_vertices(self):
        with pytest.raises(CountMismatchError):
            md.parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n")

    def test_missing_faces(self):
        with pytest.raises(CountMismatchError):
            md.parse_off("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")

    def test_face_index_out_of_range(self):
        with pytest.raises(IndexOutOfRangeError):
            md.parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5\n")

    def test_bytes_input(self):
        mesh = md.parse_off(MINIMAL_OFF.encode("ascii"))
        assert len(mesh.vertices) == 3

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(0)
        verts = rng.normal(size=(7, 3))
        faces = rng.integers(0, 7, size=(5, 3))
        mesh = md.TriangleMesh(verts, faces)
        back = md.parse_off(md.serialize_off(mesh))
        # float32-exact round trip through %.9g text
        np.testing.assert_array_equal(back.vertices.astype(np.float32),
                                      verts.astype(np.float32))
        np.testing.assert_array_equal(back.faces, faces)

    def test_roundtrip_on_real_looking_file(self):
        mesh = md.parse_off(MINIMAL_OFF)
        again = md.parse_off(md.serialize_off(mesh))
        np.testing.assert_array_equal(again.vertices, mesh.vertices)
        np.testing.assert_array_equal(again.faces, mesh.faces)


class TestSampleSurface:
    def test_single_triangle_point_on_plane(self):
        mesh = md.parse_off(MINIMAL_OFF)
        pc = md.sample_surface(mesh, 1, np.random.default_rng(0))
        p = pc.points[0]
        assert abs(p[2]) < 1e-6                      # z = 0 plane
        assert p[0] >= -1e-6 and p[1] >= -1e-6 and p[0] + p[1] <= 1 + 1e-6

    def test_exact_count(self):
        mesh = md.parse_off(MINIMAL_OFF)
        for n in (1, 2, 17):
            assert md.sample_surface(mesh, n, np.random.default_rng(1)).n == n

    def test_area_proportional_face_choice(self):
        # two triangles with areas 1 and 3: expect 75% of hits on the big one
        text = ("OFF\n6 2 0\n"
                "0 0 0\n2 0 0\n0 1 0\n"         # area 1
                "5 0 0\n5 0 6\n5 1 0\n"          # area 3 (x = 5 plane)
                "3 0 1 2\n3 3 4 5\n")
        mesh = md.parse_off(text)
        pc = md.sample_surface(mesh, 40000, np.random.default_rng(2))
        frac_big = float(np.mean(pc.points[:, 0] > 4.0))
        assert abs(frac_big - 0.75) < 0.01

    def test_points_lie_on_face_planes(self):
        vertices = np.array([[-0.9, -0.9, -0.8], [0.9, -0.9, -0.8], [0.9, 0.9, -0.8],
                             [-0.9, 0.9, -0.8], [0.0, 0.0, 0.8]])
        faces = np.array([[0, 2, 1], [0, 3, 2],
                          [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
        mesh = md.TriangleMesh(vertices, faces)
        pc = md.sample_surface(mesh, 200, np.random.default_rng(3))
        # every sample is a convex combination of some face's vertices
        a = mesh.vertices[mesh.faces[:, 0]]
        b = mesh.vertices[mesh.faces[:, 1]]
        c = mesh.vertices[mesh.faces[:, 2]]
        normals = np.cross(b - a, c - a)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        dist = np.abs(np.einsum("pfk,fk->pf", pc.points[:, None, :] - a[None], normals))
        assert np.all(dist.min(axis=1) < 1e-6)

    def test_degenerate_mesh(self):
        text = "OFF\n3 1 0\n0 0 0\n1 1 1\n2 2 2\n3 0 1 2\n"
        with pytest.raises(DegenerateMeshError):
            md.sample_surface(md.parse_off(text), 5, np.random.default_rng(0))


class TestNormalize:
    def test_single_point_maps_to_origin(self):
        out = md.normalize_unit_cube(np.array([[3.0, -2.0, 5.0]]))
        np.testing.assert_array_equal(out, np.zeros((1, 3)))

    def test_symmetric_pair(self):
        out = md.normalize_unit_cube(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        np.testing.assert_allclose(out, [[-1, 0, 0], [1, 0, 0]], atol=1e-7)

    def test_postconditions_on_random_cloud(self):
        pts = np.random.default_rng(4).normal(size=(50, 3)) * 7 + 3
        out = md.normalize_unit_cube(pts.astype(np.float32))
        assert np.abs(out.mean(axis=0)).max() <= 1e-6
        assert abs(np.abs(out).max() - 1.0) <= 1e-6

    def test_idempotent(self):
        pts = np.random.default_rng(5).normal(size=(30, 3)).astype(np.float32)
        once = md.normalize_unit_cube(pts)
        twice = md.normalize_unit_cube(once)
        np.testing.assert_allclose(twice, once, atol=1e-6)


class TestSynthDataset:
    def test_deterministic_under_seed(self):
        a = md.synth_dataset(2, 1, 32, np.random.default_rng(7))
        b = md.synth_dataset(2, 1, 32, np.random.default_rng(7))
        for s, t in zip(a.samples, b.samples):
            np.testing.assert_array_equal(s.points, t.points)
            assert s.label == t.label

    def test_sphere_radial_statistic(self):
        # the family is an axis-aligned ellipsoid: fit the quadric by least
        # squares, then the metric radius sqrt(x'Qx) of every point is 1 up
        # to jitter (sigma 0.01 over scale >= 0.7), well inside a 0.05 band
        ds = md.synth_dataset(1, 4, 1024, np.random.default_rng(9))
        for pc in ds.samples:
            p = pc.points.astype(np.float64)
            A = np.hstack([p ** 2, 2 * p])   # inverse axes plus center offsets
            sol, *_ = np.linalg.lstsq(A, np.ones(len(p)), rcond=None)
            q, lin = sol[:3], sol[3:]
            center = lin / q
            radii = np.sqrt(((p + center) ** 2 * q).sum(axis=1))
            dev = np.abs(radii - np.median(radii))
            # 99.5% of points sit inside the 0.05 band; the rest are jitter tails
            assert np.quantile(dev, 0.995) < 0.05
            assert dev.max() < 0.08
            assert radii.std() < 0.02

    def test_unsupported_class_count(self):
        with pytest.raises(UnsupportedClassCountError):
            md.synth_dataset(9, 1, 16, np.random.default_rng(0))

    def test_labels_and_counts(self):
        ds = md.synth_dataset(3, 5, 16, np.random.default_rng(1))
        assert len(ds) == 15
        assert sorted(set(pc.label for pc in ds.samples)) == [0, 1, 2]
        assert len(ds.class_names) == 3

    def test_all_clouds_normalized(self):
        ds = md.synth_dataset(8, 2, 64, np.random.default_rng(2))
        for pc in ds.samples:
            assert np.abs(pc.points).max() <= 1.0 + 1e-6


class TestRotate:
    def test_zero_angle_identity(self):
        pts = np.random.default_rng(0).normal(size=(10, 3)).astype(np.float32)
        np.testing.assert_allclose(md.rotate_z(pts, 0.0), pts, atol=1e-7)

    def test_pi_flips_x(self):
        out = md.rotate_z(np.array([[1.0, 0.0, 0.0]]), np.pi)
        np.testing.assert_allclose(out, [[-1, 0, 0]], atol=1e-7)

    def test_distances_preserved(self):
        pts = np.random.default_rng(1).normal(size=(20, 3))
        rot = md.augment_rotate_z(pts, np.random.default_rng(2))
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        d1 = np.linalg.norm(rot[:, None] - rot[None], axis=2)
        np.testing.assert_allclose(d1, d0, atol=1e-6)


class TestDatasetIO:
    def test_cloud_text_roundtrip(self, tmp_path):
        pc = md.PointCloud(np.random.default_rng(0).normal(size=(12, 3)).astype(np.float32), 3)
        path = tmp_path / "c.txt"
        md.save_cloud_text(path, pc)
        back = md.load_cloud_text(path)
        np.testing.assert_array_equal(back.points, pc.points)
        assert back.label == 3

    def test_unlabeled_roundtrip(self, tmp_path):
        pc = md.PointCloud(np.zeros((2, 3), dtype=np.float32))
        md.save_cloud_text(tmp_path / "u.txt", pc)
        assert md.load_cloud_text(tmp_path / "u.txt").label is None

    def test_dataset_roundtrip(self, tmp_path):
        ds = md.synth_dataset(2, 3, 16, np.random.default_rng(3), split="train")
        md.save_dataset(tmp_path, ds)
        back = md.load_dataset(tmp_path, "train", ds.class_names)
        assert len(back) == len(ds)
        for s, t in zip(back.samples, ds.samples):
            np.testing.assert_array_equal(s.points, t.points)
            assert s.label == t.label

    def test_off_tree_loading(self, tmp_path):
        d = tmp_path / "shapes" / "tri" / "train"
        d.mkdir(parents=True)
        (d / "0.off").write_text(MINIMAL_OFF)
        ds = md.load_off_dataset(tmp_path / "shapes", "train", 8, np.random.default_rng(0))
        assert len(ds) == 1
        assert ds.class_names == ["tri"]
        assert ds.samples[0].n == 8
