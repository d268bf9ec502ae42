"""OFF mesh parsing, surface sampling, and the synthetic desk-scale dataset."""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CountMismatchError,
    DegenerateMeshError,
    IndexOutOfRangeError,
    MissingMagicError,
    UnsupportedClassCountError,
)
from .validation import check_points


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64, indices into vertices


@dataclass
class PointCloud:
    points: np.ndarray        # (n, 3)
    label: int | None = None

    @property
    def n(self):
        return self.points.shape[0]


@dataclass
class LabeledDataset:
    samples: list
    class_names: list
    split: str = "train"

    def __len__(self):
        return len(self.samples)

    def points_array(self):
        """Stack all clouds into (N, n, 3); requires equal point counts."""
        return np.stack([s.points for s in self.samples])

    def labels_array(self):
        return np.asarray([s.label for s in self.samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# OFF format
# ---------------------------------------------------------------------------

def _data_lines(text):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def parse_off(text):
    """Parse an ASCII OFF mesh, fan-triangulating any polygon faces.

    Accepts the ModelNet quirk where the counts are fused onto the magic
    line ("OFF3 1 0"). The magic is case-sensitive.
    """
    if isinstance(text, bytes):
        text = text.decode("ascii")
    lines = _data_lines(text)
    try:
        first = next(lines)
    except StopIteration:
        raise MissingMagicError("empty OFF file")
    if not first.startswith("OFF"):
        raise MissingMagicError(f"expected OFF magic, got {first[:16]!r}")
    rest = first[3:].strip()
    if not rest:
        try:
            rest = next(lines)
        except StopIteration:
            raise CountMismatchError("missing counts line")
    counts = rest.split()
    if len(counts) < 2:
        raise CountMismatchError(f"bad counts line {rest!r}")
    try:
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except ValueError:
        raise CountMismatchError(f"bad counts line {rest!r}")
    if n_vertices < 1:
        raise CountMismatchError("mesh must declare at least one vertex")

    vertices = np.empty((n_vertices, 3), dtype=np.float64)
    for i in range(n_vertices):
        try:
            parts = next(lines).split()
        except StopIteration:
            raise CountMismatchError(f"declared {n_vertices} vertices, file ends at {i}")
        if len(parts) != 3:
            raise CountMismatchError(f"vertex line {i} has {len(parts)} fields")
        vertices[i] = [float(p) for p in parts]

    triangles = []
    for i in range(n_faces):
        try:
            parts = next(lines).split()
        except StopIteration:
            raise CountMismatchError(f"declared {n_faces} faces, file ends at {i}")
        k = int(parts[0])
        if k < 3 or len(parts) != k + 1:
            raise CountMismatchError(f"face line {i} declares {k} vertices, has {len(parts) - 1}")
        idx = [int(p) for p in parts[1:]]
        for v in idx:
            if v < 0 or v >= n_vertices:
                raise IndexOutOfRangeError(f"face {i} references vertex {v} of {n_vertices}")
        for j in range(1, k - 1):
            triangles.append((idx[0], idx[j], idx[j + 1]))

    faces = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices, faces)


def serialize_off(mesh):
    """Inverse of parse_off for triangle meshes."""
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    for v in mesh.vertices:
        out.append(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f in mesh.faces:
        out.append(f"3 {f[0]} {f[1]} {f[2]}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# surface sampling and normalization
# ---------------------------------------------------------------------------

def _face_areas(mesh):
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1), (a, b, c)


def sample_surface(mesh, n, rng):
    """Sample n points uniformly on the mesh surface (area-weighted faces)."""
    if len(mesh.faces) == 0:
        raise DegenerateMeshError("mesh has no faces")
    areas, (a, b, c) = _face_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise DegenerateMeshError("total surface area is zero")
    cdf = np.cumsum(areas) / total
    face = np.searchsorted(cdf, rng.random(n), side="right")
    face = np.minimum(face, len(areas) - 1)
    # sqrt trick gives uniform barycentric coordinates
    su = np.sqrt(rng.random(n))[:, None]
    v = rng.random(n)[:, None]
    pts = (1.0 - su) * a[face] + su * (1.0 - v) * b[face] + su * v * c[face]
    return PointCloud(pts.astype(np.float32))


def normalize_unit_cube(points):
    """Center on the centroid and scale so max |coordinate| is exactly 1.

    A fully coincident cloud maps to the origin. Accepts a PointCloud or a
    bare array; returns the same kind.
    """
    if isinstance(points, PointCloud):
        return PointCloud(normalize_unit_cube(points.points), points.label)
    pts = check_points(points)
    centered = pts - pts.mean(axis=0)
    scale = np.abs(centered).max()
    if scale == 0.0:
        return centered
    return centered / scale


def rotate_z(points, angle):
    """Rigid rotation about the z axis by `angle` radians."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=points.dtype)
    return points @ rot.T


def augment_rotate_z(pc, rng):
    """Rotate a cloud by a random angle about z (distance-preserving)."""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    if isinstance(pc, PointCloud):
        return PointCloud(rotate_z(pc.points, angle), pc.label)
    return rotate_z(pc, angle)


# ---------------------------------------------------------------------------
# synthetic shape families
#
# Every family draws its shape parameters per sample, and the ranges place
# each family near at least one other (truncated cones against cylinders,
# polygonal pyramids against cones, fat tori against spheres, squarish
# cylinders against rounded cubes), so classification hinges on fine
# geometric detail rather than gross silhouette.
# ---------------------------------------------------------------------------

def _superquadric(n, rng, p, axes):
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = ((np.abs(u) ** p).sum(axis=1)) ** (-1.0 / p)
    return u * r[:, None] * axes


def _shape_sphere(n, rng):
    axes = rng.uniform(0.85, 1.0, size=3)
    return _superquadric(n, rng, 2.0, axes)


def _shape_cube(n, rng):
    p = rng.uniform(3.2, 10.0)
    axes = rng.uniform(0.85, 1.0, size=3)
    return _superquadric(n, rng, p, axes)


def _superellipse_radius(theta, q):
    return (np.abs(np.cos(theta)) ** q + np.abs(np.sin(theta)) ** q) ** (-1.0 / q)


def _polygon_radius(theta, sides):
    half = np.pi / sides
    local = np.mod(theta + half, 2.0 * half) - half
    return np.cos(half) / np.cos(local)


def _prism(n, rng, r_base, r_top, half_h, cross):
    """Capped generalized prism: linear radius from base to top, arbitrary
    cross-section radius function. Regions weighted approximately by area."""
    a_base = r_base ** 2
    a_top = r_top ** 2
    a_lat = (r_base + r_top) * half_h * 2.0
    w = np.array([a_base, a_top, a_lat])
    region = rng.choice(3, size=n, p=w / w.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    shape_r = cross(theta)
    pts = np.empty((n, 3))
    # lateral: density along height proportional to local radius
    u = rng.random(n)
    if abs(r_base - r_top) < 1e-12:
        t = u
    else:
        # inverse cdf of a linear density r(t) = r_base + (r_top - r_base) t
        a, b = r_base, r_top - r_base
        t = (np.sqrt(a * a + u * (2 * a * b + b * b)) - a) / b
    r_lat = r_base + (r_top - r_base) * t
    z_lat = -half_h + 2.0 * half_h * t
    disk = np.sqrt(rng.random(n))
    pts[:, 0] = np.where(region == 2, r_lat, disk * np.where(region == 1, r_top, r_base))
    pts[:, 0] *= shape_r * np.cos(theta)
    pts[:, 1] = np.where(region == 2, r_lat, disk * np.where(region == 1, r_top, r_base))
    pts[:, 1] *= shape_r * np.sin(theta)
    pts[:, 2] = np.where(region == 2, z_lat, np.where(region == 1, half_h, -half_h))
    return pts


def _shape_cylinder(n, rng):
    q = rng.uniform(2.0, 7.0)
    r = rng.uniform(0.7, 0.95)
    h = rng.uniform(0.5, 0.95)
    return _prism(n, rng, r, r, h, lambda th: _superellipse_radius(th, q))


def _shape_cone(n, rng):
    r = rng.uniform(0.7, 0.9)
    trunc = rng.uniform(0.0, 0.6)
    h = rng.uniform(0.7, 0.95)
    return _prism(n, rng, r, trunc * r, h, lambda th: np.ones_like(th))


def _shape_pyramid(n, rng):
    sides = int(rng.choice([4, 5, 6, 8]))
    r = rng.uniform(0.7, 0.9)
    trunc = rng.uniform(0.0, 0.6)
    h = rng.uniform(0.7, 0.95)
    return _prism(n, rng, r, trunc * r, h, lambda th: _polygon_radius(th, sides))


def _shape_torus(n, rng):
    r = rng.uniform(0.28, 0.52)
    R = 1.03 - r
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = np.empty(n)
    done = 0
    while done < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - done))
        accept = rng.random(cand.size) < (R + r * np.cos(cand)) / (R + r)
        good = cand[accept][: n - done]
        phi[done:done + good.size] = good
        done += good.size
    pts = np.empty((n, 3))
    pts[:, 0] = (R + r * np.cos(phi)) * np.cos(theta)
    pts[:, 1] = (R + r * np.cos(phi)) * np.sin(theta)
    pts[:, 2] = r * np.sin(phi)
    return pts


def _shape_plane_pair(n, rng):
    q = rng.uniform(2.0, 8.0)
    r = rng.uniform(0.7, 0.95)
    gap = rng.uniform(0.45, 0.95)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    rad = r * np.sqrt(rng.random(n)) * _superellipse_radius(theta, q)
    pts = np.empty((n, 3))
    pts[:, 0] = rad * np.cos(theta)
    pts[:, 1] = rad * np.sin(theta)
    pts[:, 2] = np.where(rng.random(n) < 0.5, gap, -gap)
    return pts


def _shape_helix(n, rng):
    turns = rng.uniform(1.1, 2.6)
    R_h = rng.uniform(0.6, 0.8)
    tube = rng.uniform(0.06, 0.14)
    z_span = rng.uniform(0.25, 1.2)
    t = rng.random(n)
    phi = 2.0 * np.pi * turns * t
    psi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = R_h + tube * np.cos(psi)
    pts = np.empty((n, 3))
    pts[:, 0] = ring * np.cos(phi)
    pts[:, 1] = ring * np.sin(phi)
    pts[:, 2] = z_span * (t - 0.5) + tube * np.sin(psi)
    return pts


SHAPE_FAMILIES = (
    ("sphere", _shape_sphere),
    ("cube", _shape_cube),
    ("cylinder", _shape_cylinder),
    ("cone", _shape_cone),
    ("torus", _shape_torus),
    ("pyramid", _shape_pyramid),
    ("plane_pair", _shape_plane_pair),
    ("helix", _shape_helix),
)


def synth_dataset(classes, per_class, n_points, rng, split="train"):
    """Generate a labeled synthetic dataset from the parametric shape families.

    Each sample gets a random scale in [0.7, 1.0] and Gaussian jitter
    (sigma 0.01) before unit-cube normalization. Deterministic for a given
    generator state.
    """
    if classes < 1 or classes > len(SHAPE_FAMILIES):
        raise UnsupportedClassCountError(
            f"classes must be in [1, {len(SHAPE_FAMILIES)}], got {classes}")
    samples = []
    for label in range(classes):
        _, sampler = SHAPE_FAMILIES[label]
        for _ in range(per_class):
            pts = sampler(n_points, rng)
            pts = pts * rng.uniform(0.7, 1.0)
            pts = pts + rng.normal(scale=0.01, size=pts.shape)
            pts = normalize_unit_cube(pts.astype(np.float32))
            samples.append(PointCloud(pts, label))
    names = [name for name, _ in SHAPE_FAMILIES[:classes]]
    return LabeledDataset(samples, names, split)


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def save_cloud_text(path, pc):
    """One text file per sample: header "n label", then one "x y z" per point."""
    label = -1 if pc.label is None else pc.label
    with open(path, "w") as fh:
        fh.write(f"{pc.n} {label}\n")
        for p in pc.points:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def load_cloud_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        n, label = int(header[0]), int(header[1])
        pts = np.loadtxt(fh, dtype=np.float32, max_rows=n).reshape(n, 3)
    return PointCloud(pts, None if label < 0 else label)


def save_dataset(root, dataset):
    """Write samples as <root>/<split>/<index>.txt."""
    split_dir = os.path.join(root, dataset.split)
    os.makedirs(split_dir, exist_ok=True)
    for i, pc in enumerate(dataset.samples):
        save_cloud_text(os.path.join(split_dir, f"{i:05d}.txt"), pc)


def load_dataset(root, split, class_names):
    split_dir = os.path.join(root, split)
    samples = []
    for fname in sorted(os.listdir(split_dir)):
        if fname.endswith(".txt"):
            samples.append(load_cloud_text(os.path.join(split_dir, fname)))
    return LabeledDataset(samples, list(class_names), split)


def load_off_dataset(root, split, n_points, rng):
    """Load a ModelNet-style tree <root>/<class_name>/<split>/<id>.off."""
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    samples = []
    for label, name in enumerate(class_names):
        split_dir = os.path.join(root, name, split)
        if not os.path.isdir(split_dir):
            continue
        for fname in sorted(os.listdir(split_dir)):
            if not fname.endswith(".off"):
                continue
            with open(os.path.join(split_dir, fname), "rb") as fh:
                mesh = parse_off(fh.read())
            pc = sample_surface(mesh, n_points, rng)
            samples.append(PointCloud(normalize_unit_cube(pc.points), label))
    return LabeledDataset(samples, class_names, split)
