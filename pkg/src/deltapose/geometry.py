"""Triangle meshes, the pinhole camera model, and crop-region computation.

Meshes are the Wavefront-OBJ subset (v / f lines, triangulated).  The model
point set used by the metrics is the vertex set, no resampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose, transform_points

DEFAULT_GRAY = (0.7, 0.7, 0.7)


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray          # (n, 3) float64, meters, model frame
    triangles: np.ndarray         # (m, 3) int32 vertex indices
    colors: np.ndarray | None = None  # (n, 3) in [0, 1]; None means default gray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if self.colors.shape[0] != self.vertices.shape[0]:
                raise MeshError("per-vertex color count does not match vertex count")
        self.validate()

    def validate(self):
        if self.triangles.shape[0] < 1:
            raise MeshError("degenerate mesh: no triangles")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("mesh has non-finite vertices")
        if self.triangles.min(initial=0) < 0 or self.triangles.max(initial=-1) >= len(self.vertices):
            raise MeshError("triangle index out of range")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bounding_radius(self, center=None) -> float:
        c = self.centroid() if center is None else np.asarray(center)
        return float(np.linalg.norm(self.vertices - c, axis=1).max())

    def vertex_colors(self) -> np.ndarray:
        if self.colors is None:
            return np.tile(np.asarray(DEFAULT_GRAY), (self.num_vertices, 1))
        return self.colors

    def with_color(self, rgb) -> "TriangleMesh":
        rgb = np.clip(np.asarray(rgb, dtype=np.float64).reshape(3), 0.0, 1.0)
        colors = np.tile(rgb, (self.num_vertices, 1))
        return TriangleMesh(self.vertices.copy(), self.triangles.copy(), colors)

    def transformed(self, T: Pose) -> "TriangleMesh":
        return TriangleMesh(transform_points(T, self.vertices), self.triangles.copy(),
                            None if self.colors is None else self.colors.copy())


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0   # depth-units per meter in 16-bit PNGs

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "depth_scale": self.depth_scale}

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                                cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]),
                                depth_scale=float(d.get("depth_scale", 1000.0)))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "CameraIntrinsics":
        with open(path) as f:
            return CameraIntrinsics.from_dict(json.load(f))


@dataclass
class Roi:
    """Square crop window in pixels; the same Roi is applied to both images of a pair."""

    u0: float
    v0: float
    side: float

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("roi side must be positive")

    def to_list(self) -> list:
        return [self.u0, self.v0, self.side]

    @staticmethod
    def from_list(v) -> "Roi":
        return Roi(float(v[0]), float(v[1]), float(v[2]))


# ---------------------------------------------------------------------------
# OBJ subset reader / writer
# ---------------------------------------------------------------------------

def load_mesh(path) -> TriangleMesh:
    """Parse a triangulated OBJ (v / f lines); errors carry the line number."""
    vertices = []
    colors = []
    faces = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "v":
                vals = tok[1:]
                if len(vals) not in (3, 6):
                    raise MeshError(f"{path}:{lineno}: vertex line needs 3 or 6 numbers")
                try:
                    nums = [float(v) for v in vals]
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: bad vertex number") from None
                vertices.append(nums[:3])
                colors.append(nums[3:6] if len(nums) == 6 else None)
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise MeshError(f"{path}:{lineno}: only triangular faces are supported")
                idx = []
                for v in tok[1:]:
                    head = v.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: bad face index {head!r}") from None
                    if i <= 0:
                        raise MeshError(f"{path}:{lineno}: face index must be positive (got {i})")
                    idx.append(i - 1)
                faces.append(idx)
            # vn/vt/o/g/s/usemtl/mtllib are irrelevant to this subset

    if not faces:
        raise MeshError(f"{path}: degenerate mesh: no faces")
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64)
    if tris.max() >= len(verts):
        bad = int(tris.max()) + 1
        raise MeshError(f"{path}: face references vertex {bad} but only {len(verts)} exist")
    col = None
    if any(c is not None for c in colors):
        col = np.array([c if c is not None else list(DEFAULT_GRAY) for c in colors])
    return TriangleMesh(verts, tris, col)


def save_mesh(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        if mesh.colors is not None:
            for v, c in zip(mesh.vertices, mesh.colors):
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        else:
            for v in mesh.vertices:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# ---------------------------------------------------------------------------
# Model diameter
# ---------------------------------------------------------------------------

def model_diameter(mesh: TriangleMesh) -> float:
    """Max pairwise vertex distance; exact up to 5k vertices."""
    pts = mesh.vertices
    n = len(pts)
    if n < 2:
        raise ValueError("model_diameter needs at least 2 vertices")
    if n <= 5000:
        best = 0.0
        block = 512
        for i in range(0, n, block):
            chunk = pts[i:i + block]
            d2 = ((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
            best = max(best, float(d2.max()))
        return math.sqrt(best)
    # farthest-pair double sweep (2-approximation refined by one sweep)
    def farthest_from(p):
        d2 = ((pts - p) ** 2).sum(axis=1)
        j = int(np.argmax(d2))
        return j, math.sqrt(float(d2[j]))

    i, _ = farthest_from(pts.mean(axis=0))
    j, d1 = farthest_from(pts[i])
    _, d2 = farthest_from(pts[j])
    return max(d1, d2)


# ---------------------------------------------------------------------------
# Projection and crop region
# ---------------------------------------------------------------------------

_BEHIND_EPS = 1e-9


def project(K: CameraIntrinsics, p_cam) -> tuple[float, float, float, bool]:
    """Pinhole projection of a camera-frame point; returns (u, v, z, in_front)."""
    x, y, z = np.asarray(p_cam, dtype=np.float64).reshape(3)
    if z <= _BEHIND_EPS:
        return 0.0, 0.0, float(z), False
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, float(z), True


def project_points(K: CameraIntrinsics, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection: (n,2) pixel coords, (n,) z, (n,) in-front mask."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    ok = z > _BEHIND_EPS
    zs = np.where(ok, z, 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = K.fx * pts[:, 0] / zs + K.cx
    uv[:, 1] = K.fy * pts[:, 1] / zs + K.cy
    return uv, z, ok


def back_project(K: CameraIntrinsics, depth: np.ndarray) -> np.ndarray:
    """Depth map (H, W) to camera-frame points (H, W, 3); invalid pixels map to z=0."""
    h, w = depth.shape
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    uu, vv = np.meshgrid(u, v)
    pts = np.empty((h, w, 3))
    pts[..., 0] = (uu - K.cx) / K.fx * depth
    pts[..., 1] = (vv - K.cy) / K.fy * depth
    pts[..., 2] = depth
    return pts


class ObjectNotVisible(RuntimeError):
    pass


def compute_roi(K: CameraIntrinsics, mesh: TriangleMesh, T: Pose, margin: float = 1.4) -> Roi:
    """Square ROI centered on the projected model centroid.

    side = margin * max projected bounding-box extent, clamped inside the image.
    """
    cam_pts = transform_points(T, mesh.vertices)
    uv, _, ok = project_points(K, cam_pts)
    if not np.any(ok):
        raise ObjectNotVisible("object not visible: all vertices behind camera")
    cu, cv, _, c_ok = project(K, transform_points(T, mesh.centroid().reshape(1, 3))[0])
    if not c_ok:
        raise ObjectNotVisible("object not visible: centroid behind camera")
    uv = uv[ok]
    extent = float(max(uv[:, 0].max() - uv[:, 0].min(), uv[:, 1].max() - uv[:, 1].min()))
    side = margin * max(extent, 1.0)
    side = min(side, float(min(K.width, K.height)))
    u0 = min(max(cu - side / 2.0, 0.0), K.width - side)
    v0 = min(max(cv - side / 2.0, 0.0), K.height - side)
    return Roi(u0, v0, side)


# ---------------------------------------------------------------------------
# Procedural primitives (distractors, tests, bundled toy objects)
# ---------------------------------------------------------------------------

# outward winding: cross(b - a, c - a) points away from the box center
_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],    # -z
    [4, 5, 6], [4, 6, 7],    # +z
    [0, 5, 4], [0, 1, 5],    # -y
    [3, 6, 2], [3, 7, 6],    # +y
    [1, 2, 6], [1, 6, 5],    # +x
    [0, 4, 7], [0, 7, 3],    # -x
], dtype=np.int32)


def make_box(size=(0.1, 0.1, 0.1)) -> TriangleMesh:
    sx, sy, sz = (float(s) / 2.0 for s in size)
    verts = np.array([
        [-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
        [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz],
    ])
    return TriangleMesh(verts, _BOX_FACES.copy())


def make_tetrahedron(scale: float = 0.1) -> TriangleMesh:
    s = scale / math.sqrt(3.0)
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) * s
    tris = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int32)
    return TriangleMesh(verts, tris)


def make_icosphere(radius: float = 0.05, subdivisions: int = 1) -> TriangleMesh:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    tris = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_tris = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.array(verts[a]) + np.array(verts[b])
                m /= np.linalg.norm(m)
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = new_tris
    return TriangleMesh(np.asarray(verts) * radius, np.asarray(tris, dtype=np.int32))


def make_blob(semi_axes=(0.04, 0.055, 0.07), subdivisions: int = 1) -> TriangleMesh:
    """Anisotropically scaled icosphere; its distinct curvatures pin all rotations."""
    sphere = make_icosphere(1.0, subdivisions)
    return TriangleMesh(sphere.vertices * np.asarray(semi_axes), sphere.triangles)


def make_cylinder(radius: float = 0.03, height: float = 0.1, segments: int = 12) -> TriangleMesh:
    ang = np.linspace(0, 2 * math.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    verts = np.vstack([bottom, top, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + i), (j, segments + j, segments + i)]   # wall
        tris += [(cb, j, i), (ct, segments + i, segments + j)]            # caps
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int32))


def make_table_quad(half_extent: float = 0.6, z: float = 0.0) -> TriangleMesh:
    """Tabletop square in the gravity-aligned world frame (surface at height z)."""
    e = half_extent
    verts = np.array([[-e, -e, z], [e, -e, z], [e, e, z], [-e, e, z]])
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    return TriangleMesh(verts, tris)
