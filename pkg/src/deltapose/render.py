"""Software RGB-D renderer and crop utilities.

Rasterization rules, chosen so repeated runs are bitwise identical:
  - pixel centers sit at (u + 0.5, v + 0.5)
  - triangles are drawn in order with a strict less-than z-buffer test
  - attributes are interpolated perspective-correct via 1/z
  - flat Lambertian shading per face, intensity clamped to [0.1, 1.0]
  - triangles with any vertex closer than the near plane are skipped whole

Depth maps are float64 meters with 0 marking invalid (background) pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Roi, TriangleMesh
from .se3 import Pose, transform_points

NEAR_PLANE = 1e-3
AMBIENT_FLOOR = 0.1
DEFAULT_LIGHT = (0.0, 0.0, 1.0)   # camera-frame headlight


@dataclass
class RgbdImage:
    rgb: np.ndarray     # (H, W, 3) float64 in [0, 1]
    depth: np.ndarray   # (H, W) float64 meters, 0 = no surface

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("rgb must be (H, W, 3)")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ValueError("depth shape does not match rgb")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def copy(self) -> "RgbdImage":
        return RgbdImage(self.rgb.copy(), self.depth.copy())


def render_scene(objects, K: CameraIntrinsics, light_dir=DEFAULT_LIGHT) -> RgbdImage:
    """Render a list of (mesh, camera_from_model_pose) pairs into one RGB-D frame."""
    h, w = K.height, K.width
    rgb = np.zeros((h, w, 3))
    zbuf = np.full((h, w), np.inf)

    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)

    for mesh, pose in objects:
        cam_pts = transform_points(pose, mesh.vertices)
        colors = mesh.vertex_colors()
        z_all = cam_pts[:, 2]
        safe_z = np.where(z_all > NEAR_PLANE, z_all, 1.0)
        us = K.fx * cam_pts[:, 0] / safe_z + K.cx
        vs = K.fy * cam_pts[:, 1] / safe_z + K.cy

        for tri in mesh.triangles:
            zs = z_all[tri]
            if np.any(zs <= NEAR_PLANE):
                continue
            _raster_triangle(rgb, zbuf, cam_pts[tri], colors[tri],
                             us[tri], vs[tri], zs, light, w, h)

    depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return RgbdImage(rgb, depth)


def render(mesh: TriangleMesh, K: CameraIntrinsics, pose: Pose,
           light_dir=DEFAULT_LIGHT) -> RgbdImage:
    return render_scene([(mesh, pose)], K, light_dir)


def _raster_triangle(rgb, zbuf, p_cam, colors, us, vs, zs, light, w, h):
    # flat shading off the geometric face normal
    n = np.cross(p_cam[1] - p_cam[0], p_cam[2] - p_cam[0])
    norm = np.linalg.norm(n)
    if norm < 1e-14:
        return
    intensity = min(max(abs(float(np.dot(n / norm, light))), AMBIENT_FLOOR), 1.0)

    # screen-space bounding box over pixel indices
    x_lo = max(int(np.floor(us.min() - 0.5)), 0)
    x_hi = min(int(np.ceil(us.max() - 0.5)), w - 1)
    y_lo = max(int(np.floor(vs.min() - 0.5)), 0)
    y_hi = min(int(np.ceil(vs.max() - 0.5)), h - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return

    area = (us[1] - us[0]) * (vs[2] - vs[0]) - (vs[1] - vs[0]) * (us[2] - us[0])
    if abs(area) < 1e-12:
        return

    px = np.arange(x_lo, x_hi + 1) + 0.5
    py = np.arange(y_lo, y_hi + 1) + 0.5
    gx, gy = np.meshgrid(px, py)

    # signed edge functions, normalized so inside means all >= 0
    def edge(ax, ay, bx, by):
        return (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)

    b0 = edge(us[1], vs[1], us[2], vs[2]) / area
    b1 = edge(us[2], vs[2], us[0], vs[0]) / area
    b2 = edge(us[0], vs[0], us[1], vs[1]) / area
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    if not np.any(inside):
        return

    inv_z = b0 / zs[0] + b1 / zs[1] + b2 / zs[2]
    z_in = np.where(inside, 1.0 / np.maximum(inv_z, 1e-12), 0.0)
    z = np.where(inside, z_in, np.inf)

    window = zbuf[y_lo:y_hi + 1, x_lo:x_hi + 1]
    hit = inside & (z < window)
    if not np.any(hit):
        return

    over_z = (b0[..., None] * colors[0] / zs[0]
              + b1[..., None] * colors[1] / zs[1]
              + b2[..., None] * colors[2] / zs[2])
    shaded = np.clip(over_z * z_in[..., None] * intensity, 0.0, 1.0)

    window[hit] = z[hit]
    rgb_window = rgb[y_lo:y_hi + 1, x_lo:x_hi + 1]
    rgb_window[hit] = shaded[hit]


# ---------------------------------------------------------------------------
# crop / resize
# ---------------------------------------------------------------------------

def crop_resize(image: RgbdImage, roi: Roi, out_side: int) -> RgbdImage:
    """Resample a square ROI to out_side x out_side.

    RGB is bilinear; depth is nearest-neighbor so no fictitious surface values
    appear along depth discontinuities.
    """
    h, w = image.depth.shape
    if roi.u0 < -1e-9 or roi.v0 < -1e-9:
        raise ValueError("roi extends outside the image")
    if roi.u0 + roi.side > w + 1e-9 or roi.v0 + roi.side > h + 1e-9:
        raise ValueError("roi extends outside the image")
    if out_side < 1:
        raise ValueError("out_side must be >= 1")

    step = roi.side / out_side
    src_u = roi.u0 + (np.arange(out_side) + 0.5) * step
    src_v = roi.v0 + (np.arange(out_side) + 0.5) * step

    # nearest pixel: the one whose [j, j+1) interval contains the sample
    nn_u = np.clip(np.floor(src_u).astype(np.int64), 0, w - 1)
    nn_v = np.clip(np.floor(src_v).astype(np.int64), 0, h - 1)
    depth = image.depth[np.ix_(nn_v, nn_u)]

    # bilinear in pixel-center coordinates, edge-clamped
    x = src_u - 0.5
    y = src_v - 0.5
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = np.clip(x - x0, 0.0, 1.0)[None, :, None]
    ty = np.clip(y - y0, 0.0, 1.0)[:, None, None]

    c00 = image.rgb[np.ix_(y0, x0)]
    c01 = image.rgb[np.ix_(y0, x1)]
    c10 = image.rgb[np.ix_(y1, x0)]
    c11 = image.rgb[np.ix_(y1, x1)]
    top = c00 * (1 - tx) + c01 * tx
    bot = c10 * (1 - tx) + c11 * tx
    rgb = top * (1 - ty) + bot * ty

    return RgbdImage(rgb, depth)


# ---------------------------------------------------------------------------
# png i/o
# ---------------------------------------------------------------------------

def save_rgb(rgb: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_depth(depth: np.ndarray, path, depth_scale: float = 1000.0) -> None:
    """16-bit PNG; stored value = round(meters * depth_scale), 0 stays invalid."""
    arr = np.clip(np.round(np.asarray(depth) * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_depth(path, depth_scale: float = 1000.0) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / depth_scale


def save_rgbd(image: RgbdImage, rgb_path, depth_path, depth_scale: float = 1000.0) -> None:
    save_rgb(image.rgb, rgb_path)
    save_depth(image.depth, depth_path, depth_scale)


def load_rgbd(rgb_path, depth_path, depth_scale: float = 1000.0) -> RgbdImage:
    return RgbdImage(load_rgb(rgb_path), load_depth(depth_path, depth_scale))
