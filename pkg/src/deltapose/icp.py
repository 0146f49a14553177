"""Depth-only Gauss-Newton pose refinement.

Point-to-plane ICP against an observed depth map: render the model at the
current estimate, associate projectively, and solve Huber-weighted normal
equations for a left-multiplied twist update. Serves as the analytical
baseline predictor for the tracker.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import se3
from .se3 import Pose, Twist
from . import geometry
from .geometry import CameraIntrinsics
from . import render as rend
from .render import RgbdImage


MAX_NORMAL_GRADIENT = 0.05   # m/px; larger jumps are depth discontinuities
MIN_CORRESPONDENCES = 6


@dataclass(frozen=True)
class GnConfig:
    max_iters: int = 20
    huber_delta: float = 0.01      # meters; math.inf turns the solve into plain LSQ
    eps: float = 1e-8              # stop when the update twist norm drops below
    max_corr: float = 0.05         # meters; association gate

    def __post_init__(self):
        if (self.max_iters <= 0 or self.huber_delta <= 0
                or self.eps <= 0 or self.max_corr <= 0):
            raise ValueError("all GnConfig fields must be positive")


def depth_normals(depth: np.ndarray, K: CameraIntrinsics):
    """Per-pixel unit normals of a depth map by central differences.

    Returns (normals (H,W,3), valid (H,W)). Pixels near holes or across jumps
    larger than MAX_NORMAL_GRADIENT m/px are invalid.
    """
    pts = geometry.back_project(K, depth)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)

    d = np.asarray(depth, dtype=np.float64)
    has = d > 0
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (has[1:-1, 1:-1] & has[1:-1, :-2] & has[1:-1, 2:]
                      & has[:-2, 1:-1] & has[2:, 1:-1])
    # central difference per pixel step
    du = np.zeros((h, w))
    dv = np.zeros((h, w))
    du[1:-1, 1:-1] = 0.5 * (d[1:-1, 2:] - d[1:-1, :-2])
    dv[1:-1, 1:-1] = 0.5 * (d[2:, 1:-1] - d[:-2, 1:-1])
    ok &= (np.abs(du) <= MAX_NORMAL_GRADIENT) & (np.abs(dv) <= MAX_NORMAL_GRADIENT)

    tu = np.zeros((h, w, 3))
    tv = np.zeros((h, w, 3))
    tu[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    tv[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(tu.reshape(-1, 3), tv.reshape(-1, 3)).reshape(h, w, 3)
    norm = np.linalg.norm(n, axis=2)
    ok &= norm > 1e-12
    safe = np.where(ok, norm, 1.0)
    n = n / safe[:, :, None]
    # orient every normal toward the camera
    flip = np.sum(n * pts, axis=2) > 0
    n[flip] = -n[flip]
    normals[ok] = n[ok]
    valid = ok
    return normals, valid


def _correspondences(model_depth, obs_pts, obs_normals, obs_valid, K, max_corr):
    """Project model points into the observation and gate by distance."""
    h, w = model_depth.shape
    vv, uu = np.nonzero(model_depth > 0)
    if vv.size == 0:
        return None
    z = model_depth[vv, uu]
    px = (uu + 0.5 - K.cx) / K.fx * z
    py = (vv + 0.5 - K.cy) / K.fy * z
    p = np.stack([px, py, z], axis=1)

    ou = np.floor(K.fx * p[:, 0] / p[:, 2] + K.cx).astype(int)
    ov = np.floor(K.fy * p[:, 1] / p[:, 2] + K.cy).astype(int)
    inside = (ou >= 0) & (ou < w) & (ov >= 0) & (ov < h)
    p, ou, ov = p[inside], ou[inside], ov[inside]
    if p.shape[0] == 0:
        return None
    matched = obs_valid[ov, ou]
    p, ou, ov = p[matched], ou[matched], ov[matched]
    if p.shape[0] == 0:
        return None
    q = obs_pts[ov, ou]
    n = obs_normals[ov, ou]
    close = np.linalg.norm(q - p, axis=1) <= max_corr
    p, q, n = p[close], q[close], n[close]
    if p.shape[0] == 0:
        return None
    return p, q, n


def _huber_energy(r: np.ndarray, delta: float) -> float:
    if not math.isfinite(delta):
        return float(0.5 * np.dot(r, r))
    a = np.abs(r)
    quad = a <= delta
    return float(np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta)).sum())


def _solve_damped(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    lam = 0.0
    for retry in range(6):
        try:
            sol = np.linalg.solve(A + lam * np.eye(6), b)
            if np.all(np.isfinite(sol)):
                return sol
        except np.linalg.LinAlgError:
            pass
        lam = 1e-6 if lam == 0.0 else 2.0 * lam
    raise RuntimeError("normal equations stayed singular after damped retries")


def gn_predict(mesh, T_prev: Pose, obs: RgbdImage, K: CameraIntrinsics,
               cfg: GnConfig = GnConfig(), trace: dict | None = None) -> Twist:
    """Twist aligning a render at T_prev onto the observed depth.

    The observation is consumed as given; run the bilateral filter first when
    the depth is raw sensor data. Returns delta with exp(delta)*T_prev equal
    to the refined estimate. `trace`, when a dict, receives per-iteration
    energies under "steps" and the refined pose under "T_final".
    """
    obs_pts = geometry.back_project(K, obs.depth)
    obs_normals, obs_valid = depth_normals(obs.depth, K)

    T_est = T_prev
    for _ in range(cfg.max_iters):
        model = rend.render(mesh, K, T_est)
        corr = _correspondences(model.depth, obs_pts, obs_normals, obs_valid,
                                K, cfg.max_corr)
        if corr is None or corr[0].shape[0] < MIN_CORRESPONDENCES:
            raise RuntimeError("insufficient overlap")
        p, q, n = corr

        r = np.sum(n * (q - p), axis=1)
        a = np.abs(r)
        if math.isfinite(cfg.huber_delta):
            wgt = np.where(a <= cfg.huber_delta, 1.0,
                           cfg.huber_delta / np.maximum(a, 1e-300))
        else:
            wgt = np.ones_like(a)

        # residual r(d) = n.(q - p - d_t - d_w x p); stack g = [n, p x n]
        g = np.concatenate([n, np.cross(p, n)], axis=1)
        gw = g * wgt[:, None]
        A = gw.T @ g
        b = gw.T @ r
        delta = _solve_damped(A, b)

        # backtracking on the fixed correspondence set
        e0 = _huber_energy(r, cfg.huber_delta)
        accepted = None
        e_acc = e0
        scale = 1.0
        for _ in range(9):
            d_try = Twist(scale * delta[:3], scale * delta[3:])
            T_try = se3.exp(d_try)
            p_try = se3.transform_points(T_try, p)
            r_try = np.sum(n * (q - p_try), axis=1)
            e_try = _huber_energy(r_try, cfg.huber_delta)
            if e_try < e0:
                accepted = d_try
                e_acc = e_try
                break
            scale *= 0.5
        if accepted is None:
            break
        if trace is not None:
            trace.setdefault("steps", []).append((e0, e_acc))
        T_est = se3.compose(se3.exp(accepted), T_est)
        if np.linalg.norm(np.concatenate([accepted.t, accepted.w])) <= cfg.eps:
            break

    if trace is not None:
        trace["T_final"] = T_est
    return se3.delta_between(T_prev, T_est)
