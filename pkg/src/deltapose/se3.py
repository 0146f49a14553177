"""Exact SE(3)/se(3) math on numpy arrays.

Conventions:
  - A Pose maps model-frame points into the camera frame: y = R x + t.
  - A Twist (t, w) is an se(3) element; w is axis-angle scaled, t is the
    translational twist component (passed through the left Jacobian V in exp).
  - Quaternions are scalar-last (x, y, z, w), canonical sign w >= 0.

Everything here is float64 and pure (no mutation of inputs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle the closed-form sin/cos ratios are replaced by
# their Taylor series.  The series for the well-conditioned coefficients cut
# over at 1e-8 (truncation < 1e-16); the cancellation-prone ones, B(theta) and
# Binv(theta), switch at 1e-4 where the closed forms start losing digits.
_TINY_ANGLE = 1e-8
_SMALL_ANGLE = 1e-4


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Twist:
    """se(3) element: translational part t (meters) and rotational part w (radians)."""

    t: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64).reshape(3).copy())
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.w))):
            raise ValueError("twist components must be finite")

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.w])

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(self.w))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation R plus translation t (meters)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3).copy())
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def orthonormality_error(self) -> float:
        return float(np.linalg.norm(self.R.T @ self.R - np.eye(3)))

    def is_valid(self, tol: float = 1e-9) -> bool:
        return self.orthonormality_error() <= tol and abs(np.linalg.det(self.R) - 1.0) <= tol


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion, scalar-last (x, y, z, w), canonical sign w >= 0."""

    x: float
    y: float
    z: float
    w: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w])

    @staticmethod
    def from_array(q, normalize: bool = False) -> "UnitQuaternion":
        q = np.asarray(q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("degenerate quaternion")
        if normalize:
            q = q / n
        elif abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        else:
            q = q / n
        if q[3] < 0:
            q = -q
        return UnitQuaternion(*q)


# ---------------------------------------------------------------------------
# Rotation coefficient helpers.  R = I + a(th) w^ + b(th) w^2,
# V = I + b(th) w^ + c(th) w^2,  Vinv = I - w^/2 + cinv(th) w^2.
# b uses 2 sin^2(th/2)/th^2 which is cancellation-free at any angle.
# ---------------------------------------------------------------------------

def _rot_coeffs(theta: float):
    if theta < _TINY_ANGLE:
        th2 = theta * theta
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        s = math.sin(0.5 * theta)
        a = math.sin(theta) / theta
        b = 2.0 * s * s / (theta * theta)
    return a, b


def _v_coeff(theta: float) -> float:
    # c = (theta - sin theta) / theta^3
    if theta < _SMALL_ANGLE:
        th2 = theta * theta
        return 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0
    return (theta - math.sin(theta)) / (theta ** 3)


def _vinv_coeff(theta: float) -> float:
    # cinv = 1/theta^2 - (1 + cos theta) / (2 theta sin theta)
    if theta < _SMALL_ANGLE:
        th2 = theta * theta
        return 1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0
    return 1.0 / (theta * theta) - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))


def rotation_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula: axis-angle vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    a, b = _rot_coeffs(theta)
    wx = _skew(w)
    return np.eye(3) + a * wx + b * (wx @ wx)


def left_jacobian(w: np.ndarray) -> np.ndarray:
    """V(w): maps the translational twist component to the group translation."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    _, b = _rot_coeffs(theta)
    c = _v_coeff(theta)
    wx = _skew(w)
    return np.eye(3) + b * wx + c * (wx @ wx)


def left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    wx = _skew(w)
    return np.eye(3) - 0.5 * wx + _vinv_coeff(theta) * (wx @ wx)


def _quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Shepperd's method: stable extraction from the largest of trace / diagonal.

    Returns (x, y, z, w) with w >= 0.  The largest-diagonal branches are the
    stable path for angles near pi.
    """
    m = R
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > max(m[0, 0], m[1, 1], m[2, 2]):
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        x = 0.25 * s
        w = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        y = 0.25 * s
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        z = 0.25 * s
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def _quat_log(q: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a unit quaternion (w >= 0), |result| <= pi."""
    v = q[:3]
    w = q[3]
    vn = float(np.linalg.norm(v))
    if vn < 1e-16:
        return np.zeros(3)
    theta = 2.0 * math.atan2(vn, w)
    return (theta / vn) * v


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, |result| <= pi, via quaternion."""
    return _quat_log(_quat_from_rotation(np.asarray(R, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Group operations
# ---------------------------------------------------------------------------

def exp(xi: Twist) -> Pose:
    """Exponential map se(3) -> SE(3)."""
    R = rotation_exp(xi.w)
    t = left_jacobian(xi.w) @ xi.t
    return Pose(R, t)


def log(T: Pose) -> Twist:
    """Logarithm map SE(3) -> se(3); inverse of exp, |w| <= pi."""
    w = rotation_log(T.R)
    t = left_jacobian_inv(w) @ T.t
    return Twist(t, w)


def compose(a: Pose, b: Pose) -> Pose:
    """Matrix product a * b; re-orthonormalizes if drift exceeds 1e-9."""
    R = a.R @ b.R
    t = a.R @ b.t + a.t
    out = Pose(R, t)
    if out.orthonormality_error() > 1e-9:
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        if np.linalg.det(R) < 0:
            u[:, -1] = -u[:, -1]
            R = u @ vt
        out = Pose(R, t)
    return out


def inverse(T: Pose) -> Pose:
    return Pose(T.R.T, -T.R.T @ T.t)


def transform_points(T: Pose, pts) -> np.ndarray:
    """Apply y_i = R x_i + t to an (n, 3) array of points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return pts @ T.R.T + T.t


def delta_between(prev: Pose, curr: Pose) -> Twist:
    """Twist d with exp(d) * prev == curr (the tracking residual convention)."""
    return log(compose(curr, inverse(prev)))


def apply_delta(delta: Twist, prev: Pose) -> Pose:
    """Pose update: exp(delta) * prev."""
    return compose(exp(delta), prev)


# ---------------------------------------------------------------------------
# Quaternion representation (ablation path)
# ---------------------------------------------------------------------------

def quat_to_pose(q: UnitQuaternion | np.ndarray, t=(0.0, 0.0, 0.0)) -> Pose:
    """Build a Pose from a scalar-last quaternion (normalized on entry) and translation."""
    if isinstance(q, UnitQuaternion):
        arr = q.as_array()
    else:
        arr = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(arr))
    if n < 1e-12:
        raise ValueError("degenerate quaternion")
    x, y, z, w = arr / n
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Pose(R, np.asarray(t, dtype=np.float64))


def pose_rot_to_quat(T: Pose) -> UnitQuaternion:
    """Rotation of a Pose as a canonical-sign unit quaternion."""
    q = _quat_from_rotation(T.R)
    return UnitQuaternion(*q)


def quat_log(q: UnitQuaternion | np.ndarray) -> np.ndarray:
    """Axis-angle vector of a quaternion; normalizes first, errors on zero norm."""
    if isinstance(q, UnitQuaternion):
        arr = q.as_array()
    else:
        arr = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(arr))
    if n < 1e-9:
        raise ValueError("degenerate quaternion")
    arr = arr / n
    if arr[3] < 0:
        arr = -arr
    return _quat_log(arr)


# ---------------------------------------------------------------------------
# Serialization: 4x4 row-major, 16 whitespace-separated decimals per line.
# ---------------------------------------------------------------------------

def pose_to_line(T: Pose) -> str:
    return " ".join(repr(float(v)) for v in T.matrix().reshape(16))


def pose_from_line(line: str) -> Pose:
    vals = [float(tok) for tok in line.split()]
    if len(vals) != 16:
        raise ValueError(f"expected 16 values per pose line, got {len(vals)}")
    return Pose.from_matrix(np.array(vals).reshape(4, 4))


def save_poses(path, poses) -> None:
    with open(path, "w") as f:
        for T in poses:
            f.write(pose_to_line(T) + "\n")


def load_poses(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(pose_from_line(line))
    return out
