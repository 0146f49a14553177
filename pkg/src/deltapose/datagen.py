"""Synthetic RGB-D training-data generation.

Scenes are assembled from primitive meshes dropped over a tabletop, settled
with a small impulse solver so nothing interpenetrates, then rendered. Each
training pair couples an object-only render at a perturbed pose with a full
scene render at the true pose, labeled with the twist that maps one onto
the other.
"""

import json
import math
import os
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import se3
from .se3 import Pose, Twist
from . import geometry
from .geometry import CameraIntrinsics, MeshError, ObjectNotVisible, Roi, TriangleMesh
from . import render as rend
from .render import RgbdImage, DEFAULT_LIGHT
from . import depthproc
from .depthproc import AugmentParams
from . import net


GRAVITY = 9.81
SETTLE_DT = 1.0 / 240.0
PENETRATION_TOL = 1e-3      # bounding-sphere overlap allowed in emitted scenes
TABLE_TOL = 1e-4            # lowest vertex may sit this far below the table
MIN_TARGET_PIXELS = 200


# ---------------------------------------------------------------------------
# mesh registry
# ---------------------------------------------------------------------------

_TARGET_FACTORIES = {
    "box": lambda: geometry.make_box((0.12, 0.09, 0.06)).with_color((0.85, 0.33, 0.18)),
    "tetra": lambda: geometry.make_tetrahedron(0.09).with_color((0.25, 0.65, 0.3)),
    "sphere": lambda: geometry.make_icosphere(0.05, 2).with_color((0.3, 0.4, 0.85)),
    "blob": lambda: geometry.make_blob().with_color((0.8, 0.7, 0.2)),
    "cylinder": lambda: geometry.make_cylinder(0.035, 0.11).with_color((0.7, 0.3, 0.7)),
}


def target_mesh(mesh_id: str) -> TriangleMesh:
    """Resolve a mesh id: a registry name or a path to an OBJ file."""
    if mesh_id in _TARGET_FACTORIES:
        return _TARGET_FACTORIES[mesh_id]()
    if str(mesh_id).endswith(".obj"):
        return geometry.load_mesh(mesh_id)
    known = ", ".join(sorted(_TARGET_FACTORIES))
    raise MeshError(f"unknown mesh id {mesh_id!r} (known: {known}, or an .obj path)")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    target: str = "box"
    distractor_range: tuple = (1, 3)        # inclusive count bounds
    table_z: float = 0.0
    xy_range: float = 0.10                  # half-extent of initial xy placement
    drop_height: tuple = (0.03, 0.20)       # initial height above the table
    light_tilt_deg: tuple = (0.0, 30.0)     # light cone around the camera axis
    seed: int = 0
    cam_distance: float = 0.55
    cam_pitch_deg: float = 55.0             # downward look angle; must stay < 90
    settle_physics: bool = True             # the no-physics ablation flips this
    settle_steps: int = 240

    def __post_init__(self):
        object.__setattr__(self, "distractor_range",
                           tuple(int(v) for v in self.distractor_range))
        object.__setattr__(self, "drop_height", tuple(float(v) for v in self.drop_height))
        object.__setattr__(self, "light_tilt_deg",
                           tuple(float(v) for v in self.light_tilt_deg))
        lo, hi = self.distractor_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad distractor_range {self.distractor_range}")
        if self.drop_height[0] < 0 or self.drop_height[1] < self.drop_height[0]:
            raise ValueError(f"bad drop_height {self.drop_height}")
        if not (0 <= self.light_tilt_deg[0] <= self.light_tilt_deg[1] <= 89):
            raise ValueError(f"bad light_tilt_deg {self.light_tilt_deg}")
        if self.xy_range < 0:
            raise ValueError("xy_range must be >= 0")
        if self.cam_distance <= 0:
            raise ValueError("cam_distance must be positive")
        if not (0 < self.cam_pitch_deg < 90):
            raise ValueError("cam_pitch_deg must lie in (0, 90)")
        if self.settle_steps < 1:
            raise ValueError("settle_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("distractor_range", "drop_height", "light_tilt_deg"):
            d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        d = dict(d)
        for k in ("distractor_range", "drop_height", "light_tilt_deg"):
            if k in d:
                d[k] = tuple(d[k])
        return SceneConfig(**d)


@dataclass(frozen=True)
class PerturbRange:
    """Per-axis uniform bounds for the pose perturbation applied to pairs."""
    rot_deg: float = 10.0
    trans: float = 0.02

    def __post_init__(self):
        if self.rot_deg < 0 or self.trans < 0:
            raise ValueError("perturbation ranges must be >= 0")

    def sample(self, rng: np.random.Generator) -> Twist:
        t = rng.uniform(-self.trans, self.trans, size=3)
        w = rng.uniform(-math.radians(self.rot_deg), math.radians(self.rot_deg), size=3)
        return Twist(t, w)

    def to_dict(self) -> dict:
        return {"rot_deg": self.rot_deg, "trans": self.trans}

    @staticmethod
    def from_dict(d: dict) -> "PerturbRange":
        return PerturbRange(**d)


# ---------------------------------------------------------------------------
# camera and sampling
# ---------------------------------------------------------------------------

def camera_pose(cfg: SceneConfig) -> Pose:
    """World-to-camera transform looking at the table center from a tilted orbit."""
    pitch = math.radians(cfg.cam_pitch_deg)
    eye = np.array([0.0, -cfg.cam_distance * math.cos(pitch),
                    cfg.table_z + cfg.cam_distance * math.sin(pitch)])
    at = np.array([0.0, 0.0, cfg.table_z])
    fwd = at - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Pose(R, -R @ eye)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    return se3.quat_to_pose(q).R


def sample_body_pose(cfg: SceneConfig, rng: np.random.Generator) -> Pose:
    R = _random_rotation(rng)
    x, y = rng.uniform(-cfg.xy_range, cfg.xy_range, size=2)
    z = cfg.table_z + rng.uniform(cfg.drop_height[0], cfg.drop_height[1])
    return Pose(R, np.array([x, y, z]))


def _random_distractor(rng: np.random.Generator) -> TriangleMesh:
    kind = int(rng.integers(0, 4))
    if kind == 0:
        mesh = geometry.make_box(tuple(rng.uniform(0.03, 0.10, size=3)))
    elif kind == 1:
        mesh = geometry.make_icosphere(float(rng.uniform(0.02, 0.05)), 1)
    elif kind == 2:
        mesh = geometry.make_cylinder(float(rng.uniform(0.015, 0.04)),
                                      float(rng.uniform(0.04, 0.12)))
    else:
        mesh = geometry.make_tetrahedron(float(rng.uniform(0.04, 0.10)))
    return mesh.with_color(rng.uniform(0.2, 0.9, size=3))


def _sample_light(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    tilt = math.radians(float(rng.uniform(*cfg.light_tilt_deg)))
    azim = float(rng.uniform(0.0, 2.0 * math.pi))
    return np.array([math.sin(tilt) * math.cos(azim),
                     math.sin(tilt) * math.sin(azim),
                     math.cos(tilt)])


# ---------------------------------------------------------------------------
# physics settling
# ---------------------------------------------------------------------------

def settle(bodies, table_z: float, steps: int = 240) -> list:
    """Drop bodies onto the table plane until nothing overlaps.

    Translation-only: orientations stay fixed, so table contact reduces to
    each body's lowest vertex and mutual contact to bounding spheres. Velocity
    impulses plus positional projection; inelastic, lightly damped.
    """
    if steps < 1:
        raise ValueError("settle needs at least one step")
    meshes = [m for m, _ in bodies]
    poses = [p for _, p in bodies]
    n = len(bodies)
    if n == 0:
        return []

    # per-body constants under fixed orientation
    centers = []        # centroid offset from pose translation, world frame
    radii = []
    min_z_off = []      # lowest world vertex relative to pose translation z
    for mesh, pose in zip(meshes, poses):
        rot_verts = mesh.vertices @ pose.R.T
        c_local = mesh.centroid()
        centers.append(pose.R @ c_local)
        radii.append(mesh.bounding_radius(c_local))
        min_z_off.append(float(rot_verts[:, 2].min()))
    centers = np.asarray(centers)
    radii = np.asarray(radii)
    min_z_off = np.asarray(min_z_off)

    pos = np.asarray([p.t for p in poses], dtype=np.float64).copy()
    vel = np.zeros((n, 3))

    for _ in range(steps):
        vel[:, 2] -= GRAVITY * SETTLE_DT
        vel *= 0.98
        pos += vel * SETTLE_DT

        # table contact at the lowest vertex
        floor = table_z - min_z_off
        below = pos[:, 2] < floor
        pos[below, 2] = floor[below]
        vel[below, 2] = np.maximum(vel[below, 2], 0.0)

        # pairwise bounding-sphere contact, fixed order for determinism
        for i in range(n):
            for j in range(i + 1, n):
                d = (pos[j] + centers[j]) - (pos[i] + centers[i])
                dist = float(np.linalg.norm(d))
                min_dist = radii[i] + radii[j]
                if dist >= min_dist:
                    continue
                axis = d / dist if dist > 1e-9 else np.array([1.0, 0.0, 0.0])
                push = 0.5 * (min_dist - dist)
                pos[i] -= push * axis
                pos[j] += push * axis
                vn = float(np.dot(vel[j] - vel[i], axis))
                if vn < 0.0:
                    vel[i] += 0.5 * vn * axis
                    vel[j] -= 0.5 * vn * axis

    # final projection sweep to clear residual overlap without dynamics
    for _ in range(50):
        moved = False
        floor = table_z - min_z_off
        below = pos[:, 2] < floor
        if np.any(below):
            pos[below, 2] = floor[below]
            moved = True
        for i in range(n):
            for j in range(i + 1, n):
                d = (pos[j] + centers[j]) - (pos[i] + centers[i])
                dist = float(np.linalg.norm(d))
                min_dist = radii[i] + radii[j]
                if dist >= min_dist - 0.5 * PENETRATION_TOL:
                    continue
                axis = d / dist if dist > 1e-9 else np.array([1.0, 0.0, 0.0])
                push = 0.5 * (min_dist - dist)
                pos[i] -= push * axis
                pos[j] += push * axis
                moved = True
        if not moved:
            break

    out = [Pose(p.R, pos[i]) for i, p in enumerate(poses)]
    still_moving = float(np.abs(vel).max()) > 0.01
    if (still_moving
            or max_interpenetration(meshes, out) > PENETRATION_TOL
            or _table_violation(meshes, out, table_z) > TABLE_TOL):
        warnings.warn("physics settling did not converge; scene should be resampled")
    return out


def max_interpenetration(meshes, poses) -> float:
    """Worst pairwise bounding-sphere overlap in meters (0 when separated)."""
    centers, radii = [], []
    for mesh, pose in zip(meshes, poses):
        c = mesh.centroid()
        centers.append(pose.R @ c + pose.t)
        radii.append(mesh.bounding_radius(c))
    worst = 0.0
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            gap = radii[i] + radii[j] - float(np.linalg.norm(centers[j] - centers[i]))
            worst = max(worst, gap)
    return worst


def _table_violation(meshes, poses, table_z: float) -> float:
    worst = 0.0
    for mesh, pose in zip(meshes, poses):
        low = float((se3.transform_points(pose, mesh.vertices))[:, 2].min())
        worst = max(worst, table_z - low)
    return worst


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    meshes: list                 # index 0 is the target
    world_poses: list
    cam_from_world: Pose
    light_cam: np.ndarray
    table: TriangleMesh

    def camera_poses(self) -> list:
        return [se3.compose(self.cam_from_world, p) for p in self.world_poses]

    def target_pose_cam(self) -> Pose:
        return se3.compose(self.cam_from_world, self.world_poses[0])

    def renderables(self, include_table: bool = True) -> list:
        objs = [(self.table, self.cam_from_world)] if include_table else []
        return objs + list(zip(self.meshes, self.camera_poses()))


def sample_scene(cfg: SceneConfig, rng: np.random.Generator,
                 max_attempts: int = 20) -> Scene:
    cam = camera_pose(cfg)
    table = geometry.make_table_quad(0.6, cfg.table_z).with_color((0.45, 0.45, 0.48))
    for _ in range(max_attempts):
        light = _sample_light(cfg, rng)
        n_dis = int(rng.integers(cfg.distractor_range[0], cfg.distractor_range[1] + 1))
        meshes = [target_mesh(cfg.target)]
        meshes += [_random_distractor(rng) for _ in range(n_dis)]
        poses = [sample_body_pose(cfg, rng) for _ in meshes]
        if cfg.settle_physics:
            poses = settle(list(zip(meshes, poses)), cfg.table_z, cfg.settle_steps)
            if (max_interpenetration(meshes, poses) > PENETRATION_TOL
                    or _table_violation(meshes, poses, cfg.table_z) > TABLE_TOL):
                continue
        return Scene(meshes, poses, cam, light, table)
    raise RuntimeError(f"scene sampling failed to settle after {max_attempts} attempts")


def _render_with_target_mask(scene: Scene, K: CameraIntrinsics):
    """Full-scene frame plus the mask of pixels where the target is front-most."""
    full = rend.render_scene(scene.renderables(), K, scene.light_cam)
    tgt = rend.render(scene.meshes[0], K, scene.target_pose_cam(), scene.light_cam)
    visible = (tgt.depth > 0) & (np.abs(full.depth - tgt.depth) < 1e-9)
    return full, tgt, visible


# ---------------------------------------------------------------------------
# pair generation
# ---------------------------------------------------------------------------

@dataclass
class TrainingPair:
    img_prev: RgbdImage      # object-only render at the perturbed pose
    img_curr: RgbdImage      # full scene at the true pose, depth-augmented
    delta_xi: Twist          # exp(delta_xi) * pose_prev = pose_true
    roi: Roi                 # shared crop window, from the perturbed pose
    pose_prev: Pose
    pose_true: Pose


def sample_pair(cfg: SceneConfig, K: CameraIntrinsics, perturb: PerturbRange,
                rng: np.random.Generator,
                augment: AugmentParams | None = AugmentParams(),
                roi_margin: float = 1.4) -> TrainingPair:
    mesh = target_mesh(cfg.target)
    for _ in range(100):
        scene = sample_scene(cfg, rng)
        T_true = scene.target_pose_cam()
        full, _, visible = _render_with_target_mask(scene, K)
        if int(visible.sum()) < MIN_TARGET_PIXELS:
            continue

        delta = perturb.sample(rng)
        T_prev = se3.compose(T_true, se3.exp(Twist(-delta.t, -delta.w)))
        try:
            roi = geometry.compute_roi(K, mesh, T_prev, margin=roi_margin)
        except ObjectNotVisible:
            continue

        # the synthetic branch keeps the canonical headlight; only the
        # observation branch sees the randomized scene light
        img_prev = rend.render(mesh, K, T_prev, DEFAULT_LIGHT)
        depth = full.depth
        if augment is not None:
            depth = depthproc.augment_depth(depth, augment, rng)
        img_curr = RgbdImage(full.rgb, depth)
        delta_xi = se3.delta_between(T_prev, T_true)
        return TrainingPair(img_prev, img_curr, delta_xi, roi, T_prev, T_true)
    raise ObjectNotVisible("config yields invisible target")


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, writer) -> None:
    # keep the extension so format-sniffing writers still work
    tmp = path.with_name(path.stem + "_tmp" + path.suffix)
    writer(tmp)
    os.replace(tmp, path)


def _augment_dict(augment: AugmentParams | None):
    if augment is None:
        return None
    return {"gauss_sigma": augment.gauss_sigma, "corrupt_prob": augment.corrupt_prob}


def _atomic_json(path: Path, obj) -> None:
    data = json.dumps(obj, sort_keys=True, indent=1)

    def w(tmp):
        with open(tmp, "w") as f:
            f.write(data + "\n")
    _atomic_write(path, w)


def _pose_to_lists(T: Pose) -> list:
    return [[float(v) for v in row] for row in T.matrix()]


def _pose_from_lists(rows) -> Pose:
    return Pose.from_matrix(np.asarray(rows, dtype=np.float64))


def save_pair(pair: TrainingPair, K: CameraIntrinsics, out_dir, idx: int) -> None:
    pairs = Path(out_dir) / "pairs"
    pairs.mkdir(parents=True, exist_ok=True)
    base = f"{idx:06d}"
    _atomic_write(pairs / f"{base}_prev.png",
                  lambda p: rend.save_rgb(pair.img_prev.rgb, p))
    _atomic_write(pairs / f"{base}_prev_depth.png",
                  lambda p: rend.save_depth(pair.img_prev.depth, p, K.depth_scale))
    _atomic_write(pairs / f"{base}_curr.png",
                  lambda p: rend.save_rgb(pair.img_curr.rgb, p))
    _atomic_write(pairs / f"{base}_curr_depth.png",
                  lambda p: rend.save_depth(pair.img_curr.depth, p, K.depth_scale))
    label = {
        "delta_xi": [[float(v) for v in pair.delta_xi.t],
                     [float(v) for v in pair.delta_xi.w]],
        "pose_prev": _pose_to_lists(pair.pose_prev),
        "pose_true": _pose_to_lists(pair.pose_true),
        "roi": pair.roi.to_list(),
    }
    _atomic_json(pairs / f"{base}_label.json", label)


def load_pair(dataset_dir, idx: int, depth_scale: float = 1000.0) -> TrainingPair:
    pairs = Path(dataset_dir) / "pairs"
    base = f"{idx:06d}"
    img_prev = rend.load_rgbd(pairs / f"{base}_prev.png",
                              pairs / f"{base}_prev_depth.png", depth_scale)
    img_curr = rend.load_rgbd(pairs / f"{base}_curr.png",
                              pairs / f"{base}_curr_depth.png", depth_scale)
    with open(pairs / f"{base}_label.json") as f:
        label = json.load(f)
    delta = Twist(np.asarray(label["delta_xi"][0], dtype=np.float64),
                  np.asarray(label["delta_xi"][1], dtype=np.float64))
    return TrainingPair(img_prev, img_curr, delta,
                        Roi.from_list(label["roi"]),
                        _pose_from_lists(label["pose_prev"]),
                        _pose_from_lists(label["pose_true"]))


def generate_dataset(cfg: SceneConfig, K: CameraIntrinsics, perturb: PerturbRange,
                     count: int, out_dir,
                     augment: AugmentParams | None = AugmentParams()) -> dict:
    """Emit `count` labeled pairs; pair i draws from its own stream seed+i."""
    if count < 0:
        raise ValueError("count must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for idx in range(count):
        pair_rng = np.random.default_rng(cfg.seed + idx)
        pair = sample_pair(cfg, K, perturb, pair_rng, augment)
        save_pair(pair, K, out, idx)
    manifest = {
        "seed": cfg.seed,
        "count": count,
        "config": {
            "scene": cfg.to_dict(),
            "intrinsics": K.to_dict(),
            "perturb": perturb.to_dict(),
            "augment": _augment_dict(augment),
        },
    }
    _atomic_json(out / "manifest.json", manifest)
    return manifest


def load_manifest(dataset_dir) -> dict:
    with open(Path(dataset_dir) / "manifest.json") as f:
        return json.load(f)


def load_training_arrays(dataset_dir, net_cfg: net.NetConfig,
                         start: int = 0, count: int | None = None,
                         store_float16: bool = True) -> net.TrainingArrays:
    """Crop, normalize and stack stored pairs for the trainer."""
    manifest = load_manifest(dataset_dir)
    total = int(manifest["count"])
    depth_scale = float(manifest["config"]["intrinsics"].get("depth_scale", 1000.0))
    if count is None:
        count = total - start
    if start < 0 or start + count > total:
        raise ValueError(f"slice [{start}, {start + count}) outside dataset of {total}")
    side = net_cfg.input_side
    dtype = np.float16 if store_float16 else np.float32
    xp = np.empty((count, 4, side, side), dtype=dtype)
    xc = np.empty((count, 4, side, side), dtype=dtype)
    t_lab = np.empty((count, 3), dtype=np.float32)
    r_lab = np.empty((count, net_cfg.rot_dim), dtype=np.float32)
    for k in range(count):
        pair = load_pair(dataset_dir, start + k, depth_scale)
        prev_crop = rend.crop_resize(pair.img_prev, pair.roi, side)
        curr_crop = rend.crop_resize(pair.img_curr, pair.roi, side)
        a, b = depthproc.normalize_input(prev_crop, curr_crop, pair.pose_prev)
        xp[k] = a.astype(dtype)
        xc[k] = b.astype(dtype)
        t_lab[k] = np.asarray(pair.delta_xi.t, dtype=np.float32)
        r_lab[k] = net.rotation_target(pair.delta_xi, net_cfg)
    return net.TrainingArrays(xp, xc, t_lab, r_lab)


# ---------------------------------------------------------------------------
# sequence generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionParams:
    """Smooth per-frame target motion for synthetic tracking sequences."""
    rot_step_deg: float = 1.2
    trans_step: float = 0.003
    wobble: float = 0.4          # sinusoidal modulation of the step sizes
    period: int = 40

    def __post_init__(self):
        if self.rot_step_deg < 0 or self.trans_step < 0:
            raise ValueError("motion steps must be >= 0")
        if not (0 <= self.wobble <= 1):
            raise ValueError("wobble must lie in [0, 1]")
        if self.period < 1:
            raise ValueError("period must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "MotionParams":
        return MotionParams(**d)


def motion_deltas(motion: MotionParams, n_frames: int,
                  rng: np.random.Generator) -> list:
    """Per-frame camera-frame twists; frame 0 has none."""
    axis_w = rng.normal(size=3)
    axis_w /= np.linalg.norm(axis_w)
    axis_t = rng.normal(size=3)
    axis_t /= np.linalg.norm(axis_t)
    deltas = []
    for k in range(1, n_frames):
        s = 1.0 + motion.wobble * math.sin(2.0 * math.pi * k / motion.period)
        c = 1.0 + motion.wobble * math.cos(2.0 * math.pi * k / motion.period)
        deltas.append(Twist(axis_t * motion.trans_step * s,
                            axis_w * math.radians(motion.rot_step_deg) * c))
    return deltas


def generate_sequence(cfg: SceneConfig, K: CameraIntrinsics, motion: MotionParams,
                      n_frames: int, out_dir,
                      augment: AugmentParams | None = None) -> dict:
    """Render a tracking sequence of a moving target in a settled scene."""
    if n_frames < 1:
        raise ValueError("a sequence needs at least one frame")
    rng = np.random.default_rng(cfg.seed)
    scene = sample_scene(cfg, rng)
    _, _, visible = _render_with_target_mask(scene, K)
    if int(visible.sum()) < MIN_TARGET_PIXELS:
        raise ObjectNotVisible("config yields invisible target")

    poses = [scene.target_pose_cam()]
    for delta in motion_deltas(motion, n_frames, rng):
        poses.append(se3.apply_delta(delta, poses[-1]))

    out = Path(out_dir)
    frames = out / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    statics = [(scene.table, scene.cam_from_world)]
    statics += list(zip(scene.meshes[1:], scene.camera_poses()[1:]))
    for k, T in enumerate(poses):
        img = rend.render_scene(statics + [(scene.meshes[0], T)], K, scene.light_cam)
        depth = img.depth
        if augment is not None:
            depth = depthproc.augment_depth(depth, augment, rng)
        base = f"{k:06d}"
        _atomic_write(frames / f"{base}_rgb.png", lambda p: rend.save_rgb(img.rgb, p))
        _atomic_write(frames / f"{base}_depth.png",
                      lambda p: rend.save_depth(depth, p, K.depth_scale))

    _atomic_write(out / "gt_poses.txt", lambda p: se3.save_poses(p, poses))
    _atomic_write(out / "intrinsics.json", lambda p: K.save(p))
    _atomic_write(out / "target.obj",
                  lambda p: geometry.save_mesh(scene.meshes[0], p))
    manifest = {
        "seed": cfg.seed,
        "n_frames": n_frames,
        "config": {
            "scene": cfg.to_dict(),
            "intrinsics": K.to_dict(),
            "motion": motion.to_dict(),
            "augment": _augment_dict(augment),
        },
    }
    _atomic_json(out / "manifest.json", manifest)
    return manifest
