"""Frame-to-frame 6-DoF pose tracking loop.

Each step renders the model at the previous pose, pairs that synthetic view
with the incoming observation, asks a pluggable predictor for the relative
twist, and composes it onto the pose. Predictors share one call signature so
the learned regressor, the depth-ICP refiner, and test oracles interchange.
"""

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import depthproc, geometry, icp
from . import net as netmod
from . import render as rend
from . import se3
from .geometry import CameraIntrinsics, ObjectNotVisible, TriangleMesh
from .render import RgbdImage
from .se3 import Pose, Twist


@dataclass(frozen=True)
class ReinitPolicy:
    """Drift detector over the recent twist history."""

    enabled: bool = False
    rot_deg: float = 10.0     # mean per-frame rotation that counts as drift
    trans: float = 0.01       # meters, mean per-frame translation
    window: int = 10

    def __post_init__(self):
        if self.rot_deg <= 0 or self.trans <= 0:
            raise ValueError("reinit thresholds must be positive")
        if self.window < 1:
            raise ValueError("reinit window must be >= 1")


@dataclass(frozen=True)
class TrackerConfig:
    K: CameraIntrinsics
    mesh: TriangleMesh
    input_side: int = 176
    inner_iters: int = 1      # render/predict passes per frame
    filter_params: depthproc.FilterParams = field(
        default_factory=depthproc.FilterParams)

    def __post_init__(self):
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.input_side < 1:
            raise ValueError("input_side must be >= 1")


@dataclass
class FrameInputs:
    """Everything a predictor may want for one render/observe pair.

    The filtered depth feeds the normalized crops; hole filling invents
    surface along the silhouette rim, so geometric predictors that need
    true depth should read `obs`, not `filtered`.
    """

    frame_idx: int
    mesh: TriangleMesh
    K: CameraIntrinsics
    T_prev: Pose
    obs: RgbdImage            # observation as received, full frame
    filtered: RgbdImage       # bilateral-filtered + hole-filled observation
    rendered: RgbdImage       # model at T_prev, full frame
    x_prev: np.ndarray        # normalized CHW crop of the rendered branch
    x_curr: np.ndarray        # normalized CHW crop of the observation
    roi: geometry.Roi


@dataclass
class TrackerState:
    pose: Pose
    config: TrackerConfig
    predictor: object
    policy: ReinitPolicy = field(default_factory=ReinitPolicy)
    pose_provider: object = None      # frame_idx -> Pose, consulted on reinit
    frame_idx: int = 0
    history: deque = None             # last `policy.window` per-frame twists
    status: str = "ok"

    def __post_init__(self):
        if self.history is None:
            self.history = deque(maxlen=self.policy.window)


def zero_predictor(inputs: FrameInputs) -> Twist:
    return Twist(np.zeros(3), np.zeros(3))


class OraclePredictor:
    """Returns the exact twist onto the true pose; for closure tests."""

    def __init__(self, true_poses):
        self.true_poses = list(true_poses)

    def __call__(self, inputs: FrameInputs) -> Twist:
        return se3.delta_between(inputs.T_prev, self.true_poses[inputs.frame_idx])


class GnPredictor:
    """Depth-ICP refinement against the observed depth."""

    def __init__(self, cfg: icp.GnConfig = icp.GnConfig()):
        self.cfg = cfg

    def __call__(self, inputs: FrameInputs) -> Twist:
        return icp.gn_predict(inputs.mesh, inputs.T_prev, inputs.obs,
                              inputs.K, self.cfg)


class NetPredictor:
    """Trained twin-branch regressor on the normalized crop pair."""

    def __init__(self, params: dict, cfg: netmod.NetConfig):
        self.params = params
        self.cfg = cfg

    @staticmethod
    def from_checkpoint(path) -> "NetPredictor":
        cfg, params = netmod.load_checkpoint(path)
        return NetPredictor(params, cfg)

    def __call__(self, inputs: FrameInputs) -> Twist:
        return netmod.predict_delta(self.params, inputs.x_prev,
                                    inputs.x_curr, self.cfg)


def init_state(pose: Pose, predictor, config: TrackerConfig,
               policy: ReinitPolicy = None, pose_provider=None) -> TrackerState:
    return TrackerState(pose=pose, config=config, predictor=predictor,
                        policy=policy or ReinitPolicy(),
                        pose_provider=pose_provider)


def _in_frame(K: CameraIntrinsics, mesh: TriangleMesh, T: Pose) -> bool:
    uv, _, ok = geometry.project_points(K, se3.transform_points(T, mesh.vertices))
    if not np.any(ok):
        return False
    u, v = uv[ok, 0], uv[ok, 1]
    return bool(np.any((u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)))


def _frame_inputs(cfg: TrackerConfig, idx: int, T: Pose, obs: RgbdImage,
                  filtered: RgbdImage) -> FrameInputs:
    roi = geometry.compute_roi(cfg.K, cfg.mesh, T)
    rendered = rend.render(cfg.mesh, cfg.K, T)
    crop_prev = rend.crop_resize(rendered, roi, cfg.input_side)
    crop_curr = rend.crop_resize(filtered, roi, cfg.input_side)
    x_prev, x_curr = depthproc.normalize_input(crop_prev, crop_curr, T)
    return FrameInputs(idx, cfg.mesh, cfg.K, T, obs, filtered, rendered,
                       x_prev, x_curr, roi)


def check_reinit(state: TrackerState) -> bool:
    """True when the recent mean motion exceeds the drift thresholds."""
    policy = state.policy
    if not policy.enabled or len(state.history) < policy.window:
        return False
    rots = [math.degrees(np.linalg.norm(d.w)) for d in state.history]
    trans = [float(np.linalg.norm(d.t)) for d in state.history]
    return (float(np.mean(rots)) > policy.rot_deg
            or float(np.mean(trans)) > policy.trans)


def step(state: TrackerState, obs: RgbdImage) -> tuple[TrackerState, Pose]:
    """Consume one frame; returns the advanced state and the new pose estimate."""
    cfg = state.config
    if obs.depth.shape != (cfg.K.height, cfg.K.width):
        raise ValueError("observation size does not match camera config")

    idx = state.frame_idx
    T_prev = state.pose
    filtered = RgbdImage(obs.rgb,
                         depthproc.bilateral_filter(obs.depth, cfg.filter_params))

    T = T_prev
    status = "ok"
    try:
        for _ in range(cfg.inner_iters):
            if not _in_frame(cfg.K, cfg.mesh, T):
                raise ObjectNotVisible("object left the frame")
            inputs = _frame_inputs(cfg, idx, T, obs, filtered)
            delta = state.predictor(inputs)
            T = se3.apply_delta(delta, T)
    except ObjectNotVisible:
        # hold the last good pose and keep trying on later frames
        T = T_prev
        status = "lost"

    new_state = TrackerState(pose=T, config=cfg, predictor=state.predictor,
                             policy=state.policy,
                             pose_provider=state.pose_provider,
                             frame_idx=idx + 1, history=state.history,
                             status=status)
    if status == "ok":
        new_state.history.append(se3.delta_between(T_prev, T))
        if check_reinit(new_state) and state.pose_provider is not None:
            new_state.pose = state.pose_provider(idx)
            new_state.history.clear()
            new_state.status = "reinit"
    return new_state, new_state.pose


def track_sequence(init_pose: Pose, frames, predictor, config: TrackerConfig,
                   policy: ReinitPolicy = None, pose_provider=None):
    """Run the loop over an iterable of RgbdImage frames.

    Returns (poses, statuses), one entry per frame. I/O failures while pulling
    frames are re-raised with the frame index attached.
    """
    state = init_state(init_pose, predictor, config, policy, pose_provider)
    poses = []
    statuses = []
    it = iter(frames)
    idx = 0
    while True:
        try:
            frame = next(it)
        except StopIteration:
            break
        except OSError as e:
            raise type(e)(f"frame {idx}: {e}") from e
        state, pose = step(state, frame)
        poses.append(pose)
        statuses.append(state.status)
        idx += 1
    if not poses:
        raise ValueError("need at least one frame")
    return poses, statuses


def save_trajectory(path, poses, statuses) -> None:
    """CSV rows: frame index, the 16 row-major pose entries, status."""
    if len(poses) != len(statuses):
        raise ValueError("poses and statuses length mismatch")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame"] + [f"m{i}{j}" for i in range(4) for j in range(4)]
                        + ["status"])
        for idx, (pose, status) in enumerate(zip(poses, statuses)):
            vals = [f"{v:.17g}" for v in pose.matrix().reshape(-1)]
            writer.writerow([idx] + vals + [status])


def load_trajectory(path):
    poses = []
    statuses = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if len(header) != 18:
            raise ValueError("unexpected trajectory header")
        for row in reader:
            m = np.array([float(v) for v in row[1:17]]).reshape(4, 4)
            poses.append(Pose.from_matrix(m))
            statuses.append(row[17])
    return poses, statuses
