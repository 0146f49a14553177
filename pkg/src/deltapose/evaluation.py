"""Pose accuracy metrics (ADD, ADD-S, threshold curves, AUC) and sequence
evaluation reports."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .geometry import CameraIntrinsics, TriangleMesh
from .se3 import Pose

# brute-force pairwise search up to this many vertices, kd-tree above;
# both are exact nearest neighbors
BRUTE_FORCE_LIMIT = 2000

DEFAULT_MAX_THRESHOLD = 0.1   # meters
DEFAULT_STEPS = 100


def add_error(mesh: TriangleMesh, gt: Pose, est: Pose) -> float:
    """Mean distance between corresponding model points under the two poses."""
    if len(mesh.vertices) == 0:
        raise ValueError("mesh has no vertices")
    a = se3.transform_points(gt, mesh.vertices)
    b = se3.transform_points(est, mesh.vertices)
    return float(np.linalg.norm(a - b, axis=1).mean())


def adds_error(mesh: TriangleMesh, gt: Pose, est: Pose) -> float:
    """Mean nearest-neighbor distance; the symmetric-object variant of ADD."""
    if len(mesh.vertices) == 0:
        raise ValueError("mesh has no vertices")
    a = se3.transform_points(gt, mesh.vertices)
    b = se3.transform_points(est, mesh.vertices)
    if len(a) <= BRUTE_FORCE_LIMIT:
        diff = a[:, None, :] - b[None, :, :]
        nearest = np.linalg.norm(diff, axis=2).min(axis=1)
    else:
        nearest, _ = cKDTree(b).query(a, k=1)
    return float(np.mean(nearest))


def adds_property(mesh: TriangleMesh, gt: Pose, est: Pose) -> bool:
    """ADD-S can never exceed ADD: the identity pairing is one candidate."""
    return adds_error(mesh, gt, est) <= add_error(mesh, gt, est) + 1e-12


@dataclass(frozen=True)
class EvalCurve:
    """Accuracy as a function of the error threshold, plus its mean (AUC)."""

    thresholds: np.ndarray   # ascending, meters
    accuracy: np.ndarray     # fraction of frames below each threshold
    auc: float

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        a = np.asarray(self.accuracy, dtype=np.float64)
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "accuracy", a)
        if t.shape != a.shape or t.ndim != 1:
            raise ValueError("thresholds and accuracy must be 1-d and aligned")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly ascending")
        if np.any(a < 0) or np.any(a > 1) or np.any(np.diff(a) < 0):
            raise ValueError("accuracy must be nondecreasing within [0, 1]")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc must lie in [0, 1]")


def auc(errors, max_threshold: float = DEFAULT_MAX_THRESHOLD,
        steps: int = DEFAULT_STEPS) -> EvalCurve:
    """Left-Riemann accuracy curve over `steps` evenly spaced thresholds.

    accuracy(t_k) counts errors strictly below t_k = k*max/steps, k=1..steps;
    the AUC is the mean of the accuracies.
    """
    errs = np.asarray(list(errors), dtype=np.float64)
    if errs.size == 0:
        raise ValueError("no errors to integrate")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if max_threshold <= 0:
        raise ValueError("max_threshold must be positive")
    thresholds = max_threshold * np.arange(1, steps + 1) / steps
    accuracy = (errs[None, :] < thresholds[:, None]).mean(axis=1)
    return EvalCurve(thresholds, accuracy, float(accuracy.mean()))


# ---------------------------------------------------------------------------
# sequence datasets
# ---------------------------------------------------------------------------

@dataclass
class SequenceDataset:
    """One recorded tracking sequence: intrinsics, frame files, true poses."""

    intrinsics: CameraIntrinsics
    rgb_paths: list
    depth_paths: list
    poses: list
    mesh_id: str = "target"

    def __post_init__(self):
        n = len(self.poses)
        if not (len(self.rgb_paths) == len(self.depth_paths) == n):
            raise ValueError("frame file and pose counts disagree")
        if n == 0:
            raise ValueError("sequence is empty")
        for i, T in enumerate(self.poses):
            if not T.is_valid(tol=1e-6):
                raise ValueError(f"pose {i} is not a valid rigid transform")

    def __len__(self):
        return len(self.poses)


def load_sequence(seq_dir) -> SequenceDataset:
    """Read the on-disk layout written by the sequence generator."""
    seq = Path(seq_dir)
    K = CameraIntrinsics.load(seq / "intrinsics.json")
    poses = se3.load_poses(seq / "gt_poses.txt")
    mesh_id = "target"
    manifest = seq / "manifest.json"
    if manifest.exists():
        with open(manifest) as f:
            mesh_id = json.load(f).get("config", {}).get("scene", {}) \
                          .get("target", "target")
    rgb_paths, depth_paths = [], []
    for k in range(len(poses)):
        rgb = seq / "frames" / f"{k:06d}_rgb.png"
        depth = seq / "frames" / f"{k:06d}_depth.png"
        for p in (rgb, depth):
            if not p.exists():
                raise FileNotFoundError(f"frame {k:06d}: missing {p}")
        rgb_paths.append(rgb)
        depth_paths.append(depth)
    return SequenceDataset(K, rgb_paths, depth_paths, poses, mesh_id)


def iter_frames(dataset: SequenceDataset):
    """Yield RgbdImage frames; import is local to avoid a render dependency
    for metric-only users."""
    from . import render as rend
    scale = dataset.intrinsics.depth_scale
    for rgb_path, depth_path in zip(dataset.rgb_paths, dataset.depth_paths):
        yield rend.RgbdImage(rend.load_rgb(rgb_path),
                             rend.load_depth(depth_path, scale))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_frame_add: np.ndarray
    per_frame_adds: np.ndarray
    curve_add: EvalCurve
    curve_adds: EvalCurve
    max_threshold: float
    steps: int

    @property
    def auc_add(self) -> float:
        return self.curve_add.auc

    @property
    def auc_adds(self) -> float:
        return self.curve_adds.auc

    def summary(self) -> dict:
        return {
            "n_frames": int(len(self.per_frame_add)),
            "auc_add": self.auc_add,
            "auc_adds": self.auc_adds,
            "mean_add": float(self.per_frame_add.mean()),
            "mean_adds": float(self.per_frame_adds.mean()),
            "max_add": float(self.per_frame_add.max()),
            "max_adds": float(self.per_frame_adds.max()),
            "max_threshold": self.max_threshold,
            "steps": self.steps,
        }


def evaluate(trajectory, dataset: SequenceDataset, mesh: TriangleMesh,
             max_threshold: float = DEFAULT_MAX_THRESHOLD,
             steps: int = DEFAULT_STEPS) -> EvalReport:
    """Score an estimated trajectory against the dataset's true poses."""
    if len(trajectory) != len(dataset):
        raise ValueError(f"trajectory has {len(trajectory)} poses, "
                         f"dataset has {len(dataset)} frames")
    adds = np.array([add_error(mesh, g, e)
                     for g, e in zip(dataset.poses, trajectory)])
    addss = np.array([adds_error(mesh, g, e)
                      for g, e in zip(dataset.poses, trajectory)])
    return EvalReport(adds, addss, auc(adds, max_threshold, steps),
                      auc(addss, max_threshold, steps), max_threshold, steps)


def write_report(report: EvalReport, out_dir) -> dict:
    """Emit report.json plus per-frame and curve CSVs; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    with open(out / "report.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "per_frame.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "add", "adds"])
        for i, (a, s) in enumerate(zip(report.per_frame_add,
                                       report.per_frame_adds)):
            writer.writerow([i, f"{a:.17g}", f"{s:.17g}"])
    with open(out / "curve.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "accuracy_add", "accuracy_adds"])
        for t, a, s in zip(report.curve_add.thresholds,
                           report.curve_add.accuracy,
                           report.curve_adds.accuracy):
            writer.writerow([f"{t:.17g}", f"{a:.17g}", f"{s:.17g}"])
    return summary
