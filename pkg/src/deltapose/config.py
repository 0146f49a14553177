"""Run configuration: one JSON document with a section per pipeline stage.

A document always carries every section fully populated; user files are
partial overlays merged onto the defaults and then schema-validated, so
unknown keys and type mistakes fail loudly before any work starts.
"""

import hashlib
import json
from importlib import resources

import jsonschema
import numpy as np

from . import datagen, depthproc, icp, net, tracker
from .geometry import CameraIntrinsics

SECTIONS = ("datagen", "net", "train", "tracker", "gn", "eval")

DEFAULT_INTRINSICS = CameraIntrinsics(fx=140.0, fy=140.0, cx=80.0, cy=60.0,
                                      width=160, height=120)


def load_schema(name: str = "run_config") -> dict:
    ref = resources.files("deltapose") / "schemas" / f"{name}.schema.json"
    return json.loads(ref.read_text())


def default_config() -> dict:
    return {
        "seed": 0,
        "datagen": {
            "scene": datagen.SceneConfig().to_dict(),
            "intrinsics": DEFAULT_INTRINSICS.to_dict(),
            "perturb": datagen.PerturbRange().to_dict(),
            "augment": {"gauss_sigma": 0.003, "corrupt_prob": 0.02},
            "motion": datagen.MotionParams().to_dict(),
            "count": 50,
            "n_frames": 30,
        },
        "net": net.NetConfig().to_dict(),
        "train": {
            "steps": 500,
            "lr": 1e-3,
            "lr_final": None,
            "batch_size": 32,
            "lam1": 1.0,
            "lam2": 1.0,
            "checkpoint_every": 0,
            "divergence_factor": 10.0,
        },
        "tracker": {
            "inner_iters": 1,
            "input_side": None,   # null = follow net.input_side
            "filter": {
                "window": 7,
                "sigma_space": 3.0,
                "sigma_range": 0.015,
                "hole_fill_window": 7,
            },
            "reinit": {
                "enabled": False,
                "rot_deg": 10.0,
                "trans": 0.01,
                "window": 10,
            },
        },
        "gn": {
            "max_iters": 20,
            "huber_delta": 0.01,
            "eps": 1e-8,
            "max_corr": 0.05,
        },
        "eval": {
            "max_threshold": 0.1,
            "steps": 100,
        },
    }


def validate_config(doc: dict) -> None:
    jsonschema.validate(doc, load_schema("run_config"))


def validate_report(summary: dict) -> None:
    """Self-check on emitted report JSON; a failure is an internal bug."""
    try:
        jsonschema.validate(summary, load_schema("report"))
    except jsonschema.ValidationError as e:
        raise RuntimeError(f"emitted report violates its schema: {e.message}") from e


def _merge(base, overlay, path=""):
    if not isinstance(overlay, dict) or not isinstance(base, dict):
        return overlay
    out = dict(base)
    for key, value in overlay.items():
        if key in base and isinstance(base[key], dict) and base[key] is not None:
            out[key] = _merge(base[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None) -> dict:
    """Defaults, overlaid with the JSON file at `path`, then validated."""
    doc = default_config()
    if path is not None:
        with open(path) as f:
            doc = _merge(doc, json.load(f))
    if seed is not None:
        doc["seed"] = int(seed)
    validate_config(doc)
    return doc


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def substream_seed(seed: int, name: str) -> int:
    """Stable per-purpose seed derived from the run seed; hash-based so
    adding a new stream never shifts the existing ones."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


# ---------------------------------------------------------------------------
# section builders
# ---------------------------------------------------------------------------

def scene_config(doc: dict, stream: str = "datagen") -> datagen.SceneConfig:
    scene = dict(doc["datagen"]["scene"])
    scene["seed"] = substream_seed(doc["seed"], stream)
    return datagen.SceneConfig.from_dict(scene)


def intrinsics(doc: dict) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(doc["datagen"]["intrinsics"])


def perturb_range(doc: dict) -> datagen.PerturbRange:
    return datagen.PerturbRange.from_dict(doc["datagen"]["perturb"])


def augment_params(doc: dict):
    section = doc["datagen"]["augment"]
    if section is None:
        return None
    return depthproc.AugmentParams(**section)


def motion_params(doc: dict) -> datagen.MotionParams:
    return datagen.MotionParams.from_dict(doc["datagen"]["motion"])


def net_config(doc: dict) -> net.NetConfig:
    return net.NetConfig.from_dict(doc["net"])


def train_params(doc: dict) -> net.TrainParams:
    return net.TrainParams(**doc["train"])


def gn_config(doc: dict) -> icp.GnConfig:
    return icp.GnConfig(**doc["gn"])


def filter_params(doc: dict) -> depthproc.FilterParams:
    return depthproc.FilterParams(**doc["tracker"]["filter"])


def reinit_policy(doc: dict, enabled=None) -> tracker.ReinitPolicy:
    section = dict(doc["tracker"]["reinit"])
    if enabled is not None:
        section["enabled"] = bool(enabled)
    return tracker.ReinitPolicy(**section)


def tracker_config(doc: dict, K: CameraIntrinsics, mesh) -> tracker.TrackerConfig:
    side = doc["tracker"]["input_side"]
    if side is None:
        side = doc["net"]["input_side"]
    return tracker.TrackerConfig(K=K, mesh=mesh, input_side=int(side),
                                 inner_iters=int(doc["tracker"]["inner_iters"]),
                                 filter_params=filter_params(doc))
