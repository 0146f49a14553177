"""Residual-pose regression network built on the autodiff engine.

Two convolutional encoders with disjoint weights digest the rendered (prev)
and observed (curr) crops; features are concatenated, fused by one conv,
pooled, and read out by separate translation and rotation heads. The loss is
lam1 * ||rot_err||_2 + lam2 * ||t_err||_2 (plain norms, not squared).

Finite-difference checking re-runs only the network suffix downstream of the
probed parameter, using activations cached from a baseline pass; that keeps
full-net checks fast enough to run routinely.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import se3
from .se3 import Pose, Twist

LEAKY_ALPHA = 0.1
ROT_REPS = ("se3_w", "quaternion")
CHECKPOINT_MAGIC = b"DPOSENET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_side: int = 176
    channels: tuple = (16, 32, 64, 64)
    fuse_channels: int = 64
    head_hidden: int = 32
    rot_rep: str = "se3_w"
    shared_encoder: bool = False
    use_depth: bool = True

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ValueError("need at least one encoder stage")
        if self.rot_rep not in ROT_REPS:
            raise ValueError(f"rot_rep must be one of {ROT_REPS}")
        if self.input_side < 2 ** len(self.channels):
            raise ValueError("input side too small for the stage count")

    @property
    def in_channels(self) -> int:
        return 4 if self.use_depth else 3

    @property
    def rot_dim(self) -> int:
        return 4 if self.rot_rep == "quaternion" else 3

    def to_dict(self) -> dict:
        return {"input_side": self.input_side, "channels": list(self.channels),
                "fuse_channels": self.fuse_channels, "head_hidden": self.head_hidden,
                "rot_rep": self.rot_rep, "shared_encoder": self.shared_encoder,
                "use_depth": self.use_depth}

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        d = dict(d)
        d["channels"] = tuple(d.get("channels", (16, 32, 64, 64)))
        return NetConfig(**d)


@dataclass
class Prediction:
    t: np.ndarray      # (3,) or (N, 3)
    rot: np.ndarray    # (rot_dim,) or (N, rot_dim)


def _encoder_prefixes(cfg: NetConfig) -> tuple[str, str]:
    if cfg.shared_encoder:
        return "enc", "enc"
    return "enc_a", "enc_b"


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict:
    """He-initialized float32 parameter dict keyed by layer name."""
    params = {}

    def conv(name, c_in, c_out):
        std = np.sqrt(2.0 / (c_in * 9))
        params[f"{name}.w"] = rng.normal(0.0, std, (c_out, c_in, 3, 3)).astype(np.float32)
        params[f"{name}.b"] = np.zeros(c_out, dtype=np.float32)

    def fc(name, f_in, f_out):
        std = np.sqrt(2.0 / f_in)
        params[f"{name}.w"] = rng.normal(0.0, std, (f_out, f_in)).astype(np.float32)
        params[f"{name}.b"] = np.zeros(f_out, dtype=np.float32)

    prefixes = ("enc",) if cfg.shared_encoder else ("enc_a", "enc_b")
    for prefix in prefixes:
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.channels):
            conv(f"{prefix}.{i}", c_in, c_out)
            c_in = c_out
    conv("fuse", 2 * cfg.channels[-1], cfg.fuse_channels)
    for head, out in (("head_t", 3), ("head_rot", cfg.rot_dim)):
        fc(f"{head}.0", cfg.fuse_channels, cfg.head_hidden)
        fc(f"{head}.1", cfg.head_hidden, out)
    return params


def param_count(params: dict) -> int:
    return sum(v.size for v in params.values())


def _prep_input(x: np.ndarray, cfg: NetConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[2] != cfg.input_side or x.shape[3] != cfg.input_side:
        raise ValueError(f"input side {x.shape[2]}x{x.shape[3]} does not match "
                         f"config {cfg.input_side}")
    if x.shape[1] == cfg.in_channels:
        return x
    if not cfg.use_depth and x.shape[1] == 4:
        return np.ascontiguousarray(x[:, :3])  # depth channel dropped, never read
    raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")


# ---------------------------------------------------------------------------
# graph forward / loss / gradients
# ---------------------------------------------------------------------------

def _branch_graph(ptens, prefix, x, cfg):
    t = x
    for i in range(len(cfg.channels)):
        t = ad.conv2d(t, ptens[f"{prefix}.{i}.w"], ptens[f"{prefix}.{i}.b"], stride=2, pad=1)
        t = ad.leaky_relu(t, LEAKY_ALPHA)
    return t


def _head_graph(ptens, name, pooled):
    h = ad.leaky_relu(ad.linear(pooled, ptens[f"{name}.0.w"], ptens[f"{name}.0.b"]), LEAKY_ALPHA)
    return ad.linear(h, ptens[f"{name}.1.w"], ptens[f"{name}.1.b"])


def _forward_graph(params, cfg, x_prev, x_curr):
    ptens = {k: ad.Tensor(v) for k, v in params.items()}
    pa, pb = _encoder_prefixes(cfg)
    feat_a = _branch_graph(ptens, pa, ad.Tensor(x_prev), cfg)
    feat_b = _branch_graph(ptens, pb, ad.Tensor(x_curr), cfg)
    fused = ad.leaky_relu(ad.conv2d(ad.concat_channels(feat_a, feat_b),
                                    ptens["fuse.w"], ptens["fuse.b"], stride=1, pad=1),
                          LEAKY_ALPHA)
    pooled = ad.global_avg_pool(fused)
    t_out = _head_graph(ptens, "head_t", pooled)
    rot_out = _head_graph(ptens, "head_rot", pooled)
    return ptens, feat_a, feat_b, t_out, rot_out


def forward(params: dict, x_prev, x_curr, cfg: NetConfig) -> Prediction:
    xp = _prep_input(x_prev, cfg)
    xc = _prep_input(x_curr, cfg)
    single = np.asarray(x_prev).ndim == 3
    _, _, t_out, rot_out = _forward_graph(params, cfg, xp, xc)[1:]
    t = t_out.data.astype(np.float64)
    rot = rot_out.data.astype(np.float64)
    if single:
        return Prediction(t[0], rot[0])
    return Prediction(t, rot)


def encode_features(params: dict, x_prev, x_curr, cfg: NetConfig):
    """Branch outputs before fusion; used to audit encoder disentanglement."""
    xp = _prep_input(x_prev, cfg)
    xc = _prep_input(x_curr, cfg)
    _, feat_a, feat_b, _, _ = _forward_graph(params, cfg, xp, xc)
    return feat_a.data.copy(), feat_b.data.copy()


def loss_value(pred: Prediction, t_target, rot_target, lam1: float = 1.0,
               lam2: float = 1.0) -> float:
    """lam1*||rot_err|| + lam2*||t_err||, averaged when batched."""
    t_err = np.atleast_2d(np.asarray(pred.t, dtype=np.float64)
                          - np.asarray(t_target, dtype=np.float64))
    r_err = np.atleast_2d(np.asarray(pred.rot, dtype=np.float64)
                          - np.asarray(rot_target, dtype=np.float64))
    per = lam1 * np.linalg.norm(r_err, axis=1) + lam2 * np.linalg.norm(t_err, axis=1)
    return float(per.mean())


def compute_loss_and_grads(params, cfg, x_prev, x_curr, t_target, rot_target,
                           lam1=1.0, lam2=1.0):
    xp = _prep_input(x_prev, cfg)
    xc = _prep_input(x_curr, cfg)
    ptens, _, _, t_out, rot_out = _forward_graph(params, cfg, xp, xc)
    t_err = ad.sub(t_out, ad.Tensor(np.asarray(t_target, dtype=np.float32)))
    r_err = ad.sub(rot_out, ad.Tensor(np.asarray(rot_target, dtype=np.float32)))
    loss = ad.weighted_sum_mean(ad.norm_rows(r_err), ad.norm_rows(t_err), lam1, lam2)
    ad.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in ptens.items()}
    return float(loss.data), grads


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

class _FdEvaluator:
    """Loss re-evaluation that only recomputes downstream of the probed layer."""

    def __init__(self, params, cfg, xp, xc, t_target, rot_target, lam1, lam2):
        self.params = dict(params)
        self.cfg = cfg
        # difference probes resolve loss changes ~h*|g|; 32-bit forward rounding
        # would drown small gradients, so accumulate activations in 64-bit
        # (weights stay 32-bit)
        self.xa = np.asarray(xp, dtype=np.float64)
        self.xb = np.asarray(xc, dtype=np.float64)
        self.t_target = np.asarray(t_target, dtype=np.float64)
        self.rot_target = np.asarray(rot_target, dtype=np.float64)
        self.lam1 = lam1
        self.lam2 = lam2
        self.n_stages = len(cfg.channels)
        pa, pb = _encoder_prefixes(cfg)
        self.prefix_a = pa
        self.prefix_b = pb
        self.a_acts = self._run_branch(pa, self.xa, 0)
        self.b_acts = self._run_branch(pb, self.xb, 0)
        self.pooled = self._fuse_pool(self.a_acts[-1], self.b_acts[-1])
        self.t_norms = self._head_norms("head_t", self.pooled, self.t_target)
        self.rot_norms = self._head_norms("head_rot", self.pooled, self.rot_target)

    def _stage(self, prefix, i, x):
        out, _ = ad.conv2d_forward(x, self.params[f"{prefix}.{i}.w"],
                                   self.params[f"{prefix}.{i}.b"], stride=2, pad=1)
        return ad.leaky_relu_forward(out, LEAKY_ALPHA)[0]

    def _run_branch(self, prefix, x0, from_stage, acts=None):
        x = x0 if from_stage == 0 else acts[from_stage - 1]
        outs = [] if acts is None else list(acts[:from_stage])
        for i in range(from_stage, self.n_stages):
            x = self._stage(prefix, i, x)
            outs.append(x)
        return outs

    def _fuse_pool(self, feat_a, feat_b):
        fused_in = np.concatenate([feat_a, feat_b], axis=1)
        out, _ = ad.conv2d_forward(fused_in, self.params["fuse.w"],
                                   self.params["fuse.b"], stride=1, pad=1)
        out = ad.leaky_relu_forward(out, LEAKY_ALPHA)[0]
        return ad.gap_forward(out)[0]

    def _head_norms(self, name, pooled, target):
        h, _ = ad.linear_forward(pooled, self.params[f"{name}.0.w"],
                                 self.params[f"{name}.0.b"])
        h = ad.leaky_relu_forward(h, LEAKY_ALPHA)[0]
        out, _ = ad.linear_forward(h, self.params[f"{name}.1.w"],
                                   self.params[f"{name}.1.b"])
        err = out.astype(np.float64) - target
        return np.sqrt((err ** 2).sum(axis=1))

    def _loss_from(self, t_norms, rot_norms) -> float:
        return float((self.lam1 * rot_norms + self.lam2 * t_norms).mean())

    def baseline_loss(self) -> float:
        return self._loss_from(self.t_norms, self.rot_norms)

    def loss_with(self, name: str, data: np.ndarray) -> float:
        old = self.params[name]
        self.params[name] = data
        try:
            if name.startswith("head_t."):
                return self._loss_from(
                    self._head_norms("head_t", self.pooled, self.t_target),
                    self.rot_norms)
            if name.startswith("head_rot."):
                return self._loss_from(
                    self.t_norms,
                    self._head_norms("head_rot", self.pooled, self.rot_target))
            if name.startswith("fuse."):
                pooled = self._fuse_pool(self.a_acts[-1], self.b_acts[-1])
            else:
                prefix, stage = name.split(".")[:2]
                stage = int(stage)
                feat_a = self.a_acts[-1]
                feat_b = self.b_acts[-1]
                if prefix == self.prefix_a:
                    feat_a = self._run_branch(prefix, self.xa, stage, self.a_acts)[-1]
                if prefix == self.prefix_b:
                    feat_b = self._run_branch(prefix, self.xb, stage, self.b_acts)[-1]
                pooled = self._fuse_pool(feat_a, feat_b)
            return self._loss_from(
                self._head_norms("head_t", pooled, self.t_target),
                self._head_norms("head_rot", pooled, self.rot_target))
        finally:
            self.params[name] = old


def grad_check(params, cfg, x_prev, x_curr, t_target, rot_target,
               h: float = 1e-3, lam1: float = 1.0, lam2: float = 1.0,
               n_probes: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    Probes a random parameter subset (1% of parameters, at least 100). The
    batch must sit away from the norm kink (loss > 1e-3).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    xp = _prep_input(x_prev, cfg)
    xc = _prep_input(x_curr, cfg)
    loss, grads = compute_loss_and_grads(params, cfg, xp, xc, t_target, rot_target,
                                         lam1, lam2)
    if loss <= 1e-3:
        raise ValueError(f"batch loss {loss} too close to the norm kink")

    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    if n_probes is None:
        n_probes = max(100, int(round(0.01 * total)))
    n_probes = min(n_probes, total)
    flat_picks = np.sort(rng.choice(total, size=n_probes, replace=False))

    ev = _FdEvaluator(params, cfg, xp, xc, t_target, rot_target, lam1, lam2)
    worst = 0.0
    for flat in flat_picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        local = int(flat - offsets[k])
        arr = params[name]
        base = float(arr.flat[local])
        plus = arr.astype(np.float64)
        plus.flat[local] = base + h
        minus = arr.astype(np.float64)
        minus.flat[local] = base - h
        fd = (ev.loss_with(name, plus) - ev.loss_with(name, minus)) / (2.0 * h)
        g = float(grads[name].flat[local])
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainParams:
    steps: int
    lr: float = 1e-3
    lr_final: float | None = None   # geometric decay target; None = constant lr
    batch_size: int = 32
    lam1: float = 1.0
    lam2: float = 1.0
    checkpoint_every: int = 0
    divergence_factor: float = 10.0


@dataclass
class TrainingArrays:
    """In-memory dataset; image tensors may be stored float16 to save RAM."""
    x_prev: np.ndarray    # (N, C, S, S)
    x_curr: np.ndarray
    t: np.ndarray         # (N, 3) float32
    rot: np.ndarray       # (N, rot_dim) float32

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x_prev) == len(self.x_curr) == len(self.rot) == n):
            raise ValueError("training array lengths differ")
        self.t = np.asarray(self.t, dtype=np.float32)
        self.rot = np.asarray(self.rot, dtype=np.float32)

    def __len__(self):
        return len(self.t)


def smoothed_curve(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average; shorter prefixes average what exists."""
    losses = np.asarray(losses, dtype=np.float64)
    out = np.empty_like(losses)
    c = np.concatenate([[0.0], np.cumsum(losses)])
    for i in range(len(losses)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def train(cfg: NetConfig, data: TrainingArrays, opt: TrainParams,
          rng: np.random.Generator, checkpoint_path=None,
          params: dict | None = None) -> tuple[dict, list]:
    if len(data) < 1:
        raise ValueError("training needs at least one pair")
    params = init_params(cfg, rng) if params is None else params
    adam = ad.Adam(params, lr=opt.lr)
    losses: list[float] = []
    initial = None
    for step in range(opt.steps):
        idx = rng.integers(0, len(data), size=opt.batch_size)
        xp = data.x_prev[idx].astype(np.float32)
        xc = data.x_curr[idx].astype(np.float32)
        loss, grads = compute_loss_and_grads(params, cfg, xp, xc,
                                             data.t[idx], data.rot[idx],
                                             opt.lam1, opt.lam2)
        if opt.lr_final is not None and opt.steps > 1:
            lr_t = opt.lr * (opt.lr_final / opt.lr) ** (step / (opt.steps - 1))
        else:
            lr_t = opt.lr
        adam.step(params, grads, lr_t)
        losses.append(loss)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}: loss is not finite")
        # baseline is the pre-update loss; later steps must not blow far past it
        if initial is None:
            initial = float(loss)
        if len(losses) >= 10:
            recent = float(np.mean(losses[-10:]))
            if recent > opt.divergence_factor * max(initial, 1e-9):
                raise RuntimeError(
                    f"training diverged at step {step}: recent loss {recent:.4g} "
                    f"vs initial {initial:.4g} (factor {opt.divergence_factor})")
        if (opt.checkpoint_every and checkpoint_path
                and (step + 1) % opt.checkpoint_every == 0):
            save_checkpoint(checkpoint_path, cfg, params)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, cfg, params)
    return params, losses


# ---------------------------------------------------------------------------
# prediction target plumbing
# ---------------------------------------------------------------------------

def rotation_target(delta: Twist, cfg: NetConfig) -> np.ndarray:
    """Per-pair rotation label in the configured representation."""
    if cfg.rot_rep == "se3_w":
        return np.asarray(delta.w, dtype=np.float32)
    q = se3.pose_rot_to_quat(Pose(se3.rotation_exp(np.asarray(delta.w)), np.zeros(3)))
    return q.as_array().astype(np.float32)


def predict_delta(params: dict, x_prev, x_curr, cfg: NetConfig) -> Twist:
    pred = forward(params, x_prev, x_curr, cfg)
    t = np.asarray(pred.t, dtype=np.float64).reshape(3)
    rot = np.asarray(pred.rot, dtype=np.float64).reshape(-1)
    if cfg.rot_rep == "quaternion":
        w = se3.quat_log(rot)    # normalizes; raises on degenerate quaternion
    else:
        w = rot
    return Twist(t, w)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: NetConfig, params: dict) -> None:
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int, path, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise ValueError(f"{path}: truncated checkpoint ({what})")
    return raw


def load_checkpoint(path) -> tuple[NetConfig, dict]:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, path, "config length"))
        cfg = NetConfig.from_dict(json.loads(_read_exact(f, cfg_len, path, "config").decode()))
        (n_params,) = struct.unpack("<I", _read_exact(f, 4, path, "parameter count"))
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, path, "name length"))
            name = _read_exact(f, name_len, path, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, path, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, path, "shape"))
            count = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(f, 4 * count, path, f"blob for {name}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return cfg, params
