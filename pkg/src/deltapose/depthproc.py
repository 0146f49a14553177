"""Depth-domain alignment between synthetic and observed images.

Synthetic depth is corrupted toward sensor statistics at train time
(augment_depth); observed depth is smoothed and hole-filled toward the clean
synthetic look at inference time (bilateral_filter). normalize_input turns
crops into the 4-channel tensors the network consumes.

Depth maps are float64 meters with 0 marking invalid pixels throughout.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .render import RgbdImage
from .se3 import Pose

DEPTH_UNIT = 0.1       # meters per unit of the normalized depth channel
DEPTH_CLAMP = 2.0      # normalized channel lives in [-2, 2]; invalid pixels sit at -2


@dataclass(frozen=True)
class AugmentParams:
    gauss_sigma: float = 0.003    # meters
    corrupt_prob: float = 0.02    # per-pixel dropout probability

    def __post_init__(self):
        if self.gauss_sigma < 0:
            raise ValueError("gauss_sigma must be >= 0")
        if not 0.0 <= self.corrupt_prob <= 1.0:
            raise ValueError("corrupt_prob must be in [0, 1]")


@dataclass(frozen=True)
class FilterParams:
    window: int = 7               # bilateral window, odd
    sigma_space: float = 3.0      # pixels
    sigma_range: float = 0.015    # meters
    hole_fill_window: int = 7     # odd

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.hole_fill_window < 3 or self.hole_fill_window % 2 == 0:
            raise ValueError("hole_fill_window must be odd and >= 3")
        if self.sigma_space <= 0 or self.sigma_range <= 0:
            raise ValueError("filter sigmas must be positive")


def augment_depth(depth: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise plus random pixel dropout on the valid pixels only."""
    out = np.asarray(depth, dtype=np.float64).copy()
    valid = out > 0
    if params.gauss_sigma > 0:
        noise = rng.normal(0.0, params.gauss_sigma, size=out.shape)
        out[valid] = np.maximum(out[valid] + noise[valid], 0.0)
    if params.corrupt_prob > 0:
        drop = rng.random(out.shape) < params.corrupt_prob
        out[valid & drop] = 0.0
    return out


def _shifted_stack(padded: np.ndarray, window: int, h: int, w: int) -> np.ndarray:
    """All window offsets of a zero-padded map, stacked on a leading axis."""
    r = window // 2
    views = []
    for di in range(window):
        for dj in range(window):
            views.append(padded[di:di + h, dj:dj + w])
    return np.stack(views)


def bilateral_filter(depth: np.ndarray, params: FilterParams) -> np.ndarray:
    """Edge-preserving smoothing over valid pixels, then median hole filling.

    A hole (0-pixel) is filled with the median of the valid smoothed neighbors
    in hole_fill_window when at least 25% of that window is valid.
    """
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    valid = d > 0

    r = params.window // 2
    padded = np.pad(d, r)
    neigh = _shifted_stack(padded, params.window, h, w)
    neigh_valid = neigh > 0

    offs = np.arange(params.window) - r
    di, dj = np.meshgrid(offs, offs, indexing="ij")
    w_space = np.exp(-(di ** 2 + dj ** 2) / (2.0 * params.sigma_space ** 2)).reshape(-1, 1, 1)

    diff = neigh - d[None, :, :]
    w_range = np.exp(-(diff ** 2) / (2.0 * params.sigma_range ** 2))
    wgt = w_space * w_range * neigh_valid

    num = (wgt * neigh).sum(axis=0)
    den = wgt.sum(axis=0)
    smoothed = np.where(valid, num / np.where(den > 0, den, 1.0), 0.0)

    holes = ~valid
    if np.any(holes):
        rf = params.hole_fill_window // 2
        padded_s = np.pad(smoothed, rf)
        neigh_s = _shifted_stack(padded_s, params.hole_fill_window, h, w)
        stack_valid = neigh_s > 0
        count = stack_valid.sum(axis=0)
        enough = holes & (count >= 0.25 * params.hole_fill_window ** 2)
        if np.any(enough):
            cand = np.where(stack_valid, neigh_s, np.nan)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                med = np.nanmedian(cand, axis=0)
            smoothed[enough] = med[enough]
    return smoothed


def normalize_depth(depth: np.ndarray, z_center: float, scale: float = DEPTH_UNIT) -> np.ndarray:
    """(d - z_center)/scale on valid pixels, clamped to [-2, 2]; holes go to -2."""
    d = np.asarray(depth, dtype=np.float64)
    out = np.clip((d - z_center) / scale, -DEPTH_CLAMP, DEPTH_CLAMP)
    return np.where(d > 0, out, -DEPTH_CLAMP)


def to_input_tensor(image: RgbdImage, z_center: float, scale: float = DEPTH_UNIT) -> np.ndarray:
    """Pack a crop into the CHW float32 tensor the network consumes."""
    chans = np.concatenate([
        np.moveaxis(image.rgb, 2, 0),
        normalize_depth(image.depth, z_center, scale)[None, :, :],
    ])
    return np.ascontiguousarray(chans, dtype=np.float32)


def normalize_input(img_prev: RgbdImage, img_curr: RgbdImage, T_prev: Pose,
                    scale: float = DEPTH_UNIT) -> tuple[np.ndarray, np.ndarray]:
    """Both crops centered on the prior object depth; meshes are origin-centered
    so the object-center depth is T_prev's translation z."""
    if img_prev.rgb.shape != img_curr.rgb.shape:
        raise ValueError("crop pair shapes differ")
    z_c = float(T_prev.t[2])
    if not math.isfinite(z_c):
        raise ValueError("previous pose has non-finite depth")
    return to_input_tensor(img_prev, z_c, scale), to_input_tensor(img_curr, z_c, scale)
