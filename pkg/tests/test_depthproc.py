import numpy as np
import pytest

from deltapose.depthproc import (
    AugmentParams,
    FilterParams,
    augment_depth,
    bilateral_filter,
    normalize_depth,
    normalize_input,
    to_input_tensor,
)
from deltapose.render import RgbdImage
from deltapose.se3 import Pose


def reference_bilateral(depth, params):
    """Direct-summation oracle, straight from the weight formula."""
    h, w = depth.shape
    out = np.zeros_like(depth)
    r = params.window // 2
    rf = params.hole_fill_window // 2
    smoothed = np.zeros_like(depth)
    for i in range(h):
        for j in range(w):
            if depth[i, j] <= 0:
                continue
            num = den = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    if not (0 <= ii < h and 0 <= jj < w):
                        continue
                    dn = depth[ii, jj]
                    if dn <= 0:
                        continue
                    ws = np.exp(-(di * di + dj * dj) / (2 * params.sigma_space ** 2))
                    wr = np.exp(-((dn - depth[i, j]) ** 2) / (2 * params.sigma_range ** 2))
                    num += ws * wr * dn
                    den += ws * wr
            smoothed[i, j] = num / den
    out[:] = smoothed
    for i in range(h):
        for j in range(w):
            if depth[i, j] > 0:
                continue
            vals = []
            for di in range(-rf, rf + 1):
                for dj in range(-rf, rf + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w and smoothed[ii, jj] > 0:
                        vals.append(smoothed[ii, jj])
            if len(vals) >= 0.25 * params.hole_fill_window ** 2:
                out[i, j] = np.median(vals)
    return out


# ---------------------------------------------------------------------------
# augment_depth
# ---------------------------------------------------------------------------

def test_augment_identity_when_disabled():
    rng = np.random.default_rng(0)
    depth = np.array([[0.5, 0.0], [1.2, 0.9]])
    out = augment_depth(depth, AugmentParams(gauss_sigma=0.0, corrupt_prob=0.0), rng)
    np.testing.assert_array_equal(out, depth)


def test_augment_full_corruption_zeroes_everything():
    rng = np.random.default_rng(1)
    depth = np.full((10, 10), 0.8)
    out = augment_depth(depth, AugmentParams(gauss_sigma=0.0, corrupt_prob=1.0), rng)
    np.testing.assert_array_equal(out, 0.0)


def test_augment_noise_statistics():
    # 176^2 samples of N(0, 0.003^2) around a constant 1.0 map
    rng = np.random.default_rng(2)
    n = 176
    depth = np.ones((n, n))
    out = augment_depth(depth, AugmentParams(gauss_sigma=0.003, corrupt_prob=0.0), rng)
    sigma = 0.003
    assert abs(out.mean() - 1.0) < 3 * sigma / n
    assert abs(out.std() - sigma) < 0.1 * sigma


def test_augment_corruption_rate():
    rng = np.random.default_rng(3)
    depth = np.ones((200, 200))
    out = augment_depth(depth, AugmentParams(gauss_sigma=0.0, corrupt_prob=0.1), rng)
    frac = (out == 0).mean()
    assert abs(frac - 0.1) < 0.01


def test_augment_preserves_invalid_and_nonnegativity():
    rng = np.random.default_rng(4)
    depth = np.full((50, 50), 0.05)
    depth[10:20, 10:20] = 0.0
    out = augment_depth(depth, AugmentParams(gauss_sigma=0.5, corrupt_prob=0.0), rng)
    assert np.all(out[10:20, 10:20] == 0.0)  # invalid pixels untouched
    assert np.all(out >= 0.0)


def test_augment_param_validation():
    with pytest.raises(ValueError):
        AugmentParams(gauss_sigma=-0.1)
    with pytest.raises(ValueError):
        AugmentParams(corrupt_prob=1.5)


# ---------------------------------------------------------------------------
# bilateral_filter
# ---------------------------------------------------------------------------

def test_bilateral_matches_direct_summation_oracle():
    rng = np.random.default_rng(5)
    depth = 1.0 + 0.01 * rng.normal(size=(16, 16))
    depth[rng.random((16, 16)) < 0.15] = 0.0
    depth[3:5, 3:5] += 0.8  # a structure edge
    params = FilterParams(window=5, sigma_space=2.0, sigma_range=0.015, hole_fill_window=5)
    got = bilateral_filter(depth, params)
    want = reference_bilateral(depth, params)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_bilateral_constant_map_unchanged():
    depth = np.full((20, 20), 0.75)
    out = bilateral_filter(depth, FilterParams())
    np.testing.assert_allclose(out, 0.75, atol=1e-12)


def test_bilateral_preserves_step_edge():
    depth = np.full((20, 20), 1.0)
    depth[:, 10:] = 2.0
    out = bilateral_filter(depth, FilterParams(sigma_range=0.015))
    # range kernel at a 1 m jump: exp(-1/(2*0.015^2)) ~ 0, so no cross-edge mixing
    assert np.abs(out - depth).max() < 1e-3


def test_bilateral_fills_single_hole_with_median():
    depth = np.full((11, 11), 1.0)
    depth[5, 5] = 0.0
    out = bilateral_filter(depth, FilterParams())
    assert out[5, 5] == pytest.approx(1.0)


def test_bilateral_leaves_starved_holes_empty():
    depth = np.zeros((21, 21))
    depth[0, 0] = 1.0  # one valid pixel: every center-region window stays under 25%
    out = bilateral_filter(depth, FilterParams())
    assert out[10, 10] == 0.0


def test_bilateral_smooths_noise():
    rng = np.random.default_rng(6)
    depth = 1.0 + 0.005 * rng.normal(size=(40, 40))
    out = bilateral_filter(depth, FilterParams())
    assert np.abs(out - 1.0).std() < np.abs(depth - 1.0).std() * 0.6


def test_bilateral_second_pass_changes_little():
    # a map already in the filter's range: constant with scattered holes.
    # pass 1 fills the holes (large change); pass 2 must be a near-fixed-point.
    rng = np.random.default_rng(7)
    depth = np.full((30, 30), 0.9)
    depth[rng.random((30, 30)) < 0.1] = 0.0
    params = FilterParams()
    once = bilateral_filter(depth, params)
    twice = bilateral_filter(once, params)
    first_change = np.abs(once - depth).sum()
    second_change = np.abs(twice - once).sum()
    assert first_change > 0
    assert second_change < 0.01 * first_change


def test_filter_param_validation():
    with pytest.raises(ValueError):
        FilterParams(window=4)
    with pytest.raises(ValueError):
        FilterParams(hole_fill_window=1)
    with pytest.raises(ValueError):
        FilterParams(sigma_range=0.0)


# ---------------------------------------------------------------------------
# input normalization
# ---------------------------------------------------------------------------

def test_normalize_depth_formula():
    z_c = 0.6
    depth = np.array([[0.6, 0.65], [0.0, 0.9]])
    out = normalize_depth(depth, z_c)
    assert out[0, 0] == 0.0        # exactly at center
    assert out[0, 1] == pytest.approx(0.5)   # +5 cm -> 0.5
    assert out[1, 0] == -2.0       # hole
    assert out[1, 1] == 2.0        # +30 cm clamps at 2


def test_normalize_depth_invertible_when_unclamped():
    rng = np.random.default_rng(8)
    z_c = 0.7
    depth = z_c + rng.uniform(-0.19, 0.19, size=(12, 12))
    n = normalize_depth(depth, z_c)
    np.testing.assert_allclose(n * 0.1 + z_c, depth, atol=1e-12)


def test_input_tensor_layout():
    rng = np.random.default_rng(9)
    rgb = rng.uniform(size=(8, 8, 3))
    depth = np.full((8, 8), 0.55)
    t = to_input_tensor(RgbdImage(rgb, depth), z_center=0.5)
    assert t.shape == (4, 8, 8)
    assert t.dtype == np.float32
    np.testing.assert_allclose(t[0], rgb[:, :, 0], atol=1e-7)
    np.testing.assert_allclose(t[3], 0.5, atol=1e-7)


def test_normalize_input_uses_prev_pose_depth():
    rgb = np.zeros((4, 4, 3))
    prev = RgbdImage(rgb, np.full((4, 4), 0.8))
    curr = RgbdImage(rgb, np.full((4, 4), 0.85))
    T_prev = Pose(np.eye(3), np.array([0.0, 0.0, 0.8]))
    a, b = normalize_input(prev, curr, T_prev)
    np.testing.assert_allclose(a[3], 0.0, atol=1e-7)
    np.testing.assert_allclose(b[3], 0.5, atol=1e-7)


def test_normalize_input_shape_mismatch_raises():
    a = RgbdImage(np.zeros((4, 4, 3)), np.zeros((4, 4)))
    b = RgbdImage(np.zeros((5, 5, 3)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        normalize_input(a, b, Pose.identity())
