"""Depth ICP refinement: fixed point, recovery, robustness, and error paths."""

import math

import numpy as np
import pytest

from deltapose import geometry, icp, render, se3
from deltapose.icp import GnConfig
from deltapose.se3 import Pose, Twist


K = geometry.CameraIntrinsics(width=160, height=120, fx=150.0, fy=150.0,
                              cx=80.0, cy=60.0)
K_BIG = geometry.CameraIntrinsics(width=320, height=240, fx=300.0, fy=300.0,
                                  cx=160.0, cy=120.0)


def _box():
    return geometry.make_box((0.12, 0.09, 0.06))


def _pose_error(Ta: Pose, Tb: Pose):
    dR = Ta.R.T @ Tb.R
    ang = np.linalg.norm(se3.rotation_log(dR))
    return math.degrees(ang), float(np.linalg.norm(Ta.t - Tb.t))


class TestConfig:
    def test_defaults(self):
        cfg = GnConfig()
        assert cfg.max_iters == 20
        assert cfg.huber_delta == 0.01
        assert cfg.max_corr == 0.05

    def test_infinite_delta_is_allowed(self):
        # plain least squares arm
        GnConfig(huber_delta=math.inf)

    @pytest.mark.parametrize("kwargs", [
        {"max_iters": 0},
        {"max_iters": -3},
        {"huber_delta": 0.0},
        {"huber_delta": -0.01},
        {"eps": 0.0},
        {"max_corr": -1.0},
    ])
    def test_rejects_nonpositive_fields(self, kwargs):
        with pytest.raises(ValueError):
            GnConfig(**kwargs)


class TestFixedPoint:
    def test_exact_observation_gives_zero_twist(self):
        mesh = _box()
        T_prev = Pose(se3.rotation_exp(np.array([0.4, 0.3, 0.1])),
                      np.array([0.01, -0.02, 0.5]))
        obs = render.render(mesh, K, T_prev)
        out = icp.gn_predict(mesh, T_prev, obs, K)
        assert np.linalg.norm(out.t) <= 1e-10
        assert np.linalg.norm(out.w) <= 1e-10

    def test_deterministic(self):
        mesh = _box()
        T_prev = Pose(se3.rotation_exp(np.array([0.2, -0.3, 0.5])),
                      np.array([0.0, 0.01, 0.45]))
        T_true = se3.compose(T_prev, se3.exp(Twist(
            np.array([0.004, -0.002, 0.003]), np.array([0.03, 0.02, -0.04]))))
        obs = render.render(mesh, K, T_true)
        a = icp.gn_predict(mesh, T_prev, obs, K)
        b = icp.gn_predict(mesh, T_prev, obs, K)
        assert np.array_equal(a.t, b.t)
        assert np.array_equal(a.w, b.w)


class TestRecovery:
    def test_recovers_five_degree_one_cm_perturbation(self):
        mesh = _box()
        T_prev = Pose(se3.rotation_exp(np.array([0.4, 0.3, 0.1])),
                      np.array([0.01, -0.02, 0.5]))
        d_star = Twist(np.array([0.01, 0.0, 0.0]),
                       np.array([0.0, math.radians(5.0), 0.0]))
        T_true = se3.compose(T_prev, se3.exp(d_star))
        obs = render.render(mesh, K, T_true)

        trace = {}
        out = icp.gn_predict(mesh, T_prev, obs, K, trace=trace)
        ang, dist = _pose_error(se3.apply_delta(out, T_prev), T_true)
        assert len(trace["steps"]) <= 20
        assert ang <= 0.5
        assert dist <= 0.001

    def test_energy_never_increases_within_iterations(self):
        # each accepted step must not raise the objective on the
        # correspondence set it was solved on
        mesh = _box()
        T_prev = Pose(se3.rotation_exp(np.array([0.4, 0.3, 0.1])),
                      np.array([0.01, -0.02, 0.5]))
        T_true = se3.compose(T_prev, se3.exp(Twist(
            np.array([0.01, 0.0, 0.0]), np.array([0.0, math.radians(5.0), 0.0]))))
        obs = render.render(mesh, K, T_true)

        trace = {}
        icp.gn_predict(mesh, T_prev, obs, K, trace=trace)
        assert len(trace["steps"]) >= 1
        for e_before, e_after in trace["steps"]:
            assert e_after <= e_before

    def test_output_composes_onto_final_estimate(self):
        mesh = _box()
        T_prev = Pose(se3.rotation_exp(np.array([-0.2, 0.5, 0.3])),
                      np.array([-0.01, 0.02, 0.55]))
        T_true = se3.compose(T_prev, se3.exp(Twist(
            np.array([0.006, -0.004, 0.002]), np.array([0.05, -0.03, 0.02]))))
        obs = render.render(mesh, K, T_true)

        trace = {}
        out = icp.gn_predict(mesh, T_prev, obs, K, trace=trace)
        T_back = se3.apply_delta(out, T_prev)
        T_final = trace["T_final"]
        assert np.max(np.abs(T_back.R - T_final.R)) <= 1e-10
        assert np.max(np.abs(T_back.t - T_final.t)) <= 1e-10


def _terraced_occluder(obs):
    """Replace the central 30% of object pixels with a stepped occluder.

    The main body sits 0.1 m in front of the surface; its rim terrace sits
    0.045 m in front, inside the association gate, so the pose solve has to
    cope with outlier residuals a few times the Huber delta.
    """
    out = obs.copy()
    vv, uu = np.nonzero(out.depth > 0)
    rad = np.hypot(uu - uu.mean(), vv - vv.mean())
    r_outer = np.percentile(rad, 30)
    r_inner = np.percentile(rad, 24)
    sel = rad <= r_outer
    offset = np.where(rad[sel] <= r_inner, 0.1, 0.045)
    out.depth[vv[sel], uu[sel]] -= offset
    return out


class TestRobustness:
    def test_huber_tolerates_occluder_that_breaks_plain_lsq(self):
        # same corrupted scene solved twice; the arms differ only in the
        # robust weighting
        mesh = geometry.make_blob((0.08, 0.11, 0.14), subdivisions=2)
        T_prev = Pose(np.eye(3), np.array([0.0, 0.0, 0.45]))
        d_star = Twist(np.array([0.01, 0.0, 0.0]),
                       np.array([0.0, math.radians(5.0), 0.0]))
        T_true = se3.compose(T_prev, se3.exp(d_star))
        obs = _terraced_occluder(render.render(mesh, K_BIG, T_true))

        out_h = icp.gn_predict(mesh, T_prev, obs, K_BIG,
                               GnConfig(huber_delta=0.01))
        out_l = icp.gn_predict(mesh, T_prev, obs, K_BIG,
                               GnConfig(huber_delta=math.inf))
        ang_h, dist_h = _pose_error(se3.apply_delta(out_h, T_prev), T_true)
        ang_l, dist_l = _pose_error(se3.apply_delta(out_l, T_prev), T_true)

        assert ang_h <= 1.5
        assert dist_h <= 0.003
        assert ang_l > 1.5
        assert dist_l > 0.003


class TestErrorPaths:
    def test_empty_observation_raises(self):
        mesh = _box()
        T_prev = Pose(np.eye(3), np.array([0.0, 0.0, 0.5]))
        obs = render.render(mesh, K, T_prev)
        obs.depth[:] = 0.0
        with pytest.raises(RuntimeError, match="insufficient overlap"):
            icp.gn_predict(mesh, T_prev, obs, K)

    def test_surface_beyond_gate_raises(self):
        # whole object 0.2 m farther than predicted: every pairing exceeds
        # the association distance
        mesh = _box()
        T_prev = Pose(np.eye(3), np.array([0.0, 0.0, 0.4]))
        T_far = Pose(np.eye(3), np.array([0.0, 0.0, 0.6]))
        obs = render.render(mesh, K, T_far)
        with pytest.raises(RuntimeError, match="insufficient overlap"):
            icp.gn_predict(mesh, T_prev, obs, K)


class TestSolveDamped:
    def test_matches_direct_solve_when_well_posed(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(6, 6))
        A = m @ m.T + 6 * np.eye(6)
        b = rng.normal(size=6)
        got = icp._solve_damped(A, b)
        np.testing.assert_allclose(got, np.linalg.solve(A, b), atol=1e-9)

    def test_singular_system_solved_by_damping(self):
        A = np.zeros((6, 6))
        A[0, 0] = 1.0
        b = np.zeros(6)
        b[0] = 2.0
        got = icp._solve_damped(A, b)
        assert np.all(np.isfinite(got))
        assert abs(got[0] - 2.0) < 1e-3

    def test_gives_up_on_nan_system(self):
        A = np.full((6, 6), np.nan)
        b = np.ones(6)
        with pytest.raises(RuntimeError, match="singular"):
            icp._solve_damped(A, b)


class TestDepthNormals:
    def test_tilted_plane_normal_is_exact(self):
        # analytic depth of a plane; three back-projected samples are coplanar
        # so the cross product reproduces the plane normal to roundoff
        n_star = np.array([0.3, -0.2, -1.0])
        n_star = n_star / np.linalg.norm(n_star)
        p0 = np.array([0.0, 0.0, 0.6])
        h, w = K.height, K.width
        vv, uu = np.mgrid[0:h, 0:w]
        dirs = np.stack([(uu + 0.5 - K.cx) / K.fx,
                         (vv + 0.5 - K.cy) / K.fy,
                         np.ones((h, w))], axis=2)
        depth = (n_star @ p0) / (dirs @ n_star)
        assert depth.min() > 0

        normals, valid = icp.depth_normals(depth, K)
        assert valid[2:-2, 2:-2].all()
        inner = normals[2:-2, 2:-2].reshape(-1, 3)
        # orientation is camera-facing; align signs before comparing
        signs = np.sign(inner @ n_star)[:, None]
        np.testing.assert_allclose(inner * signs,
                                   np.broadcast_to(n_star, inner.shape),
                                   atol=1e-9)

    def test_normals_face_the_camera(self):
        mesh = _box()
        T = Pose(se3.rotation_exp(np.array([0.3, 0.4, 0.0])),
                 np.array([0.0, 0.0, 0.5]))
        obs = render.render(mesh, K, T)
        normals, valid = icp.depth_normals(obs.depth, K)
        pts = geometry.back_project(K, obs.depth)
        dots = np.sum(normals[valid] * pts[valid], axis=1)
        assert (dots <= 0).all()

    def test_discontinuity_rejected(self):
        depth = np.full((40, 40), 0.5)
        depth[:, 20:] = 0.8
        normals, valid = icp.depth_normals(depth, K)
        # flat interiors on both sides stay valid
        assert valid[10:30, 5:15].all()
        assert valid[10:30, 25:35].all()
        # pixels whose central difference spans the jump do not
        assert not valid[:, 19:21].any()

    def test_holes_invalidate_neighbours(self):
        depth = np.full((30, 30), 0.5)
        depth[15, 15] = 0.0
        normals, valid = icp.depth_normals(depth, K)
        assert not valid[15, 15]
        assert not valid[15, 14] and not valid[15, 16]
        assert not valid[14, 15] and not valid[16, 15]
        assert valid[10, 10]
        # borders never have a full neighbourhood
        assert not valid[0].any() and not valid[-1].any()
        assert not valid[:, 0].any() and not valid[:, -1].any()


class TestGateSemantics:
    def test_wider_gate_admits_distant_surface(self):
        # the same far surface that trips the stock gate is consumed once
        # max_corr exceeds the offset
        mesh = _box()
        R = se3.rotation_exp(np.array([0.4, 0.5, 0.2]))
        T_prev = Pose(R, np.array([0.0, 0.0, 0.4]))
        T_far = Pose(R, np.array([0.0, 0.0, 0.6]))
        obs = render.render(mesh, K, T_far)
        out = icp.gn_predict(mesh, T_prev, obs, K,
                             GnConfig(max_iters=60, max_corr=0.5))
        ang, dist = _pose_error(se3.apply_delta(out, T_prev), T_far)
        assert dist < 0.02
