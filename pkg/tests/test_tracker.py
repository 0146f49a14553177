"""Tracking loop: pose composition, predictors, drift reinit, loss handling."""

import numpy as np
import pytest

from deltapose import geometry, net, render, se3, tracker
from deltapose.se3 import Pose, Twist

K = geometry.CameraIntrinsics(fx=150.0, fy=150.0, cx=80.0, cy=60.0,
                              width=160, height=120)
MESH = geometry.make_blob((0.06, 0.08, 0.1), subdivisions=2)
CONFIG = tracker.TrackerConfig(K=K, mesh=MESH)


def _spin_drift_poses(n, step_deg=2.0, drift=0.005):
    """Object spins about its own center and drifts 5 mm sideways per frame."""
    center = np.array([0.0, 0.0, 0.5])
    axis = np.array([0.3, 0.8, 0.2])
    axis = axis / np.linalg.norm(axis)
    base = se3.rotation_exp(np.array([0.3, 0.4, 0.1]))
    poses = []
    for i in range(n):
        R = se3.rotation_exp(axis * np.radians(step_deg) * i) @ base
        poses.append(Pose(R, center + np.array([drift, 0.0, 0.0]) * i))
    return poses


def _mean_add(est, true):
    pa = se3.transform_points(est, MESH.vertices)
    pb = se3.transform_points(true, MESH.vertices)
    return float(np.linalg.norm(pa - pb, axis=1).mean())


@pytest.fixture(scope="module")
def scene():
    gt = _spin_drift_poses(10)
    frames = [render.render(MESH, K, p) for p in gt]
    return gt, frames


def _fixed_delta_predictor(delta):
    return lambda inputs: delta


class _Recorder:
    """Predictor stub that keeps every FrameInputs it is handed."""

    def __init__(self, delta=None):
        self.seen = []
        self.delta = delta or Twist(np.zeros(3), np.zeros(3))

    def __call__(self, inputs):
        self.seen.append(inputs)
        return self.delta


class TestStep:
    def test_update_composes_predicted_twist_exactly(self, scene):
        gt, frames = scene
        delta = Twist([0.002, -0.001, 0.0005], [0.01, -0.02, 0.005])
        state = tracker.init_state(gt[0], _fixed_delta_predictor(delta), CONFIG)
        new_state, pose = tracker.step(state, frames[0])
        expect = se3.apply_delta(delta, gt[0])
        assert np.abs(pose.matrix() - expect.matrix()).max() <= 1e-12
        assert new_state.frame_idx == 1
        assert new_state.status == "ok"

    def test_step_is_deterministic(self, scene):
        gt, frames = scene
        runs = []
        for _ in range(2):
            state = tracker.init_state(gt[0], tracker.GnPredictor(), CONFIG)
            runs.append(tracker.step(state, frames[1])[1])
        assert np.array_equal(runs[0].matrix(), runs[1].matrix())

    def test_rejects_mismatched_observation_size(self, scene):
        gt, _ = scene
        small = render.RgbdImage(np.zeros((60, 80, 3)), np.zeros((60, 80)))
        state = tracker.init_state(gt[0], tracker.zero_predictor, CONFIG)
        with pytest.raises(ValueError, match="size"):
            tracker.step(state, small)

    def test_predictor_receives_crops_and_both_depth_views(self, scene):
        gt, frames = scene
        rec = _Recorder()
        state = tracker.init_state(gt[0], rec, CONFIG)
        tracker.step(state, frames[0])
        inputs = rec.seen[0]
        assert inputs.x_prev.shape == (4, CONFIG.input_side, CONFIG.input_side)
        assert inputs.x_curr.shape == inputs.x_prev.shape
        assert inputs.x_prev.dtype == np.float32
        # raw observation passes through untouched for geometric predictors
        assert np.array_equal(inputs.obs.depth, frames[0].depth)
        # hole filling in the network branch grows the silhouette rim
        assert np.count_nonzero(inputs.filtered.depth > 0) > \
            np.count_nonzero(frames[0].depth > 0)

    def test_inner_iterations_rerender_at_updated_pose(self, scene):
        gt, frames = scene
        rec = _Recorder(delta=Twist([0.002, 0.0, 0.0], np.zeros(3)))
        cfg = tracker.TrackerConfig(K=K, mesh=MESH, inner_iters=3)
        state = tracker.init_state(gt[0], rec, cfg)
        tracker.step(state, frames[0])
        assert len(rec.seen) == 3
        xs = [inp.T_prev.t[0] for inp in rec.seen]
        assert xs[1] == pytest.approx(xs[0] + 0.002)
        assert xs[2] == pytest.approx(xs[1] + 0.002)


class TestPredictors:
    def test_oracle_predictor_tracks_exactly(self, scene):
        gt, frames = scene
        poses, statuses = tracker.track_sequence(
            gt[0], frames, tracker.OraclePredictor(gt), CONFIG)
        assert statuses == ["ok"] * len(frames)
        for est, true in zip(poses, gt):
            assert _mean_add(est, true) <= 1e-9

    def test_oracle_exact_with_extra_inner_iterations(self, scene):
        gt, frames = scene
        cfg = tracker.TrackerConfig(K=K, mesh=MESH, inner_iters=2)
        poses, _ = tracker.track_sequence(
            gt[0], frames, tracker.OraclePredictor(gt), cfg)
        for est, true in zip(poses, gt):
            assert _mean_add(est, true) <= 1e-9

    def test_zero_predictor_holds_initial_pose(self, scene):
        gt, frames = scene
        poses, _ = tracker.track_sequence(
            gt[0], frames, tracker.zero_predictor, CONFIG)
        for est in poses:
            assert np.array_equal(est.matrix(), gt[0].matrix())

    def test_depth_refiner_stays_under_2mm_on_slow_clean_motion(self, scene):
        gt, frames = scene
        poses, statuses = tracker.track_sequence(
            gt[0], frames, tracker.GnPredictor(), CONFIG)
        assert statuses == ["ok"] * len(frames)
        for est, true in zip(poses, gt):
            assert _mean_add(est, true) < 0.002

    def test_net_predictor_wiring(self, scene):
        gt, frames = scene
        net_cfg = net.NetConfig(input_side=88, channels=(2, 4, 4, 4),
                                fuse_channels=4, head_hidden=4)
        params = net.init_params(net_cfg, np.random.default_rng(0))
        cfg = tracker.TrackerConfig(K=K, mesh=MESH, input_side=88)
        predictor = tracker.NetPredictor(params, net_cfg)
        state = tracker.init_state(gt[0], predictor, cfg)
        _, pose = tracker.step(state, frames[0])
        assert pose.is_valid()
        assert np.all(np.isfinite(pose.matrix()))


def _state_with_history(twists, policy, provider=None):
    state = tracker.init_state(Pose.identity(), tracker.zero_predictor,
                               CONFIG, policy, provider)
    for d in twists:
        state.history.append(d)
    return state


class TestReinitCheck:
    POLICY = tracker.ReinitPolicy(enabled=True, rot_deg=10.0, trans=0.01,
                                  window=10)

    def test_all_zero_history_is_quiet(self):
        zeros = [Twist(np.zeros(3), np.zeros(3))] * 10
        assert not tracker.check_reinit(_state_with_history(zeros, self.POLICY))

    def test_ten_large_rotations_trigger(self):
        big = [Twist(np.zeros(3), [0.0, np.radians(15.0), 0.0])] * 10
        assert tracker.check_reinit(_state_with_history(big, self.POLICY))

    def test_below_both_thresholds_is_quiet(self):
        mixed = [Twist([0.005, 0.0, 0.0], [np.radians(9.0), 0.0, 0.0])] * 10
        assert not tracker.check_reinit(_state_with_history(mixed, self.POLICY))

    def test_translation_alone_can_trigger(self):
        slide = [Twist([0.02, 0.0, 0.0], np.zeros(3))] * 10
        assert tracker.check_reinit(_state_with_history(slide, self.POLICY))

    def test_partial_window_never_triggers(self):
        big = [Twist(np.zeros(3), [0.0, np.radians(15.0), 0.0])] * 9
        assert not tracker.check_reinit(_state_with_history(big, self.POLICY))

    def test_disabled_policy_never_triggers(self):
        off = tracker.ReinitPolicy(enabled=False, window=10)
        big = [Twist(np.zeros(3), [0.0, np.radians(15.0), 0.0])] * 10
        assert not tracker.check_reinit(_state_with_history(big, off))


class _SpinInPlace:
    """Rotates 0.3 rad/frame about the object's own center; drifts on purpose."""

    def __call__(self, inputs):
        R = se3.rotation_exp(np.array([0.0, 0.3, 0.0]))
        target = Pose(R @ inputs.T_prev.R, inputs.T_prev.t)
        return se3.delta_between(inputs.T_prev, target)


class TestReinitLoop:
    def test_drift_triggers_provider_and_history_reset(self, scene):
        gt, frames = scene
        policy = tracker.ReinitPolicy(enabled=True, rot_deg=10.0, trans=0.01,
                                      window=3)
        calls = []

        def provider(idx):
            calls.append(idx)
            return gt[idx]

        poses, statuses = tracker.track_sequence(
            gt[0], frames, _SpinInPlace(), CONFIG, policy, provider)
        assert statuses == ["ok", "ok", "reinit"] * 3 + ["ok"]
        assert calls == [2, 5, 8]
        for idx in calls:
            assert _mean_add(poses[idx], gt[idx]) <= 1e-12

    def test_disabled_policy_never_consults_provider(self, scene):
        gt, frames = scene

        def provider(idx):
            raise AssertionError("pose source consulted while disabled")

        policy = tracker.ReinitPolicy(enabled=False, window=3)
        _, statuses = tracker.track_sequence(
            gt[0], frames, _SpinInPlace(), CONFIG, policy, provider)
        assert "reinit" not in statuses

    def test_trigger_without_provider_keeps_tracking(self, scene):
        gt, frames = scene
        policy = tracker.ReinitPolicy(enabled=True, rot_deg=10.0, trans=0.01,
                                      window=3)
        _, statuses = tracker.track_sequence(
            gt[0], frames, _SpinInPlace(), CONFIG, policy, None)
        assert "reinit" not in statuses


class TestLostHandling:
    def test_object_outside_frame_holds_pose(self, scene):
        _, frames = scene
        off = Pose(np.eye(3), [5.0, 0.0, 0.5])
        state = tracker.init_state(off, tracker.zero_predictor, CONFIG)
        new_state, pose = tracker.step(state, frames[0])
        assert new_state.status == "lost"
        assert np.array_equal(pose.matrix(), off.matrix())
        assert len(new_state.history) == 0

    def test_object_behind_camera_holds_pose(self, scene):
        _, frames = scene
        behind = Pose(np.eye(3), [0.0, 0.0, -0.5])
        state = tracker.init_state(behind, tracker.zero_predictor, CONFIG)
        new_state, pose = tracker.step(state, frames[0])
        assert new_state.status == "lost"
        assert np.array_equal(pose.matrix(), behind.matrix())

    def test_sequence_reports_lost_per_frame(self, scene):
        _, frames = scene
        off = Pose(np.eye(3), [5.0, 0.0, 0.5])
        poses, statuses = tracker.track_sequence(
            off, frames[:4], tracker.zero_predictor, CONFIG)
        assert statuses == ["lost"] * 4
        assert all(np.array_equal(p.matrix(), off.matrix()) for p in poses)


class TestSequence:
    def test_single_frame_sequence(self, scene):
        gt, frames = scene
        poses, statuses = tracker.track_sequence(
            gt[0], frames[:1], tracker.OraclePredictor(gt), CONFIG)
        assert len(poses) == 1 and statuses == ["ok"]
        assert _mean_add(poses[0], gt[0]) <= 1e-9

    def test_empty_sequence_rejected(self, scene):
        gt, _ = scene
        with pytest.raises(ValueError, match="at least one frame"):
            tracker.track_sequence(gt[0], [], tracker.zero_predictor, CONFIG)

    def test_read_failure_reports_frame_index(self, scene):
        gt, frames = scene

        def failing():
            yield frames[0]
            yield frames[1]
            raise OSError("disk gone")

        with pytest.raises(OSError, match="frame 2"):
            tracker.track_sequence(gt[0], failing(),
                                   tracker.OraclePredictor(gt), CONFIG)

    def test_sequence_is_deterministic(self, scene):
        gt, frames = scene
        runs = []
        for _ in range(2):
            poses, _ = tracker.track_sequence(
                gt[0], frames, tracker.OraclePredictor(gt), CONFIG)
            runs.append(np.stack([p.matrix() for p in poses]))
        assert np.array_equal(runs[0], runs[1])


class TestTrajectoryIo:
    def test_round_trip_is_exact(self, scene, tmp_path):
        gt, frames = scene
        poses, statuses = tracker.track_sequence(
            gt[0], frames, tracker.OraclePredictor(gt), CONFIG)
        path = tmp_path / "traj.csv"
        tracker.save_trajectory(path, poses, statuses)
        loaded, st2 = tracker.load_trajectory(path)
        assert st2 == statuses
        for a, b in zip(poses, loaded):
            assert np.array_equal(a.matrix(), b.matrix())

    def test_length_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="mismatch"):
            tracker.save_trajectory(tmp_path / "t.csv", [Pose.identity()], [])

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("frame,not,a,trajectory\n")
        with pytest.raises(ValueError, match="header"):
            tracker.load_trajectory(path)


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        {"rot_deg": 0.0}, {"rot_deg": -1.0}, {"trans": 0.0}, {"window": 0},
    ])
    def test_policy_rejects_bad_thresholds(self, kwargs):
        with pytest.raises(ValueError):
            tracker.ReinitPolicy(enabled=True, **kwargs)

    @pytest.mark.parametrize("kwargs", [
        {"inner_iters": 0}, {"input_side": 0},
    ])
    def test_config_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            tracker.TrackerConfig(K=K, mesh=MESH, **kwargs)
