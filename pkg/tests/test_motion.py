"""Motion features, the LSTM forecaster, the Kalman fallback, and gating."""

import numpy as np
import pytest

from embtrack.core import BBox2D, BBox3D, Observation
from embtrack.motion import (
    FEATURE_DIMS,
    MotionParams,
    build_features,
    forecast_box,
    forecast_boxes,
    gate_blocks_pair,
    kalman_forecast,
    kalman_init,
    kalman_predict_update,
    lstm_forward,
    lstm_gradients,
    lstm_train_step,
    train_lstm,
    _windows_from_track,
)


def obs2(frame, cx, cy, w=10.0, h=10.0):
    return Observation(frame=frame, box=BBox2D(cx, cy, w, h), embedding=np.zeros(1))


def obs3(frame, cx, cy, cz, w=2.0, h=2.0, l=4.0, yaw=0.0):
    return Observation(
        frame=frame, box=BBox3D(cx, cy, cz, w, h, l, yaw), embedding=np.zeros(1)
    )


def zero_params(mode="2d", hidden=4, horizon=2):
    f = FEATURE_DIMS[mode]
    pos = 2 if mode == "2d" else 3
    return MotionParams(
        w_x=np.zeros((f, 4 * hidden)),
        w_h=np.zeros((hidden, 4 * hidden)),
        b=np.zeros(4 * hidden),
        w_out=np.zeros((hidden, horizon * pos)),
        b_out=np.zeros(horizon * pos),
        mode=mode,
    )


class TestBuildFeatures:
    def test_hand_values_2d(self):
        memory = [obs2(0, 0, 0, 10, 10), obs2(1, 2, 1, 10, 12), obs2(2, 6, 3, 12, 12)]
        feats = build_features(memory, "2d", past_window=3)
        want = np.array(
            [
                [0, 0, 10, 10, 0, 0, 0, 0],
                [2, 1, 10, 12, 2, 1, 0, 2],
                [6, 3, 12, 12, 4, 2, 2, 0],
            ],
            dtype=np.float64,
        )
        np.testing.assert_allclose(feats, want, atol=1e-12)

    def test_frame_gaps_normalize_velocity(self):
        memory = [obs2(0, 0, 0), obs2(4, 8, 0)]
        feats = build_features(memory, "2d", past_window=2)
        assert feats[1, 4] == pytest.approx(2.0, abs=1e-12)  # 8 units over 4 frames

    def test_short_history_front_pads(self):
        feats = build_features([obs2(5, 3, 4)], "2d", past_window=4)
        assert feats.shape == (4, 8)
        np.testing.assert_array_equal(feats, np.tile(feats[:1], (4, 1)))
        assert not feats[:, 4:].any()

    def test_window_trims_older_history(self):
        memory = [obs2(f, 10.0 * f, 0) for f in range(5)]
        feats = build_features(memory, "2d", past_window=3)
        assert feats.shape == (3, 8)
        assert feats[0, 0] == pytest.approx(20.0)
        # the earliest retained row restarts with zero velocity
        assert not feats[0, 4:].any()

    def test_3d_feature_layout(self):
        memory = [obs3(0, 0, 0, 0), obs3(1, 1, 2, 3, yaw=0.1)]
        feats = build_features(memory, "3d", past_window=2)
        assert feats.shape == (2, 11)
        np.testing.assert_allclose(
            feats[1], [1, 2, 3, 2, 2, 4, 0.1, 1, 2, 3, 0.1], atol=1e-12
        )

    def test_input_validation(self):
        with pytest.raises(ValueError):
            build_features([], "2d", 3)
        with pytest.raises(ValueError):
            build_features([obs2(0, 0, 0)], "bird", 3)
        with pytest.raises(ValueError):
            build_features([obs2(0, 0, 0)], "2d", 0)
        with pytest.raises(ValueError):
            build_features([obs2(1, 0, 0), obs2(1, 1, 1)], "2d", 3)
        with pytest.raises(TypeError):
            build_features([obs2(0, 0, 0)], "3d", 3)


class TestLstmForward:
    def test_zero_parameters_predict_holding_still(self):
        params = zero_params(horizon=3)
        memory = [obs2(0, 5, 5), obs2(1, 9, 7)]
        feats = build_features(memory, "2d", past_window=4)
        pred = lstm_forward(feats, params)
        np.testing.assert_allclose(pred, np.tile([[9.0, 7.0]], (3, 1)), atol=1e-12)

    def test_output_bias_shifts_predictions(self):
        params = zero_params(horizon=2)
        params.b_out[:] = [1.0, 2.0, 3.0, 4.0]
        feats = build_features([obs2(0, 10, 20)], "2d", past_window=2)
        pred = lstm_forward(feats, params)
        np.testing.assert_allclose(pred, [[11.0, 22.0], [13.0, 24.0]], atol=1e-12)

    def test_batch_equals_single_calls(self):
        rng = np.random.default_rng(0)
        params = MotionParams.create(hidden_dim=8, horizon=3, rng=rng)
        feats = rng.normal(size=(5, 4, 8)) * 20.0
        batch = lstm_forward(feats, params)
        for k in range(5):
            np.testing.assert_allclose(batch[k], lstm_forward(feats[k], params), atol=1e-12)

    def test_feature_dim_mismatch(self):
        params = zero_params()
        with pytest.raises(ValueError):
            lstm_forward(np.zeros((3, 7)), params)


class TestMotionParams:
    def test_create_shapes_and_forget_bias(self):
        params = MotionParams.create(hidden_dim=6, horizon=4, rng=np.random.default_rng(0))
        assert params.hidden_dim == 6
        assert params.horizon == 4
        assert params.feature_dim == 8
        np.testing.assert_array_equal(params.b[6:12], np.ones(6))

    def test_validate_rejects_bad_shapes_and_modes(self):
        params = MotionParams.create(rng=np.random.default_rng(0))
        broken = params.copy()
        broken.w_h = np.zeros((3, 3))
        with pytest.raises(ValueError):
            broken.validate()
        broken = params.copy()
        broken.input_scale = 0.0
        with pytest.raises(ValueError):
            broken.validate()
        with pytest.raises(ValueError):
            MotionParams.create(mode="4d")

    def test_3d_mode_dims(self):
        params = MotionParams.create(mode="3d", hidden_dim=4, horizon=2,
                                     rng=np.random.default_rng(0))
        assert params.feature_dim == 11
        assert params.position_dim == 3


def fd_param_gradients(params, feats, targets, step=1e-6):
    grads = []
    for arr in params.flat_arrays():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi, _ = lstm_gradients(feats, targets, params)
            flat[k] = orig - step
            lo, _ = lstm_gradients(feats, targets, params)
            flat[k] = orig
            gf[k] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


class TestLstmGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        params = MotionParams.create(hidden_dim=4, horizon=2, rng=rng)
        feats = rng.normal(size=(2, 3, 8)) * 5.0
        targets = rng.normal(size=(2, 2, 2)) * 5.0
        _, grads = lstm_gradients(feats, targets, params)
        fd = fd_param_gradients(params, feats, targets)
        for a, f in zip(grads, fd):
            denom = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0), 1e-8)
            assert np.abs(a - f).max(initial=0.0) / denom < 1e-4

    def test_train_step_descends_on_fixed_batch(self):
        rng = np.random.default_rng(5)
        params = MotionParams.create(hidden_dim=8, horizon=2, rng=rng)
        feats = rng.normal(size=(8, 4, 8)) * 5.0
        targets = rng.normal(size=(8, 2, 2)) * 5.0
        first = lstm_train_step(feats, targets, params, lr=1e-2)
        for _ in range(20):
            last = lstm_train_step(feats, targets, params, lr=1e-2)
        assert last < first


class TestTrainLstm:
    def test_loss_decreases_on_linear_tracks(self):
        rng = np.random.default_rng(7)
        tracks = []
        for _ in range(8):
            x0, y0 = rng.uniform(0, 200, size=2)
            vx, vy = rng.uniform(-4, 4, size=2)
            tracks.append([obs2(f, x0 + vx * f, y0 + vy * f) for f in range(20)])
        params = MotionParams.create(hidden_dim=16, horizon=3, rng=rng)
        history = train_lstm(tracks, params, past_window=6, epochs=6, lr=1e-2,
                             batch_size=32, rng=rng)
        assert len(history) == 6
        assert history[-1] < history[0]

    def test_too_short_tracks_rejected(self):
        params = MotionParams.create(hidden_dim=4, horizon=5, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            train_lstm([[obs2(0, 0, 0), obs2(1, 1, 1)]], params, past_window=4)

    def test_windows_skip_dropped_future_frames(self):
        memory = [obs2(f, float(f), 0) for f in (0, 1, 2, 4, 5)]
        windows = _windows_from_track(memory, "2d", past_window=3, horizon=1)
        # the window whose target would be the missing frame 3 is skipped
        assert len(windows) == 3
        targets = [w[1][0, 0] for w in windows]
        assert targets == [1.0, 2.0, 5.0]


class TestKalman:
    def test_first_prediction_holds_position(self):
        state = kalman_init(BBox2D(50, 60, 10, 12), "2d")
        _, predicted = kalman_predict_update(state, None)
        assert predicted.cx == pytest.approx(50.0)
        assert predicted.cy == pytest.approx(60.0)

    def test_precise_measurements_recover_constant_velocity(self):
        memory = [obs2(f, 10.0 + 4.0 * f, 5.0 + 1.0 * f) for f in range(6)]
        box = kalman_forecast(memory, "2d", steps=2, measure_std=1e-6, process_std=1e-6)
        assert box.cx == pytest.approx(10.0 + 4.0 * 7, abs=1e-6)
        assert box.cy == pytest.approx(5.0 + 1.0 * 7, abs=1e-6)

    def test_default_noise_converges_near_truth(self):
        memory = [obs2(f, 4.0 * f, 0.0) for f in range(10)]
        box = kalman_forecast(memory, "2d", steps=1)
        assert abs(box.cx - 40.0) < 0.5

    def test_irregular_frame_gaps(self):
        memory = [obs2(f, 3.0 * f, 0.0) for f in (0, 1, 3, 4, 6, 7)]
        box = kalman_forecast(memory, "2d", steps=2, measure_std=1e-6, process_std=1e-6)
        assert box.cx == pytest.approx(27.0, abs=1e-6)

    def test_3d_forecast(self):
        memory = [obs3(f, 2.0 * f, 0.0, 1.0) for f in range(6)]
        box = kalman_forecast(memory, "3d", steps=1, measure_std=1e-6, process_std=1e-6)
        assert box.cx == pytest.approx(12.0, abs=1e-6)
        assert box.cz == pytest.approx(1.0, abs=1e-6)


class TestForecastBox:
    def test_model_none_returns_last_box(self):
        memory = [obs2(0, 0, 0), obs2(1, 50, 60, 11, 13)]
        box = forecast_box(memory, "2d", step=3, model="none")
        assert (box.cx, box.cy, box.w, box.h) == (50, 60, 11, 13)

    def test_lstm_clamps_step_to_horizon(self):
        rng = np.random.default_rng(1)
        params = MotionParams.create(hidden_dim=4, horizon=2, rng=rng)
        memory = [obs2(f, 5.0 * f, 2.0 * f) for f in range(4)]
        at_horizon = forecast_box(memory, "2d", 2, model="lstm", params=params)
        beyond = forecast_box(memory, "2d", 9, model="lstm", params=params)
        assert (beyond.cx, beyond.cy) == (at_horizon.cx, at_horizon.cy)

    def test_lstm_keeps_last_extent(self):
        rng = np.random.default_rng(1)
        params = MotionParams.create(hidden_dim=4, horizon=2, rng=rng)
        memory = [obs2(0, 0, 0, 7, 9), obs2(1, 4, 4, 8, 10)]
        box = forecast_box(memory, "2d", 1, model="lstm", params=params)
        assert (box.w, box.h) == (8, 10)

    def test_validation_errors(self):
        memory = [obs2(0, 0, 0)]
        with pytest.raises(ValueError):
            forecast_box([], "2d", 1)
        with pytest.raises(ValueError):
            forecast_box(memory, "2d", 0)
        with pytest.raises(ValueError):
            forecast_box(memory, "2d", 1, model="spline")
        with pytest.raises(ValueError):
            forecast_box(memory, "2d", 1, model="lstm", params=None)


class TestForecastBoxes:
    def test_lstm_batch_equals_loop(self):
        rng = np.random.default_rng(9)
        params = MotionParams.create(hidden_dim=8, horizon=3, rng=rng)
        memories = [
            [obs2(f, 3.0 * f + k, 2.0 * f) for f in range(2 + k)] for k in range(4)
        ]
        steps = [1, 2, 3, 9]
        batch = forecast_boxes(memories, "2d", steps, model="lstm", params=params,
                               past_window=5)
        for mem, step, box in zip(memories, steps, batch):
            single = forecast_box(mem, "2d", step, model="lstm", params=params,
                                  past_window=5)
            assert box.cx == pytest.approx(single.cx, abs=1e-9)
            assert box.cy == pytest.approx(single.cy, abs=1e-9)

    def test_none_and_kalman_dispatch(self):
        memories = [[obs2(0, 0, 0), obs2(1, 4, 0)], [obs2(0, 10, 10)]]
        boxes = forecast_boxes(memories, "2d", [1, 1], model="none")
        assert boxes[0].cx == 4.0 and boxes[1].cx == 10.0

    def test_length_mismatch_and_empty(self):
        assert forecast_boxes([], "2d", []) == []
        with pytest.raises(ValueError):
            forecast_boxes([[obs2(0, 0, 0)]], "2d", [1, 2])


class TestGate:
    def test_any_overlap_passes(self):
        assert not gate_blocks_pair(BBox2D(0, 0, 20, 20), BBox2D(18, 0, 20, 20))

    def test_near_miss_within_half_diagonal_passes(self):
        # no overlap, but the center sits inside half the predicted diagonal
        assert not gate_blocks_pair(BBox2D(0, 0, 20, 20), BBox2D(12, 0, 2, 2))

    def test_distant_detection_blocked(self):
        assert gate_blocks_pair(BBox2D(0, 0, 20, 20), BBox2D(21, 0, 1, 1))

    def test_3d_uses_full_diagonal(self):
        pred = BBox3D(0, 0, 0, 2, 2, 4, 0.0)
        half_diag = 0.5 * np.sqrt(4 + 4 + 16)
        near = BBox3D(0, 0, 2.2, 0.1, 0.1, 0.1, 0.0)
        far = BBox3D(0, 0, half_diag + 0.5, 0.1, 0.1, 0.1, 0.0)
        assert not gate_blocks_pair(pred, near)
        assert gate_blocks_pair(pred, far)
