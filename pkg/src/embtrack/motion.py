"""Motion forecasting for track gating.

Three interchangeable forecasters predict where a track's box should be
a few frames ahead:

* "lstm": a single-layer LSTM over per-observation motion features with
  a residual linear head that emits center offsets from the last
  observed position, one offset per future step. Trained here with
  hand-written backpropagation through time on a smooth-L1 loss.
* "kalman": a constant-velocity Kalman filter over box center and
  extents, replayed over the track memory.
* "none": hold the last observed box (zero-velocity assumption).

Forecasts feed the association gate: a candidate pair is ruled out only
when the detection has zero overlap with the predicted box AND its
center is further away than half the predicted box diagonal, so only
physically implausible matches are blocked.

Feature layout per observation: 2D boxes give
(x, y, w, h, vx, vy, vw, vh); 3D boxes give
(x, y, z, w, h, l, yaw, vx, vy, vz, vyaw). Velocities are finite
differences between consecutive observations divided by their frame
gap, zero for the first observation. Windows shorter than the
configured length are front-padded by repeating the earliest feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BBox2D, BBox3D, Box, Observation, box_iou, center_distance
from .optim import Adam

__all__ = [
    "FEATURE_DIMS",
    "POSITION_DIMS",
    "MotionParams",
    "KalmanState",
    "build_features",
    "lstm_forward",
    "lstm_gradients",
    "lstm_train_step",
    "train_lstm",
    "kalman_init",
    "kalman_predict_update",
    "kalman_forecast",
    "forecast_box",
    "gate_blocks_pair",
]

FEATURE_DIMS = {"2d": 8, "3d": 11}
POSITION_DIMS = {"2d": 2, "3d": 3}
DEFAULT_HIDDEN_DIM = 64
DEFAULT_INPUT_SCALE = 0.1


def _observation_vector(obs: Observation, mode: str) -> np.ndarray:
    """Position-and-extent part of the feature (no velocities)."""
    box = obs.box
    if mode == "2d":
        if not isinstance(box, BBox2D):
            raise TypeError(f"2d features require BBox2D, got {type(box).__name__}")
        return np.array([box.cx, box.cy, box.w, box.h], dtype=np.float64)
    if not isinstance(box, BBox3D):
        raise TypeError(f"3d features require BBox3D, got {type(box).__name__}")
    return np.array(
        [box.cx, box.cy, box.cz, box.w, box.h, box.l, box.yaw], dtype=np.float64
    )


def build_features(memory: list[Observation], mode: str, past_window: int) -> np.ndarray:
    """Per-observation motion features for the last ``past_window`` entries.

    Returns a (past_window, feature_dim) array. Velocity components are
    (value[k] - value[k-1]) / (frame[k] - frame[k-1]) so irregular frame
    gaps normalize out; the earliest retained observation gets zero
    velocity. Short histories are front-padded by repeating the earliest
    row.
    """
    if mode not in FEATURE_DIMS:
        raise ValueError(f"mode must be one of {sorted(FEATURE_DIMS)}")
    if not memory:
        raise ValueError("cannot build motion features from empty memory")
    if past_window < 1:
        raise ValueError("past_window must be >= 1")
    window = memory[-past_window:]
    base = np.stack([_observation_vector(o, mode) for o in window])
    frames = np.array([o.frame for o in window], dtype=np.float64)
    pos = POSITION_DIMS[mode]
    # velocity columns cover center and extents for 2d; center and yaw for 3d
    vel_source = base if mode == "2d" else base[:, [0, 1, 2, 6]]
    vel = np.zeros_like(vel_source)
    if len(window) > 1:
        gaps = np.diff(frames)
        if np.any(gaps <= 0):
            raise ValueError("memory frames must be strictly increasing")
        vel[1:] = np.diff(vel_source, axis=0) / gaps[:, None]
    feats = np.concatenate([base, vel], axis=1)
    if len(window) < past_window:
        pad = np.repeat(feats[:1], past_window - len(window), axis=0)
        feats = np.concatenate([pad, feats], axis=0)
    return feats


@dataclass
class MotionParams:
    """Single-layer LSTM weights plus the residual output head.

    w_x: (feature_dim, 4*hidden), w_h: (hidden, 4*hidden), b: (4*hidden,)
    with gate order (input, forget, cell, output); w_out maps the final
    hidden state to horizon * position_dim center offsets. ``input_scale``
    rescales features (positions taken relative to the last observation)
    before the recurrence so gate activations stay in range.
    """

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    mode: str = "2d"
    input_scale: float = DEFAULT_INPUT_SCALE

    @property
    def feature_dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @property
    def horizon(self) -> int:
        return self.w_out.shape[1] // POSITION_DIMS[self.mode]

    @property
    def position_dim(self) -> int:
        return POSITION_DIMS[self.mode]

    def validate(self) -> None:
        h = self.hidden_dim
        if self.mode not in FEATURE_DIMS:
            raise ValueError(f"mode must be one of {sorted(FEATURE_DIMS)}")
        if self.w_x.shape != (self.feature_dim, 4 * h):
            raise ValueError(f"w_x shape {self.w_x.shape} inconsistent with hidden {h}")
        if self.feature_dim != FEATURE_DIMS[self.mode]:
            raise ValueError(
                f"feature dim {self.feature_dim} does not match mode {self.mode}"
            )
        if self.w_h.shape != (h, 4 * h) or self.b.shape != (4 * h,):
            raise ValueError("recurrent weight shapes inconsistent")
        if self.w_out.shape[0] != h or self.b_out.shape != (self.w_out.shape[1],):
            raise ValueError("output head shapes inconsistent")
        if self.w_out.shape[1] % POSITION_DIMS[self.mode] != 0:
            raise ValueError("output width must be horizon * position_dim")
        if not (self.input_scale > 0 and math.isfinite(self.input_scale)):
            raise ValueError("input_scale must be positive and finite")
        for a in (self.w_x, self.w_h, self.b, self.w_out, self.b_out):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite motion weights")

    @staticmethod
    def create(
        mode: str = "2d",
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        horizon: int = 5,
        rng: np.random.Generator | None = None,
        input_scale: float = DEFAULT_INPUT_SCALE,
    ) -> "MotionParams":
        rng = rng or np.random.default_rng()
        if mode not in FEATURE_DIMS:
            raise ValueError(f"mode must be one of {sorted(FEATURE_DIMS)}")
        f = FEATURE_DIMS[mode]
        pos = POSITION_DIMS[mode]
        sx = 1.0 / np.sqrt(f)
        sh = 1.0 / np.sqrt(hidden_dim)
        params = MotionParams(
            w_x=rng.uniform(-sx, sx, size=(f, 4 * hidden_dim)),
            w_h=rng.uniform(-sh, sh, size=(hidden_dim, 4 * hidden_dim)),
            b=np.zeros(4 * hidden_dim),
            w_out=rng.uniform(-sh, sh, size=(hidden_dim, horizon * pos)),
            b_out=np.zeros(horizon * pos),
            mode=mode,
            input_scale=input_scale,
        )
        # start with the forget gate biased open so early training keeps state
        params.b[hidden_dim : 2 * hidden_dim] = 1.0
        params.validate()
        return params

    def copy(self) -> "MotionParams":
        return MotionParams(
            self.w_x.copy(), self.w_h.copy(), self.b.copy(),
            self.w_out.copy(), self.b_out.copy(), self.mode, self.input_scale,
        )

    def flat_arrays(self) -> list[np.ndarray]:
        return [self.w_x, self.w_h, self.b, self.w_out, self.b_out]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _normalize_inputs(features: np.ndarray, params: MotionParams) -> np.ndarray:
    """Shift position columns to be relative to the last observation and
    rescale everything, so the recurrence sees O(1) numbers."""
    pos = params.position_dim
    x = features.astype(np.float64, copy=True)
    ref = x[..., -1:, :pos].copy()
    x[..., :pos] -= ref
    x *= params.input_scale
    return x


def _lstm_cells(x: np.ndarray, params: MotionParams, want_caches: bool):
    """Run the recurrence over a (B, T, F) batch. Returns final hidden
    state (B, H) and, if requested, per-step caches for backprop."""
    bsz, steps, _ = x.shape
    hdim = params.hidden_dim
    h = np.zeros((bsz, hdim))
    c = np.zeros((bsz, hdim))
    caches = []
    for t in range(steps):
        z = x[:, t] @ params.w_x + h @ params.w_h + params.b
        i = _sigmoid(z[:, :hdim])
        f = _sigmoid(z[:, hdim : 2 * hdim])
        g = np.tanh(z[:, 2 * hdim : 3 * hdim])
        o = _sigmoid(z[:, 3 * hdim :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if want_caches:
            caches.append((x[:, t], h, c, i, f, g, o, c_new, tc))
        h, c = h_new, c_new
    return h, caches


def lstm_forward(features: np.ndarray, params: MotionParams) -> np.ndarray:
    """Predicted absolute center positions for the next ``horizon`` steps.

    ``features`` is (T, F) for one track or (B, T, F) for a batch; the
    result is (horizon, pos_dim) or (B, horizon, pos_dim). The head is
    residual: step k's prediction is the last observed center plus the
    k-th predicted offset, so all-zero parameters predict the track
    holding still.
    """
    params.validate()
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
    if feats.ndim != 3 or feats.shape[2] != params.feature_dim:
        raise ValueError(
            f"features shape {features.shape} incompatible with feature dim"
            f" {params.feature_dim}"
        )
    pos = params.position_dim
    ref = feats[:, -1, :pos]
    x = _normalize_inputs(feats, params)
    h, _ = _lstm_cells(x, params, want_caches=False)
    offsets = (h @ params.w_out + params.b_out).reshape(feats.shape[0], params.horizon, pos)
    out = ref[:, None, :] + offsets
    return out[0] if single else out


def _smooth_l1(diff: np.ndarray) -> tuple[float, np.ndarray]:
    """Smooth-L1 value (mean over all entries) and d(loss)/d(diff)."""
    a = np.abs(diff)
    quad = a < 1.0
    vals = np.where(quad, 0.5 * diff * diff, a - 0.5)
    grads = np.where(quad, diff, np.sign(diff))
    n = diff.size
    return float(vals.sum() / n), grads / n


def lstm_gradients(
    features: np.ndarray, targets: np.ndarray, params: MotionParams
) -> tuple[float, list[np.ndarray]]:
    """Loss and parameter gradients for one batch.

    ``features``: (B, T, F); ``targets``: (B, horizon, pos_dim) absolute
    future center positions. Loss is smooth-L1 on the center error.
    Gradients are ordered like MotionParams.flat_arrays().
    """
    params.validate()
    feats = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError("batch features must be (B, T, F)")
    bsz = feats.shape[0]
    pos = params.position_dim
    if targets.shape != (bsz, params.horizon, pos):
        raise ValueError(
            f"targets shape {targets.shape} != {(bsz, params.horizon, pos)}"
        )
    hdim = params.hidden_dim
    ref = feats[:, -1, :pos]
    x = _normalize_inputs(feats, params)
    h_final, caches = _lstm_cells(x, params, want_caches=True)
    out = h_final @ params.w_out + params.b_out
    pred = ref[:, None, :] + out.reshape(bsz, params.horizon, pos)
    loss, ddiff = _smooth_l1(pred - targets)

    dout = ddiff.reshape(bsz, -1)
    d_w_out = h_final.T @ dout
    d_b_out = dout.sum(axis=0)
    dh = dout @ params.w_out.T
    dc = np.zeros((bsz, hdim))
    d_w_x = np.zeros_like(params.w_x)
    d_w_h = np.zeros_like(params.w_h)
    d_b = np.zeros_like(params.b)
    for t in range(len(caches) - 1, -1, -1):
        x_t, h_prev, c_prev, i, f, g, o, c_new, tc = caches[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        d_w_x += x_t.T @ dz
        d_w_h += h_prev.T @ dz
        d_b += dz.sum(axis=0)
        dh = dz @ params.w_h.T
        dc = dc * f
    return loss, [d_w_x, d_w_h, d_b, d_w_out, d_b_out]


def lstm_train_step(
    features: np.ndarray,
    targets: np.ndarray,
    params: MotionParams,
    lr: float,
) -> float:
    """One in-place plain-SGD step on the batch; returns the pre-step loss.

    A non-finite loss aborts the step, leaving parameters untouched.
    """
    loss, grads = lstm_gradients(features, targets, params)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite motion loss {loss}")
    for arr, grad in zip(params.flat_arrays(), grads):
        arr -= lr * grad
    return loss


def _windows_from_track(
    memory: list[Observation], mode: str, past_window: int, horizon: int
):
    """(features, future centers) training pairs slid along one track."""
    pos = POSITION_DIMS[mode]
    out = []
    for end in range(1, len(memory) - horizon + 1):
        future = memory[end : end + horizon]
        # targets must sit exactly 1..horizon frames ahead; skip windows
        # whose future has dropped frames
        anchor = memory[end - 1].frame
        if any(o.frame != anchor + k + 1 for k, o in enumerate(future)):
            continue
        feats = build_features(memory[:end], mode, past_window)
        target = np.stack([_observation_vector(o, mode)[:pos] for o in future])
        out.append((feats, target))
    return out


def train_lstm(
    tracks: list[list[Observation]],
    params: MotionParams,
    past_window: int,
    epochs: int = 10,
    lr: float = 1e-2,
    batch_size: int = 64,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Fit the forecaster on ground-truth track histories.

    Slides (past, future) windows over every track, then runs Adam over
    shuffled minibatches. Returns the mean loss per epoch. ``params`` is
    updated in place.
    """
    rng = rng or np.random.default_rng()
    pairs = []
    for memory in tracks:
        pairs.extend(_windows_from_track(memory, params.mode, past_window, params.horizon))
    if not pairs:
        raise ValueError("no usable training windows (tracks too short?)")
    optimizer = Adam(params.flat_arrays(), lr=lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [pairs[k] for k in order[start : start + batch_size]]
            feats = np.stack([b[0] for b in batch])
            targets = np.stack([b[1] for b in batch])
            loss, grads = lstm_gradients(feats, targets, params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite motion loss {loss}")
            optimizer.step(grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


@dataclass
class KalmanState:
    """Constant-velocity filter state: box parameters plus their velocities."""

    mean: np.ndarray
    cov: np.ndarray
    mode: str = "2d"

    @property
    def dim(self) -> int:
        return self.mean.shape[0] // 2


_KALMAN_INIT_VEL_STD = 10.0
_KALMAN_PROCESS_STD = 1.0
_KALMAN_MEASURE_STD = 1.0


def _box_vector(box: Box, mode: str) -> np.ndarray:
    if mode == "2d":
        return box.as_array()
    return box.as_array()  # (cx, cy, cz, w, h, l, yaw)


def _vector_box(vec: np.ndarray, mode: str, min_extent: float = 1e-3) -> Box:
    v = np.asarray(vec, dtype=np.float64).copy()
    if mode == "2d":
        v[2] = max(v[2], min_extent)
        v[3] = max(v[3], min_extent)
        return BBox2D.from_array(v)
    v[3:6] = np.maximum(v[3:6], min_extent)
    return BBox3D.from_array(v)


def kalman_init(
    box: Box,
    mode: str = "2d",
    init_velocity_std: float = _KALMAN_INIT_VEL_STD,
) -> KalmanState:
    """Fresh filter from a first observation: zero velocity, broad
    velocity uncertainty (needed so later updates can infer velocity)."""
    z = _box_vector(box, mode)
    d = z.shape[0]
    mean = np.concatenate([z, np.zeros(d)])
    cov = np.diag(
        np.concatenate([np.full(d, 1.0), np.full(d, init_velocity_std**2)])
    )
    return KalmanState(mean=mean, cov=cov, mode=mode)


def _transition(d: int, dt: float) -> np.ndarray:
    f = np.eye(2 * d)
    f[:d, d:] = dt * np.eye(d)
    return f


def kalman_predict_update(
    state: KalmanState,
    box: Box | None,
    dt: float = 1.0,
    process_std: float = _KALMAN_PROCESS_STD,
    measure_std: float = _KALMAN_MEASURE_STD,
) -> tuple[KalmanState, Box]:
    """One predict step (constant velocity, ``dt`` frames) followed by an
    optional measurement update. Returns the new state and the predicted
    box (before the update fused the measurement)."""
    d = state.dim
    f = _transition(d, dt)
    mean = f @ state.mean
    cov = f @ state.cov @ f.T
    cov[:d, :d] += (process_std * dt) ** 2 * np.eye(d)
    predicted = _vector_box(mean[:d], state.mode)

    if box is not None:
        z = _box_vector(box, state.mode)
        r = measure_std**2 * np.eye(d)
        s = cov[:d, :d] + r
        # pinv keeps the zero-noise exact-convergence case well defined
        gain = cov[:, :d] @ np.linalg.pinv(s)
        mean = mean + gain @ (z - mean[:d])
        ikh = np.eye(2 * d)
        ikh[:, :d] -= gain
        cov = ikh @ cov @ ikh.T + gain @ r @ gain.T
    cov = (cov + cov.T) / 2.0
    return KalmanState(mean=mean, cov=cov, mode=state.mode), predicted


def kalman_forecast(
    memory: list[Observation],
    mode: str,
    steps: int,
    process_std: float = _KALMAN_PROCESS_STD,
    measure_std: float = _KALMAN_MEASURE_STD,
) -> Box:
    """Replay the filter over a track's memory, then extrapolate ``steps``
    frames past the last observation."""
    if not memory:
        raise ValueError("cannot forecast from empty memory")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    state = kalman_init(memory[0].box, mode)
    for prev, obs in zip(memory, memory[1:]):
        dt = float(obs.frame - prev.frame)
        state, _ = kalman_predict_update(
            state, obs.box, dt=dt, process_std=process_std, measure_std=measure_std
        )
    d = state.dim
    mean = _transition(d, float(steps)) @ state.mean
    return _vector_box(mean[:d], mode)


def forecast_box(
    memory: list[Observation],
    mode: str,
    step: int,
    model: str = "none",
    params: MotionParams | None = None,
    past_window: int = 10,
) -> Box:
    """Predicted box ``step`` frames after the last observation.

    Box extents (and yaw, in 3D) are held at their last observed values;
    only the center moves. ``step`` beyond the forecaster's horizon is
    clamped to the last predicted step.
    """
    if not memory:
        raise ValueError("cannot forecast from empty memory")
    if step < 1:
        raise ValueError("step must be >= 1")
    last = memory[-1].box
    if model == "none":
        return last
    if model == "kalman":
        return kalman_forecast(memory, mode, step)
    if model != "lstm":
        raise ValueError(f"unknown motion model {model!r}")
    if params is None:
        raise ValueError("lstm forecasting needs MotionParams")
    feats = build_features(memory, mode, past_window)
    centers = lstm_forward(feats, params)
    center = centers[min(step, params.horizon) - 1]
    if mode == "2d":
        return BBox2D(float(center[0]), float(center[1]), last.w, last.h)
    return BBox3D(
        float(center[0]), float(center[1]), float(center[2]),
        last.w, last.h, last.l, last.yaw,
    )


def forecast_boxes(
    memories: list[list[Observation]],
    mode: str,
    steps: list[int],
    model: str = "none",
    params: MotionParams | None = None,
    past_window: int = 10,
) -> list[Box]:
    """forecast_box over many tracks; LSTM forecasts run as one batch."""
    if len(memories) != len(steps):
        raise ValueError("memories and steps must align")
    if not memories:
        return []
    if model != "lstm":
        return [
            forecast_box(mem, mode, step, model, params, past_window)
            for mem, step in zip(memories, steps)
        ]
    if params is None:
        raise ValueError("lstm forecasting needs MotionParams")
    feats = np.stack([build_features(mem, mode, past_window) for mem in memories])
    centers = lstm_forward(feats, params)
    boxes: list[Box] = []
    for mem, step, row in zip(memories, steps, centers):
        last = mem[-1].box
        center = row[min(max(step, 1), params.horizon) - 1]
        if mode == "2d":
            boxes.append(BBox2D(float(center[0]), float(center[1]), last.w, last.h))
        else:
            boxes.append(
                BBox3D(
                    float(center[0]), float(center[1]), float(center[2]),
                    last.w, last.h, last.l, last.yaw,
                )
            )
    return boxes


def gate_blocks_pair(predicted: Box, detection: Box) -> bool:
    """True when the detection is physically implausible for the track:
    zero overlap with the predicted box and center further than half the
    predicted box diagonal."""
    if box_iou(predicted, detection) > 0.0:
        return False
    if isinstance(predicted, BBox2D):
        diag = math.hypot(predicted.w, predicted.h)
    else:
        diag = math.sqrt(predicted.w**2 + predicted.h**2 + predicted.l**2)
    return center_distance(predicted, detection) > 0.5 * diag
