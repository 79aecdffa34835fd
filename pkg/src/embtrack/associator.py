"""Online association of detections to live tracks.

Each frame runs one association round per object class:

1. Score every (track, detection) pair by averaging the learned
   bidirectional match probabilities over the track's remembered
   observations (one matching-head evaluation per distinct past frame,
   shared across tracks).
2. Gate physically implausible pairs using the motion forecast.
3. Assemble the square-free assignment problem: the similarity block
   gets one extra column per track holding that track's average
   "no match" probability, so every track can opt out; off-diagonal
   entries of that block are a large negative sentinel.
4. Solve it with the Hungarian algorithm and accept only pairs whose
   similarity clears the acceptance threshold.
5. Optionally run a greedy IoU stage matching leftover detections to
   recently seen leftover tracks by overlap with their forecast boxes.

Unmatched detections become newborn tracks; tracks unmatched for too
long are dropped (both handled by the track store).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    BBox2D,
    BBox3D,
    Detection,
    Track,
    TrackerConfig,
    TrackStore,
    boxes_to_array,
    center_distance_matrix,
    iou_matrix,
)
from .matcher import AffinityPair, MatcherParams, augment_softmax, raw_affinity
from .motion import MotionParams, forecast_boxes

__all__ = [
    "NEG_SENTINEL",
    "hungarian",
    "PastFrameAffinity",
    "build_affinity_cache",
    "track_similarity",
    "track_nonmatch_score",
    "build_assignment_matrix",
    "FrameResult",
    "associate_frame",
    "Tracker",
]

# Large negative stand-in for "forbidden": finite so the assignment
# arithmetic stays total-order safe, huge so no feasible solution ever
# prefers it.
NEG_SENTINEL = -1e18


def _solve_rectangular_min(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost full assignment of all rows, for n_rows <= n_cols.

    Shortest augmenting path method with row/column potentials. Index 0
    of the internal column arrays is a virtual root column, so real
    columns live at 1..m. Returns col index per row.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    matched_row = np.zeros(m + 1, dtype=np.int64)
    path_prev = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        matched_row[0] = i
        j0 = 0
        min_reduced = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = matched_row[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < min_reduced[1:])
            if np.any(better):
                min_reduced[1:][better] = cur[better]
                path_prev[1:][better] = j0
            masked = np.where(free, min_reduced[1:], np.inf)
            j_best = int(np.argmin(masked))
            delta = masked[j_best]
            u[matched_row[used]] += delta
            v[used] -= delta
            min_reduced[1:][free] -= delta
            j0 = j_best + 1
            if matched_row[j0] == 0:
                break
        while j0 != 0:
            j_prev = path_prev[j0]
            matched_row[j0] = matched_row[j_prev]
            j0 = j_prev
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if matched_row[j] > 0:
            col_of_row[matched_row[j] - 1] = j - 1
    return col_of_row


def hungarian(score: np.ndarray, maximize: bool = True) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment on a rectangular score matrix.

    Returns min(n_rows, n_cols) (row, col) pairs sorted by row,
    maximizing (default) or minimizing the total score. All entries must
    be finite; use a large negative sentinel for forbidden cells.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ValueError(f"score must be 2-D, got shape {score.shape}")
    n, m = score.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(score)):
        raise ValueError("score matrix must be finite (use a finite sentinel)")
    cost = -score if maximize else score
    if n <= m:
        cols = _solve_rectangular_min(cost)
        pairs = [(r, int(c)) for r, c in enumerate(cols)]
    else:
        rows = _solve_rectangular_min(cost.T)
        pairs = sorted((int(r), c) for c, r in enumerate(rows))
    return pairs


@dataclass
class PastFrameAffinity:
    """Matching-head output between the current detections and every
    remembered observation of one past frame.

    ``pair`` rows follow the current detections; columns follow
    ``obs_row``, which maps track id -> column for tracks observed in
    that frame.
    """

    frame: int
    pair: AffinityPair
    obs_row: dict[int, int] = field(default_factory=dict)


def build_affinity_cache(
    cur_emb: np.ndarray,
    tracks: list[Track],
    params: MatcherParams,
    nonmatch_logit: float,
) -> dict[int, PastFrameAffinity]:
    """One PastFrameAffinity per distinct past frame in any track memory.

    All pairs are pushed through the matching head as a single batch
    (the head is per-pair, so batching over frames is exact), then
    split back per past frame for the row softmaxes.
    """
    per_frame: dict[int, list[tuple[int, np.ndarray]]] = {}
    for track in tracks:
        for obs in track.memory:
            per_frame.setdefault(obs.frame, []).append((track.id, obs.embedding))
    if not per_frame:
        return {}
    frames = sorted(per_frame)
    all_emb = []
    spans = []
    start = 0
    for f in frames:
        rows = per_frame[f]
        all_emb.extend(e for _, e in rows)
        spans.append((f, start, start + len(rows)))
        start += len(rows)
    a_all = raw_affinity(cur_emb, np.stack(all_emb), params)
    cache: dict[int, PastFrameAffinity] = {}
    for f, lo, hi in spans:
        a = np.ascontiguousarray(a_all[:, lo:hi])
        pair = AffinityPair(
            a_raw=a,
            a_hat_bwd=augment_softmax(a, nonmatch_logit),
            a_hat_fwd=augment_softmax(a.T, nonmatch_logit),
        )
        obs_row = {tid: k for k, (tid, _) in enumerate(per_frame[f])}
        cache[f] = PastFrameAffinity(frame=f, pair=pair, obs_row=obs_row)
    return cache


def track_similarity(
    det_index: int, track: Track, cache: dict[int, PastFrameAffinity]
) -> float:
    """Mean over the track's remembered observations of the averaged
    forward/backward match probability with one current detection."""
    if not track.memory:
        raise ValueError(f"track {track.id} has no observations")
    total = 0.0
    for obs in track.memory:
        entry = cache.get(obs.frame)
        if entry is None or track.id not in entry.obs_row:
            raise KeyError(
                f"affinity cache missing frame {obs.frame} for track {track.id}"
            )
        k = entry.obs_row[track.id]
        fwd = entry.pair.a_hat_fwd[k, det_index]
        bwd = entry.pair.a_hat_bwd[det_index, k]
        total += (fwd + bwd) / 2.0
    return total / len(track.memory)


def track_nonmatch_score(track: Track, cache: dict[int, PastFrameAffinity]) -> float:
    """Mean probability, over the track's observations, that the
    observation matches nothing in the current frame (the forward
    softmax's final column)."""
    if not track.memory:
        raise ValueError(f"track {track.id} has no observations")
    total = 0.0
    for obs in track.memory:
        entry = cache.get(obs.frame)
        if entry is None or track.id not in entry.obs_row:
            raise KeyError(
                f"affinity cache missing frame {obs.frame} for track {track.id}"
            )
        k = entry.obs_row[track.id]
        total += entry.pair.a_hat_fwd[k, -1]
    return total / len(track.memory)


def build_assignment_matrix(
    tracks: list[Track],
    n_dets: int,
    cache: dict[int, PastFrameAffinity],
) -> np.ndarray:
    """The (n_tracks, n_dets + n_tracks) assignment score matrix.

    Left block: per-pair track similarity. Right block: diagonal of
    per-track non-match scores so each track can be assigned "nothing";
    off-diagonal entries are NEG_SENTINEL.
    """
    n_tracks = len(tracks)
    out = np.full((n_tracks, n_dets + n_tracks), NEG_SENTINEL, dtype=np.float64)
    if n_tracks == 0:
        return out
    sim = np.zeros((n_tracks, n_dets), dtype=np.float64)
    nonmatch = np.zeros(n_tracks, dtype=np.float64)
    counts = np.array([len(t.memory) for t in tracks], dtype=np.float64)
    if np.any(counts == 0):
        raise ValueError("every track must have at least one observation")
    row_of_track = {t.id: j for j, t in enumerate(tracks)}
    for entry in cache.values():
        tids = [tid for tid in entry.obs_row if tid in row_of_track]
        if not tids:
            continue
        rows = np.array([row_of_track[tid] for tid in tids])
        ks = np.array([entry.obs_row[tid] for tid in tids])
        fwd = entry.pair.a_hat_fwd
        bwd = entry.pair.a_hat_bwd
        if n_dets:
            sim[rows] += (fwd[ks, :n_dets] + bwd[:, ks].T) / 2.0
        nonmatch[rows] += fwd[ks, -1]
    sim /= counts[:, None]
    nonmatch /= counts
    out[:, :n_dets] = sim
    out[np.arange(n_tracks), n_dets + np.arange(n_tracks)] = nonmatch
    return out


@dataclass
class FrameResult:
    """Association outcome for one frame.

    ``assignments`` maps detection index (into the caller's detection
    list) to an existing track id; ``iou_stage_assignments`` is the
    subset produced by the geometric second stage. ``outputs`` covers
    every kept detection, newborn tracks included. ``dropped`` lists
    detections rejected by the confidence floor.
    """

    frame: int
    assignments: dict[int, int] = field(default_factory=dict)
    iou_stage_assignments: dict[int, int] = field(default_factory=dict)
    newborn_ids: list[int] = field(default_factory=list)
    outputs: dict[int, int] = field(default_factory=dict)
    dropped: list[int] = field(default_factory=list)


def _gate_mask(pred_arr: np.ndarray, det_arr: np.ndarray, mode: str) -> np.ndarray:
    """Boolean (n_tracks, n_dets) mask of pairs the motion gate rules out:
    zero predicted-box overlap and center distance beyond half the
    predicted box diagonal (see motion.gate_blocks_pair)."""
    iou = iou_matrix(pred_arr, det_arr, mode)
    dist = center_distance_matrix(pred_arr, det_arr, mode)
    if mode == "2d":
        diag = np.hypot(pred_arr[:, 2], pred_arr[:, 3])
    else:
        diag = np.sqrt((pred_arr[:, 3:6] ** 2).sum(axis=1))
    return (iou <= 0.0) & (dist > 0.5 * diag[:, None])


def _check_mode(detections: list[Detection], config: TrackerConfig) -> None:
    want = BBox2D if config.mode == "2d" else BBox3D
    for det in detections:
        if not isinstance(det.box, want):
            raise ValueError(
                f"{type(det.box).__name__} detection incompatible with"
                f" mode {config.mode!r}"
            )


def associate_frame(
    frame: int,
    detections: list[Detection],
    store: TrackStore,
    config: TrackerConfig,
    matcher_params: MatcherParams | None,
    motion_params: MotionParams | None = None,
) -> FrameResult:
    """Run one frame of association and update the store in place.

    Association never crosses classes. Gating needs a motion model
    other than "none"; the IoU stage works with any model (with "none"
    the forecast is the last observed box). ``matcher_params=None``
    skips the appearance stage entirely, leaving a geometry-only
    tracker (useful as an ablation baseline).
    """
    _check_mode(detections, config)
    for det in detections:
        if det.frame != frame:
            raise ValueError(f"detection frame {det.frame} != {frame}")
    if config.motion_model == "lstm" and motion_params is None:
        raise ValueError("motion_model 'lstm' needs motion_params")

    result = FrameResult(frame=frame)
    kept: list[int] = []
    for idx, det in enumerate(detections):
        if det.confidence >= config.min_confidence:
            kept.append(idx)
        else:
            result.dropped.append(idx)

    # forecasts for gating and the IoU stage, one batch across classes
    live = store.live()
    predicted = {}
    if live and (config.motion_model != "none" or config.iou_second_stage):
        steps = [
            min(max(frame - t.last.frame, 1), config.forecast_horizon) for t in live
        ]
        boxes = forecast_boxes(
            [t.memory for t in live],
            config.mode,
            steps,
            model=config.motion_model,
            params=motion_params,
            past_window=config.past_window,
        )
        predicted = {t.id: b for t, b in zip(live, boxes)}

    assignments: list[tuple[int, int]] = []  # (track id, kept-list position)
    by_class: dict[int, list[int]] = {}
    for pos, idx in enumerate(kept):
        by_class.setdefault(detections[idx].class_id, []).append(pos)

    for class_id, positions in sorted(by_class.items()):
        tracks = store.live(class_id)
        if not tracks:
            continue
        dets = [detections[kept[p]] for p in positions]
        matched_tracks: set[int] = set()
        matched_positions: set[int] = set()
        if matcher_params is not None:
            cur_emb = np.stack([d.embedding for d in dets])
            cache = build_affinity_cache(
                cur_emb, tracks, matcher_params, config.nonmatch_logit
            )
            scores = build_assignment_matrix(tracks, len(dets), cache)
            if config.motion_model != "none":
                det_arr = boxes_to_array([d.box for d in dets])
                pred_arr = boxes_to_array([predicted[t.id] for t in tracks])
                scores[:, : len(dets)][
                    _gate_mask(pred_arr, det_arr, config.mode)
                ] = NEG_SENTINEL
            for j, col in hungarian(scores, maximize=True):
                if col >= len(dets):
                    continue  # track chose its non-match column
                if scores[j, col] > config.similarity_threshold:
                    assignments.append((tracks[j].id, positions[col]))
                    matched_tracks.add(tracks[j].id)
                    matched_positions.add(positions[col])

        if config.iou_second_stage:
            free_tracks = [
                t
                for t in tracks
                if t.id not in matched_tracks and t.age <= config.iou_stage_max_age
            ]
            free_positions = [p for p in positions if p not in matched_positions]
            candidates = []
            if free_tracks and free_positions:
                pred_arr = boxes_to_array([predicted[t.id] for t in free_tracks])
                free_arr = boxes_to_array(
                    [detections[kept[p]].box for p in free_positions]
                )
                iou = iou_matrix(pred_arr, free_arr, config.mode)
                for a, b in zip(*np.nonzero(iou >= config.iou_threshold)):
                    candidates.append(
                        (-iou[a, b], free_tracks[a].id, free_positions[b])
                    )
            used_tracks: set[int] = set()
            used_positions: set[int] = set()
            for neg_iou, tid, p in sorted(candidates):
                if tid in used_tracks or p in used_positions:
                    continue
                used_tracks.add(tid)
                used_positions.add(p)
                assignments.append((tid, p))
                result.iou_stage_assignments[kept[p]] = tid

    kept_dets = [detections[i] for i in kept]
    known_before = set(store.tracks)
    pos_to_tid = store.update(assignments, kept_dets, frame)
    for pos, tid in pos_to_tid.items():
        idx = kept[pos]
        result.outputs[idx] = tid
        if tid in known_before:
            result.assignments[idx] = tid
        else:
            result.newborn_ids.append(tid)
    result.newborn_ids.sort()
    return result


class Tracker:
    """Stateful per-sequence pipeline around associate_frame.

    Casts matching-head weights to float32 for throughput (softmax
    normalization stays float64 inside the head); pass
    ``fast_math=False`` to keep the given precision.
    """

    def __init__(
        self,
        config: TrackerConfig,
        matcher_params: MatcherParams | None,
        motion_params: MotionParams | None = None,
        fast_math: bool = True,
    ):
        if matcher_params is not None:
            matcher_params.validate()
            if matcher_params.embed_dim != config.embed_dim:
                raise ValueError(
                    f"matcher embed dim {matcher_params.embed_dim} !="
                    f" config embed_dim {config.embed_dim}"
                )
        if config.motion_model == "lstm":
            if motion_params is None:
                raise ValueError("motion_model 'lstm' needs motion_params")
            motion_params.validate()
            if motion_params.mode != config.mode:
                raise ValueError("motion params mode != config mode")
        self.config = config
        self.matcher_params = (
            matcher_params.astype(np.float32)
            if fast_math and matcher_params is not None
            else matcher_params
        )
        self.motion_params = motion_params
        self.store = TrackStore(config)
        self.results: list[FrameResult] = []

    def step(self, frame: int, detections: list[Detection]) -> FrameResult:
        result = associate_frame(
            frame, detections, self.store, self.config,
            self.matcher_params, self.motion_params,
        )
        self.results.append(result)
        return result

    def run(self, frames: list[tuple[int, list[Detection]]]) -> list[FrameResult]:
        """Process (frame, detections) pairs in ascending frame order."""
        last = None
        for frame, dets in frames:
            if last is not None and frame <= last:
                raise ValueError(f"frames must increase: {frame} after {last}")
            self.step(frame, dets)
            last = frame
        return self.results
