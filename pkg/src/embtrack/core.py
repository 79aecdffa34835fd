"""Domain types, box geometry and the track store.

Everything downstream (matching, association, motion, metrics) works in
terms of these types. Boxes are center-parameterized. Tracks keep a
bounded ring buffer of past observations (box + embedding) so the
association stage can score new detections against remembered
appearance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

__all__ = [
    "BBox2D",
    "BBox3D",
    "Box",
    "Detection",
    "Observation",
    "Track",
    "TrackerConfig",
    "TrackStore",
    "iou_2d",
    "iou_3d",
    "box_iou",
    "center_distance",
    "boxes_to_array",
    "iou_matrix",
    "center_distance_matrix",
    "PRESETS",
    "preset_config",
]


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name}: non-finite value {v!r}")


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned 2D box: center (cx, cy) plus width/height, pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        _check_finite("BBox2D", self.cx, self.cy, self.w, self.h)
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BBox2D: non-positive extent w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "BBox2D":
        return BBox2D(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def _wrap_angle(a: float) -> float:
    """Wrap angle into [-pi, pi)."""
    return float((a + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class BBox3D:
    """3D box: center (cx, cy, cz), extents (w, h, l), yaw about z, meters/radians."""

    cx: float
    cy: float
    cz: float
    w: float
    h: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        _check_finite("BBox3D", self.cx, self.cy, self.cz, self.w, self.h, self.l, self.yaw)
        if self.w <= 0 or self.h <= 0 or self.l <= 0:
            raise ValueError(f"BBox3D: non-positive extent w={self.w} h={self.h} l={self.l}")
        object.__setattr__(self, "yaw", _wrap_angle(self.yaw))

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.cx, self.cy, self.cz)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.w, self.h, self.l, self.yaw], dtype=np.float64
        )

    @staticmethod
    def from_array(a) -> "BBox3D":
        return BBox3D(*(float(x) for x in a[:7]))


Box = Union[BBox2D, BBox3D]


def _overlap_1d(c1: float, e1: float, c2: float, e2: float) -> float:
    lo = max(c1 - e1 / 2.0, c2 - e2 / 2.0)
    hi = min(c1 + e1 / 2.0, c2 + e2 / 2.0)
    return max(0.0, hi - lo)


def iou_2d(a: BBox2D, b: BBox2D) -> float:
    """Intersection-over-union of two 2D boxes, in [0, 1]."""
    iw = _overlap_1d(a.cx, a.w, b.cx, b.w)
    ih = _overlap_1d(a.cy, a.h, b.cy, b.h)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def iou_3d(a: BBox3D, b: BBox3D) -> float:
    """Volume IoU of two 3D boxes using an axis-aligned approximation.

    Yaw is ignored: boxes are treated as axis-aligned at their centers,
    which is adequate for gating and evaluation matching but is an
    approximation for rotated boxes.
    """
    ix = _overlap_1d(a.cx, a.w, b.cx, b.w)
    iy = _overlap_1d(a.cy, a.l, b.cy, b.l)
    iz = _overlap_1d(a.cz, a.h, b.cz, b.h)
    inter = ix * iy * iz
    if inter <= 0.0:
        return 0.0
    va = a.w * a.h * a.l
    vb = b.w * b.h * b.l
    return inter / (va + vb - inter)


def box_iou(a: Box, b: Box) -> float:
    """Dispatch IoU on box dimensionality. Mixed 2D/3D pairs are invalid."""
    if isinstance(a, BBox2D) and isinstance(b, BBox2D):
        return iou_2d(a, b)
    if isinstance(a, BBox3D) and isinstance(b, BBox3D):
        return iou_3d(a, b)
    raise TypeError(f"cannot compute IoU between {type(a).__name__} and {type(b).__name__}")


def center_distance(a: Box, b: Box) -> float:
    """Euclidean distance between box centers (2D or 3D)."""
    ca = np.asarray(a.center, dtype=np.float64)
    cb = np.asarray(b.center, dtype=np.float64)
    return float(np.linalg.norm(ca - cb))


def boxes_to_array(boxes: list) -> np.ndarray:
    """Stack boxes into an array of rows: (cx, cy, w, h) for 2D, (cx, cy,
    cz, w, h, l, yaw) for 3D. Empty input gives an empty (0, 4) array."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def _overlap_1d_matrix(c1, e1, c2, e2) -> np.ndarray:
    lo = np.maximum(c1[:, None] - e1[:, None] / 2.0, c2[None, :] - e2[None, :] / 2.0)
    hi = np.minimum(c1[:, None] + e1[:, None] / 2.0, c2[None, :] + e2[None, :] / 2.0)
    return np.maximum(0.0, hi - lo)


def iou_matrix(a: np.ndarray, b: np.ndarray, mode: str = "2d") -> np.ndarray:
    """Pairwise IoU between two box arrays (layout per boxes_to_array).

    (n, m) result; matches iou_2d / iou_3d entrywise, vectorized."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    if mode == "2d":
        inter = _overlap_1d_matrix(a[:, 0], a[:, 2], b[:, 0], b[:, 2])
        inter *= _overlap_1d_matrix(a[:, 1], a[:, 3], b[:, 1], b[:, 3])
        area_a = a[:, 2] * a[:, 3]
        area_b = b[:, 2] * b[:, 3]
    elif mode == "3d":
        inter = _overlap_1d_matrix(a[:, 0], a[:, 3], b[:, 0], b[:, 3])
        inter *= _overlap_1d_matrix(a[:, 1], a[:, 5], b[:, 1], b[:, 5])
        inter *= _overlap_1d_matrix(a[:, 2], a[:, 4], b[:, 2], b[:, 4])
        area_a = a[:, 3] * a[:, 4] * a[:, 5]
        area_b = b[:, 3] * b[:, 4] * b[:, 5]
    else:
        raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0.0)
    return out


def center_distance_matrix(a: np.ndarray, b: np.ndarray, mode: str = "2d") -> np.ndarray:
    """Pairwise Euclidean center distance between two box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = 2 if mode == "2d" else 3
    diff = a[:, None, :k] - b[None, :, :k]
    return np.sqrt((diff * diff).sum(axis=2))


@dataclass(frozen=True)
class Detection:
    """One detector output: box, confidence, class and appearance embedding."""

    frame: int
    box: Box
    confidence: float
    class_id: int
    embedding: np.ndarray

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {emb.shape}")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class Observation:
    """A detection remembered by a track: frame, box and embedding."""

    frame: int
    box: Box
    embedding: np.ndarray

    @staticmethod
    def from_detection(det: Detection) -> "Observation":
        return Observation(det.frame, det.box, det.embedding)


@dataclass
class Track:
    """A tracked identity with a bounded memory of past observations.

    ``age`` counts frames since the last successful association (0 right
    after a match). ``memory`` holds at most ``memory_size`` observations
    in strictly increasing frame order.
    """

    id: int
    class_id: int
    memory: list[Observation] = field(default_factory=list)
    age: int = 0
    hits: int = 0

    @property
    def last(self) -> Observation:
        return self.memory[-1]

    def append(self, obs: Observation, memory_size: int) -> None:
        if self.memory and obs.frame <= self.memory[-1].frame:
            raise ValueError(
                f"track {self.id}: observation frame {obs.frame} not after {self.memory[-1].frame}"
            )
        self.memory.append(obs)
        if len(self.memory) > memory_size:
            del self.memory[: len(self.memory) - memory_size]


_MODES = ("2d", "3d")
_MOTION_MODELS = ("lstm", "kalman", "none")


@dataclass
class TrackerConfig:
    """All tracker hyperparameters.

    Attributes:
        embed_dim: appearance embedding dimensionality.
        max_objects: padded object capacity used by training matrices.
        max_pair_gap: largest random frame gap when sampling training pairs.
        memory_size: per-track observation buffer length.
        max_age: frames a track may stay unassociated before deletion.
        similarity_threshold: minimum embedding similarity to accept a match.
        iou_threshold: minimum IoU for the second-stage geometric match.
        iou_stage_max_age: maximum track age eligible for the IoU stage.
        nonmatch_logit: constant logit of the "no match" column.
        past_window: observation window fed to the motion forecaster.
        forecast_horizon: number of future frames the forecaster predicts.
    """

    embed_dim: int = 32
    max_objects: int = 100
    max_pair_gap: int = 10
    memory_size: int = 10
    iou_stage_max_age: int = 3
    similarity_threshold: float = 0.1
    iou_threshold: float = 0.4
    max_age: int = 10
    nonmatch_logit: float = 10.0
    past_window: int = 10
    forecast_horizon: int = 5
    mode: str = "2d"
    motion_model: str = "none"
    iou_second_stage: bool = False
    min_confidence: float = 0.0

    def __post_init__(self):
        if self.max_objects < 1:
            raise ValueError("max_objects must be >= 1")
        if not (0.0 < self.similarity_threshold < 1.0):
            raise ValueError("similarity_threshold must lie in (0, 1)")
        if not (0.0 <= self.iou_threshold <= 1.0):
            raise ValueError("iou_threshold must lie in [0, 1]")
        for name in ("memory_size", "max_age", "max_pair_gap", "past_window",
                     "forecast_horizon", "iou_stage_max_age"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.nonmatch_logit <= 0:
            raise ValueError("nonmatch_logit must be > 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.motion_model not in _MOTION_MODELS:
            raise ValueError(f"motion_model must be one of {_MOTION_MODELS}")

    @property
    def box_dim(self) -> int:
        return 4 if self.mode == "2d" else 7

    @property
    def position_dim(self) -> int:
        return 2 if self.mode == "2d" else 3


# Published parameter sets for the three benchmark families.
PRESETS: dict[str, dict] = {
    "mot17": dict(
        embed_dim=416, max_objects=100, max_pair_gap=60, memory_size=50,
        iou_stage_max_age=5, similarity_threshold=0.1, iou_threshold=0.4,
        max_age=50, nonmatch_logit=10.0, past_window=15, forecast_horizon=10,
        mode="2d", motion_model="lstm", iou_second_stage=True,
    ),
    "kitti": dict(
        embed_dim=672, max_objects=100, max_pair_gap=30, memory_size=25,
        iou_stage_max_age=3, similarity_threshold=0.1, iou_threshold=0.6,
        max_age=30, nonmatch_logit=10.0, past_window=10, forecast_horizon=5,
        mode="2d", motion_model="lstm", iou_second_stage=True,
    ),
    "nuscenes": dict(
        embed_dim=704, max_objects=100, max_pair_gap=6, memory_size=5,
        iou_stage_max_age=1, similarity_threshold=0.1, iou_threshold=0.2,
        max_age=6, nonmatch_logit=10.0, past_window=10, forecast_horizon=4,
        mode="3d", motion_model="lstm", iou_second_stage=True,
    ),
}


def preset_config(name: str, **overrides) -> TrackerConfig:
    """Build a TrackerConfig from a named preset, with optional overrides."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    params = dict(PRESETS[name])
    params.update(overrides)
    return TrackerConfig(**params)


class TrackStore:
    """The set of live tracks for one sequence.

    Single writer per sequence. Ids start at 1 and are never reused.
    """

    def __init__(self, config: TrackerConfig):
        self.config = config
        self.tracks: dict[int, Track] = {}
        self._next_id = 1

    def __len__(self) -> int:
        return len(self.tracks)

    def live(self, class_id: Optional[int] = None) -> list[Track]:
        """Live tracks in insertion (id) order, optionally for one class."""
        tracks = [self.tracks[i] for i in sorted(self.tracks)]
        if class_id is None:
            return tracks
        return [t for t in tracks if t.class_id == class_id]

    def update(
        self,
        assignments: list[tuple[int, int]],
        detections: list[Detection],
        frame: int,
    ) -> dict[int, int]:
        """Apply one frame's association outcome.

        ``assignments`` lists (track_id, detection_index) pairs. Matched
        tracks absorb the detection and reset their age; unmatched tracks
        age by one and are dropped once age exceeds ``max_age``; every
        unmatched detection spawns a newborn track. Returns the complete
        detection-index -> track-id map for the frame (matched + newborn).

        Raises ValueError on duplicate detection indices or track ids, or
        on references to unknown tracks / out-of-range detections.
        """
        for det in detections:
            if det.frame != frame:
                raise ValueError(f"detection frame {det.frame} != update frame {frame}")
        track_ids = [tid for tid, _ in assignments]
        det_idxs = [di for _, di in assignments]
        if len(set(det_idxs)) != len(det_idxs):
            raise ValueError("duplicate detection index in assignments")
        if len(set(track_ids)) != len(track_ids):
            raise ValueError("duplicate track id in assignments")
        for tid, di in assignments:
            if tid not in self.tracks:
                raise ValueError(f"assignment references unknown track {tid}")
            if not (0 <= di < len(detections)):
                raise ValueError(f"assignment references detection {di} out of range")

        result: dict[int, int] = {}
        matched_tracks = set(track_ids)
        for tid, di in assignments:
            track = self.tracks[tid]
            track.append(Observation.from_detection(detections[di]), self.config.memory_size)
            track.age = 0
            track.hits += 1
            result[di] = tid

        for tid in list(self.tracks):
            if tid in matched_tracks:
                continue
            track = self.tracks[tid]
            track.age += 1
            if track.age > self.config.max_age:
                del self.tracks[tid]

        for di, det in enumerate(detections):
            if di in result:
                continue
            tid = self._next_id
            self._next_id += 1
            track = Track(id=tid, class_id=det.class_id, hits=1)
            track.append(Observation.from_detection(det), self.config.memory_size)
            self.tracks[tid] = track
            result[di] = tid
        return result


def track_store_update(
    store: TrackStore,
    assignments: list[tuple[int, int]],
    detections: list[Detection],
    frame: int,
) -> TrackStore:
    """Functional wrapper over TrackStore.update, returning the store."""
    store.update(assignments, detections, frame)
    return store
