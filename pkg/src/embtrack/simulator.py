"""Synthetic tracking scenarios with controllable difficulty.

Objects move through a 2D arena under one of three motion profiles and
emit one detection per frame unless occluded or dropped by the
false-negative model. Appearance is simulated by an embedding oracle:
each identity owns a latent unit vector (minimum pairwise angle
enforced, optionally with deliberately confusable pairs), and every
detection observes latent + isotropic noise. Clutter detections get
fresh random unit vectors.

Per-video difficulty follows two scores: occlusion (total occluded
frames, summed over tracks) and displacement (mean consecutive-frame
center displacement of the ten most mobile tracks), each min-max
rescaled across the evaluated set. The ablation runner replays the same
scenario set under tracker variants that toggle appearance matching,
motion gating, and the geometric second stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .associator import Tracker
from .core import BBox2D, Detection, Observation, TrackerConfig
from .matcher import MatcherParams
from .metrics import clear_mot
from .motion import MotionParams
from .training import LabeledFrame

__all__ = [
    "ScenarioConfig",
    "GroundTruthTrack",
    "Scenario",
    "generate",
    "occlusion_raw",
    "displacement_raw",
    "min_max_rescale",
    "occlusion_scores",
    "displacement_scores",
    "combined_scores",
    "median_split",
    "three_way_split",
    "AblationVariant",
    "AblationModels",
    "ablation_run",
]

_PROFILES = ("constant", "turning", "random_walk")
TOP_TRACKS_FOR_DISPLACEMENT = 10


@dataclass
class ScenarioConfig:
    """Knobs for one synthetic video."""

    n_objects: int = 10
    n_frames: int = 100
    arena: tuple[float, float] = (1000.0, 1000.0)
    motion_profile: str = "constant"
    speed_range: tuple[float, float] = (2.0, 6.0)
    turn_rate_range: tuple[float, float] = (-0.08, 0.08)
    walk_sigma: float = 0.5
    box_size_range: tuple[float, float] = (30.0, 60.0)
    occlusion_windows: dict | None = None
    occlusion_rate: float = 0.0
    occlusion_length_range: tuple[int, int] = (5, 15)
    fn_rate: float = 0.0
    fp_rate: float = 0.0
    jitter_sigma: float = 0.0
    size_jitter_sigma: float = 0.0
    embed_dim: int = 32
    embed_noise: float = 0.05
    min_angle: float = 0.5
    confusable_fraction: float = 0.0
    confusable_angle: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_objects < 0 or self.n_frames < 1:
            raise ValueError("need n_objects >= 0 and n_frames >= 1")
        if self.motion_profile not in _PROFILES:
            raise ValueError(f"motion_profile must be one of {_PROFILES}")
        for name in ("occlusion_rate", "fn_rate", "confusable_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("fp_rate", "jitter_sigma", "size_jitter_sigma", "embed_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        lo, hi = self.occlusion_length_range
        if not (1 <= lo <= hi):
            raise ValueError("bad occlusion_length_range")


@dataclass
class GroundTruthTrack:
    """One simulated identity: a box for every frame plus its occlusion
    mask (True where the object is invisible to the detector)."""

    id: int
    boxes: list[BBox2D]
    occluded: np.ndarray

    def centers(self) -> np.ndarray:
        return np.array([[b.cx, b.cy] for b in self.boxes])


@dataclass
class Scenario:
    """A generated video: ground truth plus simulated detector output."""

    config: ScenarioConfig
    tracks: list[GroundTruthTrack]
    detections: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    latents: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def gt_frames(self) -> dict:
        """{frame: [(track id, box)]} over visible (non-occluded) frames,
        the ground truth the evaluator consumes."""
        out: dict = {}
        for f in range(self.config.n_frames):
            items = [
                (t.id, t.boxes[f]) for t in self.tracks if not t.occluded[f]
            ]
            out[f] = items
        return out

    def labeled_frames(self, include_clutter: bool = False) -> list[LabeledFrame]:
        """Per-frame identity labels + embeddings for matcher training.
        Clutter (label -1) is excluded unless requested."""
        frames = []
        for f in range(self.config.n_frames):
            dets = self.detections.get(f, [])
            labels = self.labels.get(f, [])
            ids = []
            emb = []
            for det, lab in zip(dets, labels):
                if lab < 0 and not include_clutter:
                    continue
                ids.append(lab)
                emb.append(det.embedding)
            frames.append(
                LabeledFrame(
                    ids=ids,
                    embeddings=np.stack(emb)
                    if emb
                    else np.zeros((0, self.config.embed_dim)),
                )
            )
        return frames

    def gt_observation_tracks(self) -> list:
        """Visible ground-truth trajectories as observation lists, the
        motion forecaster's training food."""
        out = []
        for t in self.tracks:
            obs = [
                Observation(f, t.boxes[f], self.latents[t.id - 1])
                for f in range(self.config.n_frames)
                if not t.occluded[f]
            ]
            if obs:
                out.append(obs)
        return out

    def tracker_frames(self) -> list:
        """[(frame, detections)] ready for Tracker.run."""
        return [
            (f, self.detections.get(f, [])) for f in range(self.config.n_frames)
        ]


def _sample_latents(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Identity latents on the unit sphere with min pairwise angle; a
    confusable tail is placed a small angle away from earlier latents."""
    n = cfg.n_objects
    if n == 0:
        return np.zeros((0, cfg.embed_dim))
    n_confusable = int(cfg.confusable_fraction * n) if n > 1 else 0
    n_separated = n - n_confusable
    latents = []
    attempts = 0
    while len(latents) < n_separated:
        attempts += 1
        if attempts > 1000 * max(n, 1):
            raise ValueError(
                "cannot place identity latents with the requested separation"
            )
        v = rng.normal(size=cfg.embed_dim)
        v /= np.linalg.norm(v)
        if all(
            math.acos(float(np.clip(np.dot(v, u), -1.0, 1.0))) >= cfg.min_angle
            for u in latents
        ):
            latents.append(v)
    for k in range(n_confusable):
        base = latents[k % len(latents)]
        # random direction orthogonal to the base latent
        d = rng.normal(size=cfg.embed_dim)
        d -= np.dot(d, base) * base
        d /= np.linalg.norm(d)
        latents.append(
            math.cos(cfg.confusable_angle) * base + math.sin(cfg.confusable_angle) * d
        )
    return np.stack(latents)


def _reflect(value: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if value < lo:
        return 2 * lo - value, -vel
    if value > hi:
        return 2 * hi - value, -vel
    return value, vel


def _simulate_tracks(
    cfg: ScenarioConfig, rng: np.random.Generator
) -> list[GroundTruthTrack]:
    width, height = cfg.arena
    tracks = []
    for obj in range(cfg.n_objects):
        w = float(rng.uniform(*cfg.box_size_range))
        h = float(rng.uniform(*cfg.box_size_range))
        margin = max(w, h)
        x = float(rng.uniform(margin, width - margin))
        y = float(rng.uniform(margin, height - margin))
        speed = float(rng.uniform(*cfg.speed_range))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        vx, vy = speed * math.cos(theta), speed * math.sin(theta)
        turn = float(rng.uniform(*cfg.turn_rate_range))
        boxes = []
        for _ in range(cfg.n_frames):
            boxes.append(BBox2D(x, y, w, h))
            if cfg.motion_profile == "turning":
                c, s = math.cos(turn), math.sin(turn)
                vx, vy = c * vx - s * vy, s * vx + c * vy
            elif cfg.motion_profile == "random_walk":
                vx += float(rng.normal(0.0, cfg.walk_sigma))
                vy += float(rng.normal(0.0, cfg.walk_sigma))
                vmax = cfg.speed_range[1]
                norm = math.hypot(vx, vy)
                if norm > vmax:
                    vx, vy = vx / norm * vmax, vy / norm * vmax
            x, vx = _reflect(x + vx, vx, margin, width - margin)
            y, vy = _reflect(y + vy, vy, margin, height - margin)
        tracks.append(
            GroundTruthTrack(
                id=obj + 1, boxes=boxes, occluded=np.zeros(cfg.n_frames, dtype=bool)
            )
        )
    return tracks


def _apply_occlusions(
    cfg: ScenarioConfig, tracks: list[GroundTruthTrack], rng: np.random.Generator
) -> None:
    if cfg.occlusion_windows is not None:
        for obj, windows in cfg.occlusion_windows.items():
            if not (0 <= obj < len(tracks)):
                raise ValueError(f"occlusion window for unknown object {obj}")
            for start, end in windows:
                if not (0 <= start <= end < cfg.n_frames):
                    raise ValueError(
                        f"occlusion window [{start}, {end}] outside the video"
                    )
                tracks[obj].occluded[start : end + 1] = True
        return
    lo, hi = cfg.occlusion_length_range
    for track in tracks:
        if rng.random() >= cfg.occlusion_rate:
            continue
        length = int(rng.integers(lo, hi + 1))
        length = min(length, cfg.n_frames - 2)
        if length < 1:
            continue
        start = int(rng.integers(1, cfg.n_frames - length))
        track.occluded[start : start + length] = True


def generate(cfg: ScenarioConfig, latents: np.ndarray | None = None) -> Scenario:
    """Build one scenario. Deterministic given the config (seed included).

    ``latents`` reuses another scenario's identity gallery (same objects,
    fresh trajectories and noise), the setup for training the matcher on
    separate footage of the identities it will later track.
    """
    rng = np.random.default_rng(cfg.seed)
    if latents is None:
        latents = _sample_latents(cfg, rng)
    else:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.shape != (cfg.n_objects, cfg.embed_dim):
            raise ValueError(
                f"latents shape {latents.shape} != "
                f"({cfg.n_objects}, {cfg.embed_dim})"
            )
    tracks = _simulate_tracks(cfg, rng)
    _apply_occlusions(cfg, tracks, rng)

    width, height = cfg.arena
    size_lo, size_hi = cfg.box_size_range
    detections: dict = {}
    labels: dict = {}
    for f in range(cfg.n_frames):
        dets: list[Detection] = []
        labs: list[int] = []
        for track in tracks:
            if track.occluded[f]:
                continue
            if cfg.fn_rate > 0 and rng.random() < cfg.fn_rate:
                continue
            box = track.boxes[f]
            cx, cy, w, h = box.cx, box.cy, box.w, box.h
            if cfg.jitter_sigma > 0:
                cx += float(rng.normal(0.0, cfg.jitter_sigma))
                cy += float(rng.normal(0.0, cfg.jitter_sigma))
            if cfg.size_jitter_sigma > 0:
                w = max(1.0, w * (1.0 + float(rng.normal(0.0, cfg.size_jitter_sigma))))
                h = max(1.0, h * (1.0 + float(rng.normal(0.0, cfg.size_jitter_sigma))))
            conf = float(rng.uniform(0.8, 1.0))
            emb = latents[track.id - 1] + cfg.embed_noise * rng.normal(
                size=cfg.embed_dim
            )
            dets.append(
                Detection(
                    frame=f,
                    box=BBox2D(cx, cy, w, h),
                    confidence=conf,
                    class_id=0,
                    embedding=emb,
                )
            )
            labs.append(track.id)
        if cfg.fp_rate > 0:
            for _ in range(int(rng.poisson(cfg.fp_rate))):
                w = float(rng.uniform(size_lo, size_hi))
                h = float(rng.uniform(size_lo, size_hi))
                cx = float(rng.uniform(w, width - w))
                cy = float(rng.uniform(h, height - h))
                emb = rng.normal(size=cfg.embed_dim)
                emb /= np.linalg.norm(emb)
                dets.append(
                    Detection(
                        frame=f,
                        box=BBox2D(cx, cy, w, h),
                        confidence=float(rng.uniform(0.5, 0.9)),
                        class_id=0,
                        embedding=emb,
                    )
                )
                labs.append(-1)
        detections[f] = dets
        labels[f] = labs
    return Scenario(
        config=cfg, tracks=tracks, detections=detections, labels=labels,
        latents=latents,
    )


def occlusion_raw(scenario: Scenario) -> int:
    """Total occluded frames, summed over all tracks."""
    return int(sum(int(t.occluded.sum()) for t in scenario.tracks))


def displacement_raw(scenario: Scenario) -> float:
    """Mean consecutive-frame center displacement of the ten most mobile
    tracks (all tracks when fewer)."""
    per_track = []
    for t in scenario.tracks:
        centers = t.centers()
        if len(centers) < 2:
            per_track.append(0.0)
            continue
        steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
        per_track.append(float(steps.mean()))
    if not per_track:
        return 0.0
    top = sorted(per_track, reverse=True)[:TOP_TRACKS_FOR_DISPLACEMENT]
    return float(np.mean(top))


def min_max_rescale(values) -> np.ndarray:
    """Linear rescale to [0, 1] across the set; a constant (or single
    element) set maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def occlusion_scores(scenarios: list[Scenario]) -> np.ndarray:
    return min_max_rescale([occlusion_raw(s) for s in scenarios])


def displacement_scores(scenarios: list[Scenario]) -> np.ndarray:
    return min_max_rescale([displacement_raw(s) for s in scenarios])


def combined_scores(scenarios: list[Scenario]) -> np.ndarray:
    """Per-video difficulty: the harder of the two rescaled scores."""
    return np.maximum(occlusion_scores(scenarios), displacement_scores(scenarios))


def median_split(scores) -> tuple[list[int], list[int]]:
    """(easy indices, hard indices): below the median vs at-or-above."""
    s = np.asarray(scores, dtype=np.float64)
    med = float(np.median(s))
    easy = [i for i, v in enumerate(s) if v < med]
    hard = [i for i, v in enumerate(s) if v >= med]
    return easy, hard


def three_way_split(scores) -> list[int]:
    """Labels 0/1/2 per video using thresholds median -/+ std/2."""
    s = np.asarray(scores, dtype=np.float64)
    med = float(np.median(s))
    half_std = float(np.std(s)) / 2.0
    lo, hi = med - half_std, med + half_std
    return [0 if v < lo else (2 if v > hi else 1) for v in s]


@dataclass(frozen=True)
class AblationVariant:
    """One tracker configuration row of the component-ablation table."""

    name: str
    embedding: str = "multi"  # none | single | multi
    motion: str = "none"  # none | kalman | lstm
    iou_stage: bool = False

    def __post_init__(self):
        if self.embedding not in ("none", "single", "multi"):
            raise ValueError(f"unknown embedding variant {self.embedding!r}")
        if self.motion not in ("none", "kalman", "lstm"):
            raise ValueError(f"unknown motion variant {self.motion!r}")


@dataclass
class AblationModels:
    """Trained weights the ablation variants draw from. ``matcher_quarter``
    is the truncated-embedding head for the reduced-richness proxy."""

    matcher_full: MatcherParams | None = None
    matcher_quarter: MatcherParams | None = None
    motion: MotionParams | None = None


def _truncate_detections(dets: list[Detection], dim: int) -> list[Detection]:
    return [
        Detection(d.frame, d.box, d.confidence, d.class_id, d.embedding[:dim])
        for d in dets
    ]


def ablation_run(
    scenarios: list[Scenario],
    variants: list[AblationVariant],
    models: AblationModels,
    base_config: TrackerConfig,
    iou_eval_threshold: float = 0.5,
) -> list[dict]:
    """Evaluate every variant on the same scenario set.

    Counters (FP/FN/IDS/GT) are summed across scenarios, MOTA recomputed
    from the sums, MT/ML averaged over all ground-truth tracks. Rows come
    back in variant order as plain dicts.
    """
    rows = []
    for variant in variants:
        if variant.embedding == "multi":
            matcher = models.matcher_full
        elif variant.embedding == "single":
            matcher = models.matcher_quarter
        else:
            matcher = None
        if variant.embedding != "none" and matcher is None:
            raise ValueError(f"variant {variant.name!r} needs a trained matcher")
        if variant.motion == "lstm" and models.motion is None:
            raise ValueError(f"variant {variant.name!r} needs motion weights")
        fp = fn = ids = gt_total = 0
        mt_weighted = ml_weighted = 0.0
        n_tracks = 0
        for scenario in scenarios:
            embed_dim = (
                matcher.embed_dim if matcher is not None else scenario.config.embed_dim
            )
            config = replace(
                base_config,
                embed_dim=embed_dim,
                mode="2d",
                motion_model=variant.motion,
                iou_second_stage=variant.iou_stage,
            )
            tracker = Tracker(config, matcher, models.motion)
            hyp: dict = {}
            for frame, dets in scenario.tracker_frames():
                if variant.embedding == "single" and matcher is not None:
                    dets = _truncate_detections(dets, matcher.embed_dim)
                result = tracker.step(frame, dets)
                hyp[frame] = [
                    (tid, dets[di].box) for di, tid in sorted(result.outputs.items())
                ]
            ev = clear_mot(scenario.gt_frames(), hyp, iou_threshold=iou_eval_threshold)
            fp += ev.fp
            fn += ev.fn
            ids += ev.ids
            gt_total += ev.gt_count
            k = len(scenario.tracks)
            mt_weighted += ev.mt * k
            ml_weighted += ev.ml * k
            n_tracks += k
        rows.append(
            {
                "variant": variant.name,
                "mota": 1.0 - (fp + fn + ids) / gt_total if gt_total else 0.0,
                "mt": mt_weighted / n_tracks if n_tracks else 0.0,
                "ml": ml_weighted / n_tracks if n_tracks else 0.0,
                "ids": ids,
                "fp": fp,
                "fn": fn,
            }
        )
    return rows
