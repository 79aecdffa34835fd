"""Tracking evaluation: CLEAR-style accuracy metrics plus identity F1.

Inputs are per-frame object maps: ``{frame: [(id, box), ...]}`` for
ground truth and hypotheses. 2D evaluation matches by IoU above a
threshold; 3D evaluation matches by center distance below a threshold
(with match quality 1 - dist/threshold so precision stays in [0, 1]).

The per-frame correspondence follows the CLEAR protocol: matches from
the previous frame persist while still valid, the remainder is solved
as a maximum-cardinality assignment (ties broken toward higher quality),
and an identity switch is counted whenever a ground-truth object is
matched to a different hypothesis than the last one it was ever matched
to. Identity F1 instead scores one global track-to-track assignment
over the whole sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .associator import hungarian
from .core import boxes_to_array, center_distance_matrix, iou_matrix

__all__ = [
    "FrameObjects",
    "SequenceEval",
    "clear_mot",
    "idf1",
    "format_report",
]

# frame -> [(object id, box)]
FrameObjects = dict

# assignment scores: eligible pairs get quality + this offset so the
# solver maximizes match count first, quality second; ineligible pairs
# get the sentinel
_CARDINALITY_OFFSET = 1e6
_INELIGIBLE = -1e6

MT_COVERAGE = 0.8
ML_COVERAGE = 0.2


@dataclass
class SequenceEval:
    """Evaluation result for one sequence."""

    mota: float
    motp: float
    idf1: float
    fp: int
    fn: int
    ids: int
    gt_count: int
    match_count: int
    mt: float
    ml: float
    frame_matches: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "mota": self.mota,
            "motp": self.motp,
            "idf1": self.idf1,
            "fp": self.fp,
            "fn": self.fn,
            "ids": self.ids,
            "gt_count": self.gt_count,
            "match_count": self.match_count,
            "mt": self.mt,
            "ml": self.ml,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _frame_items(objects: FrameObjects, frame: int) -> list:
    items = objects.get(frame, [])
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate object id in frame {frame}")
    return items


def _quality_matrix(
    gt_boxes: list,
    hyp_boxes: list,
    mode: str,
    iou_threshold: float,
    dist_threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """(eligibility mask, match quality in [0,1]) for one frame."""
    ga = boxes_to_array(gt_boxes)
    ha = boxes_to_array(hyp_boxes)
    if mode == "2d":
        quality = iou_matrix(ga, ha, mode)
        eligible = quality >= iou_threshold
    else:
        dist = center_distance_matrix(ga, ha, mode)
        eligible = dist <= dist_threshold
        quality = np.clip(1.0 - dist / dist_threshold, 0.0, 1.0)
    return eligible, quality


def clear_mot(
    gt: FrameObjects,
    hyp: FrameObjects,
    iou_threshold: float = 0.5,
    mode: str = "2d",
    dist_threshold: float = 2.0,
) -> SequenceEval:
    """CLEAR evaluation of a hypothesis sequence against ground truth.

    MOTA = 1 - (FP + FN + IDS) / total ground-truth boxes; MOTP is the
    mean match quality; MT/ML are the fractions of ground-truth tracks
    covered on >= 80% / <= 20% of their frames. Raises ValueError when
    the ground truth contains no boxes at all.
    """
    if mode not in ("2d", "3d"):
        raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")
    frames = sorted(set(gt) | set(hyp))
    gt_total = sum(len(v) for v in gt.values())
    if gt_total == 0:
        raise ValueError("ground truth has no boxes; MOTA undefined")

    fp = fn = ids = 0
    motp_sum = 0.0
    match_count = 0
    last_hyp_of_gt: dict = {}
    prev_matches: dict = {}
    frames_present: dict = {}
    frames_matched: dict = {}
    frame_matches: dict = {}

    for frame in frames:
        gt_items = _frame_items(gt, frame)
        hyp_items = _frame_items(hyp, frame)
        gt_ids = [i for i, _ in gt_items]
        hyp_ids = [i for i, _ in hyp_items]
        for gid in gt_ids:
            frames_present[gid] = frames_present.get(gid, 0) + 1
        eligible, quality = _quality_matrix(
            [b for _, b in gt_items],
            [b for _, b in hyp_items],
            mode,
            iou_threshold,
            dist_threshold,
        )
        gt_row = {gid: r for r, gid in enumerate(gt_ids)}
        hyp_col = {hid: c for c, hid in enumerate(hyp_ids)}

        matches: list[tuple[int, int]] = []
        taken_rows: set[int] = set()
        taken_cols: set[int] = set()
        # persistence: keep last frame's pairs that are still valid
        for gid, hid in prev_matches.items():
            r, c = gt_row.get(gid), hyp_col.get(hid)
            if r is None or c is None or not eligible[r, c]:
                continue
            matches.append((gid, hid))
            taken_rows.add(r)
            taken_cols.add(c)
        free_rows = [r for r in range(len(gt_ids)) if r not in taken_rows]
        free_cols = [c for c in range(len(hyp_ids)) if c not in taken_cols]
        if free_rows and free_cols:
            sub_eligible = eligible[np.ix_(free_rows, free_cols)]
            sub_quality = quality[np.ix_(free_rows, free_cols)]
            scores = np.where(
                sub_eligible, _CARDINALITY_OFFSET + sub_quality, _INELIGIBLE
            )
            for a, b in hungarian(scores, maximize=True):
                if sub_eligible[a, b]:
                    matches.append((gt_ids[free_rows[a]], hyp_ids[free_cols[b]]))

        for gid, hid in matches:
            if gid in last_hyp_of_gt and last_hyp_of_gt[gid] != hid:
                ids += 1
            last_hyp_of_gt[gid] = hid
            frames_matched[gid] = frames_matched.get(gid, 0) + 1
            motp_sum += quality[gt_row[gid], hyp_col[hid]]
            match_count += 1
        fp += len(hyp_ids) - len(matches)
        fn += len(gt_ids) - len(matches)
        frame_matches[frame] = sorted(matches)
        prev_matches = dict(matches)

    mt_count = 0
    ml_count = 0
    for gid, present in frames_present.items():
        coverage = frames_matched.get(gid, 0) / present
        if coverage >= MT_COVERAGE:
            mt_count += 1
        if coverage <= ML_COVERAGE:
            ml_count += 1
    n_tracks = len(frames_present)

    return SequenceEval(
        mota=1.0 - (fp + fn + ids) / gt_total,
        motp=motp_sum / match_count if match_count else 0.0,
        idf1=idf1(gt, hyp, iou_threshold, mode, dist_threshold),
        fp=fp,
        fn=fn,
        ids=ids,
        gt_count=gt_total,
        match_count=match_count,
        mt=mt_count / n_tracks,
        ml=ml_count / n_tracks,
        frame_matches=frame_matches,
    )


def idf1(
    gt: FrameObjects,
    hyp: FrameObjects,
    iou_threshold: float = 0.5,
    mode: str = "2d",
    dist_threshold: float = 2.0,
) -> float:
    """Identity F1: one global assignment of hypothesis tracks to
    ground-truth tracks maximizing jointly-covered frames, scored as
    2 * IDTP / (total gt boxes + total hyp boxes)."""
    gt_total = sum(len(v) for v in gt.values())
    hyp_total = sum(len(v) for v in hyp.values())
    if gt_total == 0:
        raise ValueError("ground truth has no boxes; identity F1 undefined")
    if hyp_total == 0:
        return 0.0

    gt_ids = sorted({i for items in gt.values() for i, _ in items})
    hyp_ids = sorted({i for items in hyp.values() for i, _ in items})
    gt_index = {g: k for k, g in enumerate(gt_ids)}
    hyp_index = {h: k for k, h in enumerate(hyp_ids)}
    overlap = np.zeros((len(gt_ids), len(hyp_ids)))
    for frame in sorted(set(gt) | set(hyp)):
        gt_items = _frame_items(gt, frame)
        hyp_items = _frame_items(hyp, frame)
        if not gt_items or not hyp_items:
            continue
        eligible, _ = _quality_matrix(
            [b for _, b in gt_items],
            [b for _, b in hyp_items],
            mode,
            iou_threshold,
            dist_threshold,
        )
        rows = np.array([gt_index[i] for i, _ in gt_items])
        cols = np.array([hyp_index[i] for i, _ in hyp_items])
        overlap[np.ix_(rows, cols)] += eligible

    idtp = 0.0
    for a, b in hungarian(overlap, maximize=True):
        idtp += overlap[a, b]
    return 2.0 * idtp / (gt_total + hyp_total)


def format_report(results: dict) -> str:
    """Aligned plaintext table over {name: SequenceEval} rows."""
    header = ["sequence", "MOTA", "MOTP", "IDF1", "FP", "FN", "IDS", "MT", "ML"]
    rows = [header]
    for name, ev in results.items():
        rows.append(
            [
                str(name),
                f"{ev.mota:.4f}",
                f"{ev.motp:.4f}",
                f"{ev.idf1:.4f}",
                str(ev.fp),
                str(ev.fn),
                str(ev.ids),
                f"{ev.mt:.3f}",
                f"{ev.ml:.3f}",
            ]
        )
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = []
    for r in rows:
        lines.append("  ".join(val.rjust(w) for val, w in zip(r, widths)))
    return "\n".join(lines)
