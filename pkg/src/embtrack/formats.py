"""File formats: box CSVs, the binary embedding sidecar, weight
checkpoints and JSON tracker configs.

Boxes travel as CSV for ecosystem interchange. 2D rows follow the
MOT-Challenge layout ``frame,id,bb_left,bb_top,w,h,conf,class,visibility``
(top-left corner on disk, center convention in memory; id -1 marks raw
detections). 3D rows use the extended layout
``frame,id,x,y,z,w,h,l,yaw,conf,class``. Embeddings are bulky, so they
ride in a binary sidecar whose per-frame row counts must agree with the
detection file. Trained weights live in a small sectioned binary
container, 32-bit floats, one section per model. Configs are plain JSON
and must survive a load -> dump -> load round trip unchanged.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import BBox2D, BBox3D, Box, Detection, TrackerConfig
from .matcher import MatcherParams
from .motion import FEATURE_DIMS, MotionParams

__all__ = [
    "DetectionRow",
    "read_detections",
    "write_detections",
    "read_embeddings",
    "write_embeddings",
    "attach_embeddings",
    "rows_to_objects",
    "save_checkpoint",
    "load_checkpoint",
    "save_matcher",
    "load_matcher",
    "save_motion",
    "load_motion",
    "config_to_json",
    "config_from_json",
    "save_config",
    "load_config",
]

EMBED_MAGIC = b"DEFTEMB1"
EMBED_VERSION = 1
CKPT_MAGIC = b"TRKCKPT1"
CKPT_VERSION = 1
_SECTION_MATCHER = b"MATCHER\x00"
_SECTION_MOTION = b"MOTION\x00\x00"


@dataclass(frozen=True)
class DetectionRow:
    """One CSV row in memory: center-convention box plus metadata.
    ``track_id`` is -1 for raw (unassociated) detections."""

    frame: int
    track_id: int
    box: Box
    confidence: float = 1.0
    class_id: int = 1
    visibility: float = 1.0


def _parse_float(text: str, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"line {line_no}: bad number {text!r}") from None


def _parse_int(text: str, line_no: int) -> int:
    try:
        return int(float(text))
    except ValueError:
        raise ValueError(f"line {line_no}: bad integer {text!r}") from None


def read_detections(path, mode: str = "2d") -> dict:
    """Parse a box CSV into {frame: [DetectionRow]} with frames sorted
    and rows in file order. Frame numbers are kept verbatim. Malformed
    lines raise with their 1-based line number; an empty file gives an
    empty dict.
    """
    if mode not in ("2d", "3d"):
        raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")
    want = 9 if mode == "2d" else 11
    frames: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != want:
                raise ValueError(
                    f"line {line_no}: expected {want} columns, got {len(parts)}"
                )
            frame = _parse_int(parts[0], line_no)
            track_id = _parse_int(parts[1], line_no)
            vals = [_parse_float(p, line_no) for p in parts[2:]]
            try:
                if mode == "2d":
                    left, top, w, h, conf, cls, vis = vals
                    box: Box = BBox2D(left + w / 2.0, top + h / 2.0, w, h)
                else:
                    x, y, z, w, h, l, yaw, conf, cls = vals
                    box = BBox3D(x, y, z, w, h, l, yaw)
                    vis = 1.0
            except ValueError as exc:
                raise ValueError(f"line {line_no}: {exc}") from None
            frames.setdefault(frame, []).append(
                DetectionRow(frame, track_id, box, conf, int(cls), vis)
            )
    return {f: frames[f] for f in sorted(frames)}


def _format_float(v: float) -> str:
    return f"{v:.6f}"


def write_detections(path, frames: dict, mode: str = "2d") -> None:
    """Write {frame: [DetectionRow]} back to CSV, frames sorted, rows in
    list order. 2D boxes convert back to top-left convention."""
    if mode not in ("2d", "3d"):
        raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")
    ff = _format_float
    with open(path, "w", encoding="utf-8") as fh:
        for frame in sorted(frames):
            for row in frames[frame]:
                b = row.box
                if mode == "2d":
                    if not isinstance(b, BBox2D):
                        raise TypeError(f"frame {frame}: expected 2D boxes")
                    cells = [
                        str(frame),
                        str(row.track_id),
                        ff(b.cx - b.w / 2.0),
                        ff(b.cy - b.h / 2.0),
                        ff(b.w),
                        ff(b.h),
                        ff(row.confidence),
                        str(row.class_id),
                        ff(row.visibility),
                    ]
                else:
                    if not isinstance(b, BBox3D):
                        raise TypeError(f"frame {frame}: expected 3D boxes")
                    cells = [
                        str(frame),
                        str(row.track_id),
                        ff(b.cx),
                        ff(b.cy),
                        ff(b.cz),
                        ff(b.w),
                        ff(b.h),
                        ff(b.l),
                        ff(b.yaw),
                        ff(row.confidence),
                        str(row.class_id),
                    ]
                fh.write(",".join(cells) + "\n")


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated embedding file while reading {what}")
    return data


def write_embeddings(path, per_frame: dict, embed_dim: int) -> None:
    """Write {frame: (n_i, embed_dim) array} as the binary sidecar:
    magic, version, embedding width, frame directory (frame, count)
    pairs, then all rows as 32-bit floats in frame order."""
    frames = sorted(per_frame)
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", EMBED_VERSION, embed_dim, len(frames)))
        for f in frames:
            arr = np.asarray(per_frame[f])
            if arr.ndim != 2 or (arr.shape[0] > 0 and arr.shape[1] != embed_dim):
                raise ValueError(
                    f"frame {f}: embeddings must be (n, {embed_dim}), got {arr.shape}"
                )
            if f < 0:
                raise ValueError(f"frame {f}: negative frame numbers not storable")
            fh.write(struct.pack("<II", f, arr.shape[0]))
        for f in frames:
            arr = np.ascontiguousarray(per_frame[f], dtype=np.float32)
            fh.write(arr.tobytes())


def read_embeddings(path) -> dict:
    """Read the binary sidecar back as {frame: (n_i, e) float64 array}."""
    with open(path, "rb") as fh:
        magic = fh.read(len(EMBED_MAGIC))
        if magic != EMBED_MAGIC:
            raise ValueError(f"bad embedding file magic {magic!r}")
        version, embed_dim, n_frames = struct.unpack(
            "<III", _read_exact(fh, 12, "header")
        )
        if version != EMBED_VERSION:
            raise ValueError(f"unsupported embedding file version {version}")
        directory = []
        for _ in range(n_frames):
            frame, count = struct.unpack("<II", _read_exact(fh, 8, "frame directory"))
            directory.append((int(frame), int(count)))
        out: dict = {}
        for frame, count in directory:
            raw = _read_exact(fh, 4 * embed_dim * count, f"frame {frame} rows")
            out[frame] = (
                np.frombuffer(raw, dtype="<f4").reshape(count, embed_dim).astype(np.float64)
            )
        trailing = fh.read(1)
        if trailing:
            raise ValueError("trailing bytes after embedding data")
    return out


def attach_embeddings(frames: dict, embeddings: dict) -> dict:
    """Join detection rows with their embedding rows into
    {frame: [Detection]}. Counts must agree per frame; a mismatch names
    the offending frame. Confidences are clamped into [0, 1]."""
    out: dict = {}
    for frame in sorted(frames):
        rows = frames[frame]
        emb = embeddings.get(frame)
        if emb is None:
            if not rows:
                out[frame] = []
                continue
            raise ValueError(f"frame {frame}: no embeddings for {len(rows)} detections")
        if emb.shape[0] != len(rows):
            raise ValueError(
                f"frame {frame}: {len(rows)} detections but {emb.shape[0]} embedding rows"
            )
        out[frame] = [
            Detection(
                frame=row.frame,
                box=row.box,
                confidence=float(np.clip(row.confidence, 0.0, 1.0)),
                class_id=row.class_id,
                embedding=emb[i],
            )
            for i, row in enumerate(rows)
        ]
    for frame, emb in embeddings.items():
        if frame not in frames and emb.shape[0] > 0:
            raise ValueError(f"frame {frame}: embeddings without detections")
    return out


def rows_to_objects(frames: dict) -> dict:
    """{frame: [(track id, box)]} for the evaluator. Rows must carry real
    track ids (>= 0)."""
    out: dict = {}
    for frame in sorted(frames):
        items = []
        for row in frames[frame]:
            if row.track_id < 0:
                raise ValueError(
                    f"frame {frame}: row without a track id cannot be evaluated"
                )
            items.append((row.track_id, row.box))
        out[frame] = items
    return out


def _write_array(fh, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "array rank"))
    if ndim > 4:
        raise ValueError(f"implausible array rank {ndim} in checkpoint")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "array shape"))
    count = int(np.prod(shape)) if ndim else 1
    raw = _read_exact(fh, 4 * count, "array data")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def save_checkpoint(
    path,
    matcher: MatcherParams | None = None,
    motion: MotionParams | None = None,
) -> None:
    """Write trained weights to a sectioned binary container. Weights are
    stored as 32-bit floats (row-major); either section may be absent."""
    sections = []
    if matcher is not None:
        sections.append(_SECTION_MATCHER)
    if motion is not None:
        sections.append(_SECTION_MOTION)
    if not sections:
        raise ValueError("checkpoint needs at least one model")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(sections)))
        if matcher is not None:
            fh.write(_SECTION_MATCHER)
            fh.write(struct.pack("<I", len(matcher.layers)))
            for w, b in matcher.layers:
                fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            for w, b in matcher.layers:
                _write_array(fh, w)
                _write_array(fh, b)
        if motion is not None:
            fh.write(_SECTION_MOTION)
            mode_code = sorted(FEATURE_DIMS).index(motion.mode)
            fh.write(
                struct.pack(
                    "<IIId",
                    mode_code,
                    motion.hidden_dim,
                    motion.horizon,
                    motion.input_scale,
                )
            )
            for arr in motion.flat_arrays():
                _write_array(fh, arr)


def load_checkpoint(path) -> dict:
    """Read a checkpoint container; returns {'matcher': MatcherParams | None,
    'motion': MotionParams | None} with float64 arrays."""
    result: dict = {"matcher": None, "motion": None}
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, n_sections = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(n_sections):
            tag = _read_exact(fh, 8, "section tag")
            if tag == _SECTION_MATCHER:
                (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
                dims = [
                    struct.unpack("<II", _read_exact(fh, 8, "layer dims"))
                    for _ in range(n_layers)
                ]
                layers = []
                for fan_in, fan_out in dims:
                    w = _read_array(fh)
                    b = _read_array(fh)
                    if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                        raise ValueError(
                            f"checkpoint layer shape {w.shape} disagrees with "
                            f"header ({fan_in}, {fan_out})"
                        )
                    layers.append((w, b))
                result["matcher"] = MatcherParams(layers=layers)
            elif tag == _SECTION_MOTION:
                mode_code, hidden, horizon, scale = struct.unpack(
                    "<IIId", _read_exact(fh, 20, "motion header")
                )
                modes = sorted(FEATURE_DIMS)
                if mode_code >= len(modes):
                    raise ValueError(f"bad motion mode code {mode_code}")
                arrays = [_read_array(fh) for _ in range(5)]
                params = MotionParams(
                    w_x=arrays[0],
                    w_h=arrays[1],
                    b=arrays[2],
                    w_out=arrays[3],
                    b_out=arrays[4],
                    mode=modes[mode_code],
                    input_scale=float(scale),
                )
                params.validate()
                if params.hidden_dim != hidden or params.horizon != horizon:
                    raise ValueError("motion section dims disagree with header")
                result["motion"] = params
            else:
                raise ValueError(f"unknown checkpoint section {tag!r}")
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint data")
    return result


def save_matcher(path, params: MatcherParams) -> None:
    save_checkpoint(path, matcher=params)


def load_matcher(path) -> MatcherParams:
    params = load_checkpoint(path)["matcher"]
    if params is None:
        raise ValueError(f"{path}: checkpoint has no matcher weights")
    return params


def save_motion(path, params: MotionParams) -> None:
    save_checkpoint(path, motion=params)


def load_motion(path) -> MotionParams:
    params = load_checkpoint(path)["motion"]
    if params is None:
        raise ValueError(f"{path}: checkpoint has no motion weights")
    return params


def config_to_json(config: TrackerConfig) -> str:
    """Serialize a tracker config to stable, human-editable JSON."""
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True) + "\n"


def config_from_json(text: str) -> TrackerConfig:
    """Parse config JSON; unknown keys are an error so typos cannot pass
    silently."""
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("config JSON must be an object")
    known = {f.name for f in dataclasses.fields(TrackerConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return TrackerConfig(**data)


def save_config(path, config: TrackerConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_json(config))


def load_config(path) -> TrackerConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(fh.read())
