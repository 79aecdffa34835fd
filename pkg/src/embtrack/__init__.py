"""Online multi-object tracking by learned embedding affinities.

The pipeline: a detector (not included) proposes per-frame boxes with
appearance embeddings; a trained pair-affinity head scores detections
against each track's remembered observations; a bipartite assignment
with an explicit non-match option links them, optionally vetoed by a
motion forecast gate and repaired by a geometric second stage. The
package also ships the training loop for the affinity head and the
forecaster, a synthetic scenario generator with difficulty scoring, a
CLEAR-MOT / IDF1 evaluator, file formats and a CLI.
"""

from .associator import FrameResult, Tracker, associate_frame, hungarian
from .core import (
    BBox2D,
    BBox3D,
    Detection,
    Observation,
    PRESETS,
    Track,
    TrackerConfig,
    TrackStore,
    preset_config,
)
from .matcher import MatcherParams, matcher_forward
from .metrics import SequenceEval, clear_mot, idf1
from .motion import MotionParams, forecast_box, train_lstm
from .simulator import Scenario, ScenarioConfig, generate
from .training import LabeledFrame, train_matcher

__version__ = "0.1.0"

__all__ = [
    "BBox2D",
    "BBox3D",
    "Detection",
    "FrameResult",
    "LabeledFrame",
    "MatcherParams",
    "MotionParams",
    "Observation",
    "PRESETS",
    "Scenario",
    "ScenarioConfig",
    "SequenceEval",
    "Track",
    "TrackStore",
    "Tracker",
    "TrackerConfig",
    "associate_frame",
    "clear_mot",
    "forecast_box",
    "generate",
    "hungarian",
    "idf1",
    "matcher_forward",
    "preset_config",
    "train_lstm",
    "train_matcher",
    "__version__",
]
