"""Corner-pair object detection toolkit.

Detect axis-aligned boxes as top-left/bottom-right heatmap keypoints, decode
each corner's implied box center from a log-space shift field, and keep only
the pairs whose two centers agree inside a size-adaptive central region.
Ships the full numpy reference pipeline (target encoding, map decoding,
matching strategies with baselines, COCO-protocol evaluation) plus a
synthetic crowd benchmark and a batch CLI.
"""

from .decoder import CornerCandidate, CornerMaps, decode_center, decode_corners
from .encoder import (
    EncodabilityFlag,
    EncodingDegenerateError,
    Scene,
    SceneError,
    SceneFormatError,
    SceneObject,
    TargetMaps,
    encode,
    scene_from_json,
    scene_to_json,
    validate_center_regression_encodable,
)
from .evaluator import EvalResult, average_precision, evaluate, greedy_match
from .geometry import BBox, Detection, MuPolicy, Point, box_center, central_region, iou
from .matcher import (
    STRATEGIES,
    CandidatePair,
    CenterPoint,
    MatchConfig,
    ScoredBox,
    centripetal_weight,
    match,
    match_associative,
    match_center_regression,
    match_center_validation,
    match_centripetal,
    pair_candidates,
    soft_nms,
)
from .synthbench import (
    NoiseModel,
    PackingError,
    RenderedPredictions,
    SceneLayout,
    SceneSpec,
    generate_layout,
    generate_scene,
    render_predictions,
    run_benchmark,
)
from .tensorio import TensorFormatError, load_tensor, save_tensor

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "CandidatePair",
    "CenterPoint",
    "CornerCandidate",
    "CornerMaps",
    "Detection",
    "EncodabilityFlag",
    "EncodingDegenerateError",
    "EvalResult",
    "MatchConfig",
    "MuPolicy",
    "NoiseModel",
    "PackingError",
    "Point",
    "RenderedPredictions",
    "STRATEGIES",
    "Scene",
    "SceneError",
    "SceneFormatError",
    "SceneLayout",
    "SceneObject",
    "SceneSpec",
    "ScoredBox",
    "TargetMaps",
    "TensorFormatError",
    "average_precision",
    "box_center",
    "central_region",
    "centripetal_weight",
    "decode_center",
    "decode_corners",
    "encode",
    "evaluate",
    "generate_layout",
    "generate_scene",
    "greedy_match",
    "iou",
    "load_tensor",
    "match",
    "match_associative",
    "match_center_regression",
    "match_center_validation",
    "match_centripetal",
    "pair_candidates",
    "render_predictions",
    "run_benchmark",
    "save_tensor",
    "scene_from_json",
    "scene_to_json",
    "soft_nms",
    "validate_center_regression_encodable",
    "__version__",
]
