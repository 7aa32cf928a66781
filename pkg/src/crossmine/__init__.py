"""Human-in-the-loop sample mining for object detection.

Unlabeled region proposals are vetted by cross-image validation
(pasting their crops into annotated scenes and checking re-detection),
high-consistency ones receive disposable pseudo-labels, low-consistency
ambiguous ones go to a human or simulated oracle, and the detector is
retrained in an alternating loop until no low-consistency samples
remain.
"""

from .geometry import BoundingBox, DegenerateBoxError, clip, iou
from .synthbench import (
    Dataset,
    GroundTruthObject,
    SceneSpec,
    SyntheticImage,
    generate_dataset,
    load_dataset,
    paste,
    save_dataset,
)
from .detector import (
    Detection,
    DetectorState,
    LabelVector,
    RegionProposal,
    classify,
    evaluate_map,
    extract_features,
    loss_cls,
    loss_loc,
    propose,
    train_step,
)
from .ssm import (
    ConsistencyRecord,
    HighConsistencySet,
    consistency_score,
    cross_image_validate,
    rerank_topk,
    solve_pseudo_labels,
    update_weights,
)
from .al import (
    AnnotationQueue,
    AnnotationRequest,
    AnnotationResult,
    SamplePools,
    SimulatedOracle,
    apply_annotations,
    oracle_annotate,
    select_low_consistency,
)
from .engine import MiningConfig, MiningEngine, RunLog, run

__all__ = [
    "BoundingBox", "DegenerateBoxError", "clip", "iou",
    "Dataset", "GroundTruthObject", "SceneSpec", "SyntheticImage",
    "generate_dataset", "load_dataset", "paste", "save_dataset",
    "Detection", "DetectorState", "LabelVector", "RegionProposal",
    "classify", "evaluate_map", "extract_features", "loss_cls", "loss_loc",
    "propose", "train_step",
    "ConsistencyRecord", "HighConsistencySet", "consistency_score",
    "cross_image_validate", "rerank_topk", "solve_pseudo_labels", "update_weights",
    "AnnotationQueue", "AnnotationRequest", "AnnotationResult", "SamplePools",
    "SimulatedOracle", "apply_annotations", "oracle_annotate", "select_low_consistency",
    "MiningConfig", "MiningEngine", "RunLog", "run",
]
