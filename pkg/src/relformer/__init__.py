"""Tracklet-based transformer for video relation detection.

Given object tracklets (synthetic or ingested), the model predicts
<subject, predicate, object> triplets through temporal-anchor predicate
queries, role-specific cross-attention, and Hungarian set-matching training,
and scores them with detection (mAP, R@K) and tagging (P@K) metrics.
"""

from .config import EvalConfig, ModelConfig, RunConfig, TrainConfig, load_config
from .data import (GtRelation, TimeSlot, Tracklet, VideoSample, Vocab,
                   assign_tracklets_to_gt, compute_viou)
from .head import RelationTriplet
from .model import RelationModel, build_anchors
from .synth import SynthConfig, synth_generate

__version__ = "0.1.0"

__all__ = [
    "EvalConfig", "GtRelation", "ModelConfig", "RelationModel", "RelationTriplet",
    "RunConfig", "SynthConfig", "TimeSlot", "TrainConfig", "Tracklet", "VideoSample",
    "Vocab", "assign_tracklets_to_gt", "build_anchors", "compute_viou",
    "load_config", "synth_generate", "__version__",
]
