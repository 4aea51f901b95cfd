#!/usr/bin/env python3
"""
Proposal Scoring
================
Applies a linear one-vs-all model to fused appearance + flow features to fill
in every proposal's per-class score vector, and splits proposals into
positive / negative / ignored training examples by overlap with ground truth.

Model file:
    {"class_names": [...], "feature_dim": n, "weights": [[...] x C], "biases": [...]}

Feature file (JSON lines), one record per proposal:
    {"video_id": ..., "frame": t, "proposal_index": i, "x_a": [...], "x_f": [...]}
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core_model import (
    Extent,
    RegionProposal,
    ValidationError,
    VideoProposals,
    overlap_matrix,
)
from .proposal_ingest import iter_records, require_field

logger = logging.getLogger(__name__)

FeatureKey = Tuple[str, int, int]


@dataclass(frozen=True)
class LinearModel:
    """Per-class hyperplanes: scores = weights @ x + biases."""
    class_names: Tuple[str, ...]
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        biases = np.asarray(self.biases, dtype=float)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if weights.ndim != 2:
            raise ValidationError(f"weights must be a C x n matrix, got shape {weights.shape}", field="weights")
        if weights.shape[0] != len(self.class_names):
            raise ValidationError(
                f"{weights.shape[0]} weight rows for {len(self.class_names)} classes", field="weights"
            )
        if biases.shape != (weights.shape[0],):
            raise ValidationError(f"expected {weights.shape[0]} biases, got shape {biases.shape}", field="biases")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))):
            raise ValidationError("model parameters must be finite", field="weights")
        weights.setflags(write=False)
        biases.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def from_dict(cls, data: Dict) -> "LinearModel":
        """Create LinearModel from the model-file dictionary."""
        for key in ("class_names", "weights", "biases"):
            if key not in data:
                raise ValidationError("missing", field=key)
        try:
            model = cls(
                class_names=tuple(data["class_names"]),
                weights=np.asarray(data["weights"], dtype=float),
                biases=np.asarray(data["biases"], dtype=float)
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise ValidationError(f"malformed model parameters: {e}", field="weights") from e
        declared = data.get("feature_dim")
        if declared is not None and declared != model.feature_dim:
            raise ValidationError(
                f"feature_dim {declared} but weights have {model.feature_dim} columns", field="feature_dim"
            )
        return model


@dataclass
class ExamplePartition:
    """Training examples of one frame."""
    positives: List[Tuple[object, str]] = field(default_factory=list)
    negatives: List[RegionProposal] = field(default_factory=list)
    ignored: List[RegionProposal] = field(default_factory=list)


def load_model(path: str) -> LinearModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(data, dict):
        raise ValidationError("model file must hold a JSON object")
    return LinearModel.from_dict(data)


def load_features(path: str) -> Dict[FeatureKey, Tuple[np.ndarray, np.ndarray]]:
    """Feature pairs (x_a, x_f) keyed by (video_id, frame, proposal_index)."""
    features: Dict[FeatureKey, Tuple[np.ndarray, np.ndarray]] = {}
    for line_no, record in iter_records(path):
        key = (
            require_field(record, "video_id", str, line_no),
            require_field(record, "frame", int, line_no),
            require_field(record, "proposal_index", int, line_no),
        )
        if key in features:
            raise ValidationError(f"duplicate features for {key}", line=line_no, field="proposal_index")
        try:
            x_a = np.asarray(require_field(record, "x_a", list, line_no), dtype=float)
            x_f = np.asarray(require_field(record, "x_f", list, line_no), dtype=float)
        except (TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise ValidationError(f"non-numeric feature values: {e}", line=line_no) from e
        if x_a.ndim != 1 or x_f.ndim != 1 or not (np.all(np.isfinite(x_a)) and np.all(np.isfinite(x_f))):
            raise ValidationError("features must be flat lists of finite numbers", line=line_no, field="x_a")
        features[key] = (x_a, x_f)
    return features


# =============================================================================
# Feature Fusion and Scoring
# =============================================================================

def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Unit-length copy of v; the zero vector is returned unchanged."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0:
        return v.copy()
    return v / norm


def fuse_features(
    x_a: np.ndarray,
    x_f: np.ndarray,
    w_appearance: float = 1.0,
    w_flow: float = 1.0
) -> np.ndarray:
    """[w_appearance * |x_a| ; w_flow * |x_f|] with each half L2-normalised."""
    return np.concatenate((w_appearance * l2_normalize(x_a), w_flow * l2_normalize(x_f)))


def linear_score(x: np.ndarray, model: LinearModel) -> Tuple[float, ...]:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.feature_dim,):
        raise ValidationError(
            f"feature dimension {x.shape[0] if x.ndim == 1 else x.shape} does not match model ({model.feature_dim})",
            field="x_a"
        )
    return tuple(float(s) for s in model.weights @ x + model.biases)


def score_video(
    video: VideoProposals,
    features: Dict[FeatureKey, Tuple[np.ndarray, np.ndarray]],
    model: LinearModel,
    w_appearance: float = 1.0,
    w_flow: float = 1.0
) -> VideoProposals:
    """
    Replace every proposal's scores with the model's output.

    Every proposal needs a feature record; the video adopts the model's
    class vocabulary.
    """
    frames = []
    for t, proposals in enumerate(video.frames, 1):
        scored = []
        for i, proposal in enumerate(proposals):
            key = (video.video_id, t, i)
            if key not in features:
                raise ValidationError(
                    f"no features for frame {t}, proposal {i}", field="proposal_index", record_id=video.video_id
                )
            x_a, x_f = features[key]
            x = fuse_features(x_a, x_f, w_appearance, w_flow)
            scored.append(proposal.with_scores(linear_score(x, model)))
        frames.append(tuple(scored))

    own = {k for k in features if k[0] == video.video_id}
    if len(own) != video.proposal_count:
        raise ValidationError(
            f"{len(own)} feature records for {video.proposal_count} proposals",
            field="proposal_index", record_id=video.video_id
        )

    return VideoProposals(
        video_id=video.video_id,
        frame_width=video.frame_width,
        frame_height=video.frame_height,
        class_names=model.class_names,
        frames=tuple(frames)
    )


# =============================================================================
# Training Example Partition
# =============================================================================

def partition_examples(
    proposals: Sequence[RegionProposal],
    gt_extents: Sequence[Tuple[Extent, str]],
    pos_iou: float = 0.75,
    neg_iou: float = 0.3
) -> ExamplePartition:
    """
    Bucket one frame's proposals by their best overlap with the frame's
    ground truth, given as (extent, class name) pairs.

    Positives are (region, class) pairs; the ground-truth extents come first,
    followed by proposals overlapping some extent by more than pos_iou.
    Proposals below neg_iou are negatives and the rest are ignored. With
    pos_iou == neg_iou the ignored bucket is empty (the fine-tuning split).
    """
    if pos_iou < neg_iou:
        raise ValidationError(f"pos_iou ({pos_iou}) must not be below neg_iou ({neg_iou})", field="pos_iou")

    result = ExamplePartition(positives=[(extent, name) for extent, name in gt_extents])
    if not proposals:
        return result
    if not gt_extents:
        result.negatives.extend(proposals)
        return result

    overlaps = overlap_matrix(list(proposals), [extent for extent, _ in gt_extents])
    for i, proposal in enumerate(proposals):
        best = int(np.argmax(overlaps[i]))
        iou = overlaps[i, best]
        if iou > pos_iou:
            result.positives.append((proposal, gt_extents[best][1]))
        elif iou < neg_iou or (math.isclose(pos_iou, neg_iou) and iou <= pos_iou):
            result.negatives.append(proposal)
        else:
            result.ignored.append(proposal)
    return result
