#!/usr/bin/env python3
"""
Detection Evaluation
====================
Matches detected tubes to ground truth and scores them the way the LIRIS
HARL tool does: each detection is assigned to its closest ground-truth tube
by spatio-temporal overlap, then accepted only if the classes agree and four
overlap ratios (spatial/temporal recall/precision) clear their thresholds.

On top of that: recall/precision/F1, threshold sweeps ("quality curves"),
integrated F1 per axis, a localisation-free variant, confusion matrices and
per-class average areas for the tube area filter.

Matching never depends on the thresholds, so a sweep matches once and only
re-runs acceptance.
"""

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config_manager import EvalThresholds
from .core_model import ActionTube, GroundTruthTube, ValidationError, region_areas

logger = logging.getLogger(__name__)

AXES = ("sr", "sp", "tr", "tp")


@dataclass(frozen=True)
class OverlapProfile:
    spatial_recall: float = 0.0
    spatial_precision: float = 0.0
    temporal_recall: float = 0.0
    temporal_precision: float = 0.0

    def value(self, axis: str) -> float:
        return {
            "sr": self.spatial_recall,
            "sp": self.spatial_precision,
            "tr": self.temporal_recall,
            "tp": self.temporal_precision,
        }[axis]


@dataclass(frozen=True)
class Assignment:
    """A detection paired with its ground-truth tube (indices into the input lists)."""
    det_index: int
    gt_index: int
    iou: float
    profile: OverlapProfile
    det_class: str
    gt_class: str


@dataclass(frozen=True)
class Matching:
    """One-to-one detection/ground-truth assignment over a set of videos."""
    assignments: Tuple[Assignment, ...]
    det_count: int
    gt_count: int
    det_classes: Tuple[str, ...] = ()
    gt_classes: Tuple[str, ...] = ()


@dataclass
class MatchReport:
    """Counts plus the derived ratios; merges by summing counts."""
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    assignments: Tuple[Assignment, ...] = ()
    per_class: Dict[str, "MatchReport"] = field(default_factory=dict)

    @property
    def recall(self) -> float:
        denominator = self.true_positives + self.false_negatives
        return self.true_positives / denominator if denominator else 0.0

    @property
    def precision(self) -> float:
        denominator = self.true_positives + self.false_positives
        return self.true_positives / denominator if denominator else 0.0

    @property
    def f1(self) -> float:
        return f1(self.recall, self.precision)

    def merge(self, other: "MatchReport") -> "MatchReport":
        per_class = {name: MatchReport(r.true_positives, r.false_positives, r.false_negatives)
                     for name, r in self.per_class.items()}
        for name, r in other.per_class.items():
            per_class[name] = per_class.get(name, MatchReport()).merge(r)
        return MatchReport(
            true_positives=self.true_positives + other.true_positives,
            false_positives=self.false_positives + other.false_positives,
            false_negatives=self.false_negatives + other.false_negatives,
            assignments=self.assignments + other.assignments,
            per_class=per_class
        )

    def to_dict(self, include_classes: bool = True) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
        }
        if include_classes and self.per_class:
            data["per_class"] = {
                name: r.to_dict(include_classes=False) for name, r in sorted(self.per_class.items())
            }
        return data


@dataclass(frozen=True)
class IntegratedScores:
    i_sr: float
    i_sp: float
    i_tr: float
    i_tp: float

    @property
    def overall(self) -> float:
        return (self.i_sr + self.i_sp + self.i_tr + self.i_tp) / 4

    def to_dict(self) -> Dict[str, float]:
        return {"I_sr": self.i_sr, "I_sp": self.i_sp, "I_tr": self.i_tr, "I_tp": self.i_tp,
                "overall": self.overall}


@dataclass(frozen=True)
class CurveRow:
    axis: str
    threshold: float
    recall: float
    precision: float
    f1: float


# =============================================================================
# Pairwise Overlap
# =============================================================================

def f1(recall: float, precision: float) -> float:
    if recall + precision == 0:
        return 0.0
    return 2 * recall * precision / (recall + precision)


def _check_same_video(det: ActionTube, gt: GroundTruthTube) -> None:
    if det.video_id != gt.video_id:
        raise ValidationError(f"detection of '{det.video_id}' compared with ground truth of '{gt.video_id}'")


def overlap_profile(det: ActionTube, gt: GroundTruthTube) -> OverlapProfile:
    """Spatial and temporal recall/precision of a detection against one ground-truth tube."""
    _check_same_video(det, gt)
    first, last = max(det.t_start, gt.t_start), min(det.t_end, gt.t_end)
    if first > last:
        return OverlapProfile()

    shared = last - first + 1
    recall_sum = precision_sum = 0.0
    for t in range(first, last + 1):
        inter, det_area, gt_area = region_areas(det.region_at(t), gt.region_at(t))
        recall_sum += inter / gt_area
        precision_sum += inter / det_area

    return OverlapProfile(
        spatial_recall=recall_sum / shared,
        spatial_precision=precision_sum / shared,
        temporal_recall=shared / gt.length,
        temporal_precision=shared / det.length
    )


def spatio_temporal_iou(det: ActionTube, gt: GroundTruthTube) -> float:
    """
    Sum of per-frame intersections over sum of per-frame unions, across both spans.

    Shared frames follow region_areas (masks only when both sides carry one);
    a frame covered by one tube adds that region's own mask or box area, and
    frames between two separated tubes add nothing.
    """
    _check_same_video(det, gt)

    def own_area(region) -> int:
        return region.mask.area if region.mask is not None else region.box.area

    inter_total = union_total = 0
    for t in range(min(det.t_start, gt.t_start), max(det.t_end, gt.t_end) + 1):
        in_det = det.t_start <= t <= det.t_end
        in_gt = gt.t_start <= t <= gt.t_end
        if in_det and in_gt:
            inter, det_area, gt_area = region_areas(det.region_at(t), gt.region_at(t))
            inter_total += inter
            union_total += det_area + gt_area - inter
        elif in_det:
            union_total += own_area(det.region_at(t))
        elif in_gt:
            union_total += own_area(gt.region_at(t))
    return inter_total / union_total if union_total else 0.0


# =============================================================================
# Matching and Acceptance
# =============================================================================

def match_tubes(dets: Sequence[ActionTube], gts: Sequence[GroundTruthTube]) -> Matching:
    """
    Greedy one-to-one assignment, video by video.

    Detections are visited by descending score (input order on ties); each
    takes the unassigned ground-truth tube of its video with the highest
    spatio-temporal IoU, provided it is above zero (smaller index on ties).
    """
    gts_by_video: Dict[str, List[int]] = defaultdict(list)
    for j, gt in enumerate(gts):
        gts_by_video[gt.video_id].append(j)

    taken = set()
    assignments = []
    for i in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i)):
        det = dets[i]
        best_j, best_iou = -1, 0.0
        for j in gts_by_video.get(det.video_id, ()):
            if j in taken:
                continue
            iou = spatio_temporal_iou(det, gts[j])
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken.add(best_j)
            gt = gts[best_j]
            assignments.append(Assignment(i, best_j, best_iou, overlap_profile(det, gt), det.class_name, gt.class_name))

    return Matching(
        assignments=tuple(assignments),
        det_count=len(dets),
        gt_count=len(gts),
        det_classes=tuple(d.class_name for d in dets),
        gt_classes=tuple(g.class_name for g in gts)
    )


def accept(pair: Assignment, th: EvalThresholds) -> bool:
    profile = pair.profile
    return (
        pair.det_class == pair.gt_class
        and profile.spatial_recall >= th.t_sr
        and profile.temporal_recall >= th.t_tr
        and profile.spatial_precision >= th.t_sp
        and profile.temporal_precision >= th.t_tp
    )


def report_from_matching(matching: Matching, th: EvalThresholds) -> MatchReport:
    accepted = [a for a in matching.assignments if accept(a, th)]
    tp_by_class = Counter(a.gt_class for a in accepted)
    det_by_class = Counter(matching.det_classes)
    gt_by_class = Counter(matching.gt_classes)

    per_class = {}
    for name in sorted(set(det_by_class) | set(gt_by_class)):
        tp = tp_by_class.get(name, 0)
        per_class[name] = MatchReport(tp, det_by_class.get(name, 0) - tp, gt_by_class.get(name, 0) - tp)

    tp = len(accepted)
    return MatchReport(
        true_positives=tp,
        false_positives=matching.det_count - tp,
        false_negatives=matching.gt_count - tp,
        assignments=tuple(accepted),
        per_class=per_class
    )


def detection_metrics(
    dets: Sequence[ActionTube],
    gts: Sequence[GroundTruthTube],
    th: EvalThresholds,
    matching: Optional[Matching] = None
) -> MatchReport:
    """Accepted matches count as true positives; the rest of each side are FPs and FNs."""
    if matching is None:
        matching = match_tubes(dets, gts)
    return report_from_matching(matching, th)


def no_localisation_metrics(dets: Sequence[ActionTube], gts: Sequence[GroundTruthTube]) -> MatchReport:
    """Per video, the multiset intersection of detected and annotated class labels."""
    det_labels: Dict[str, Counter] = defaultdict(Counter)
    gt_labels: Dict[str, Counter] = defaultdict(Counter)
    for det in dets:
        det_labels[det.video_id][det.class_name] += 1
    for gt in gts:
        gt_labels[gt.video_id][gt.class_name] += 1

    report = MatchReport()
    for video_id in sorted(set(det_labels) | set(gt_labels)):
        found, truth = det_labels[video_id], gt_labels[video_id]
        hits = found & truth
        per_class = {
            name: MatchReport(hits[name], found[name] - hits[name], truth[name] - hits[name])
            for name in set(found) | set(truth)
        }
        tp = sum(hits.values())
        report = report.merge(MatchReport(
            tp, sum(found.values()) - tp, sum(truth.values()) - tp, per_class=per_class
        ))
    return report


# =============================================================================
# Threshold Sweeps
# =============================================================================

def metric_curves(
    dets: Sequence[ActionTube],
    gts: Sequence[GroundTruthTube],
    axis: str,
    eta: float = 0.1,
    grid_step: float = 0.1,
    matching: Optional[Matching] = None
) -> List[CurveRow]:
    """Recall/precision/F1 while sweeping one threshold, the other three pinned at eta."""
    if axis not in AXES:
        raise ValidationError(f"axis must be one of {', '.join(AXES)}, got '{axis}'", field="axis")
    base = EvalThresholds(eta=eta, grid_step=grid_step)
    if matching is None:
        matching = match_tubes(dets, gts)

    rows = []
    for value in base.grid:
        report = report_from_matching(matching, base.pinned(axis, value))
        rows.append(CurveRow(axis, value, report.recall, report.precision, report.f1))
    return rows


def integrated_scores(
    dets: Sequence[ActionTube],
    gts: Sequence[GroundTruthTube],
    eta: float = 0.1,
    grid_step: float = 0.1,
    matching: Optional[Matching] = None
) -> IntegratedScores:
    """Mean F1 over each axis' sweep (uniform over the grid, both endpoints included)."""
    if matching is None:
        matching = match_tubes(dets, gts)
    means = {
        axis: float(np.mean([row.f1 for row in metric_curves(dets, gts, axis, eta, grid_step, matching)]))
        for axis in AXES
    }
    return IntegratedScores(i_sr=means["sr"], i_sp=means["sp"], i_tr=means["tr"], i_tp=means["tp"])


# =============================================================================
# Classes
# =============================================================================

def check_classes(
    dets: Sequence[ActionTube],
    gts: Sequence[GroundTruthTube],
    class_names: Sequence[str]
) -> None:
    """Raise ValidationError naming every class outside the vocabulary."""
    known = set(class_names)
    unknown = sorted({t.class_name for t in dets} - known) + sorted({g.class_name for g in gts} - known)
    if unknown:
        raise ValidationError(f"unknown class names: {', '.join(sorted(set(unknown)))}", field="class")


def confusion_matrix(
    dets: Sequence[ActionTube],
    gts: Sequence[GroundTruthTube],
    class_names: Sequence[str],
    matching: Optional[Matching] = None
) -> np.ndarray:
    """Counts of matched pairs: rows are ground-truth classes, columns detected classes."""
    check_classes(dets, gts, class_names)
    if matching is None:
        matching = match_tubes(dets, gts)
    index = {name: i for i, name in enumerate(class_names)}
    matrix = np.zeros((len(class_names), len(class_names)), dtype=int)
    for a in matching.assignments:
        matrix[index[a.gt_class], index[a.det_class]] += 1
    return matrix


def class_average_areas(gts: Sequence[GroundTruthTube]) -> Dict[str, float]:
    """gamma_c: per class, the mean over its tubes of mean width x mean height."""
    areas: Dict[str, List[float]] = defaultdict(list)
    for gt in gts:
        areas[gt.class_name].append(gt.average_area())
    return {name: float(np.mean(values)) for name, values in sorted(areas.items())}


# =============================================================================
# Reports
# =============================================================================

def evaluation_report(
    dets: Sequence[ActionTube],
    gts: Sequence[GroundTruthTube],
    th: EvalThresholds,
    no_localisation: bool = False
) -> Dict[str, Any]:
    """Everything `eval` writes: metrics at th, integrated F1 and the four curves."""
    matching = match_tubes(dets, gts)
    report = detection_metrics(dets, gts, th, matching)
    integrated = integrated_scores(dets, gts, th.eta, th.grid_step, matching)

    result: Dict[str, Any] = {
        "thresholds": {"t_sr": th.t_sr, "t_tr": th.t_tr, "t_sp": th.t_sp, "t_tp": th.t_tp,
                       "eta": th.eta, "grid_step": th.grid_step},
        "detections": len(dets),
        "ground_truth": len(gts),
        "detection": report.to_dict(),
        "integrated": integrated.to_dict(),
        "curves": {
            axis: [
                {"threshold": r.threshold, "recall": r.recall, "precision": r.precision, "f1": r.f1}
                for r in metric_curves(dets, gts, axis, th.eta, th.grid_step, matching)
            ]
            for axis in AXES
        },
    }
    if no_localisation:
        result["no_localisation"] = no_localisation_metrics(dets, gts).to_dict()
    return result


def write_report(report: Dict[str, Any], path: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def write_curves_csv(rows: Sequence[CurveRow], path: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["axis", "threshold", "recall", "precision", "f1"])
        for r in rows:
            writer.writerow([r.axis, f"{r.threshold:g}", f"{r.recall:.6f}", f"{r.precision:.6f}", f"{r.f1:.6f}"])


def write_confusion_csv(matrix: np.ndarray, class_names: Sequence[str], path: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ground_truth \\ detected", *class_names])
        for name, row in zip(class_names, matrix):
            writer.writerow([name, *[int(v) for v in row]])
