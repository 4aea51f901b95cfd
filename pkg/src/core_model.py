#!/usr/bin/env python3
"""
Core Model for the Tube Linker
==============================
Domain types shared by every stage of the pipeline: boxes, run-length pixel
masks, region proposals, per-video proposal sets, action paths and tubes,
plus the spatial-overlap geometry used by NMS, linking and evaluation.

All types are frozen dataclasses; every operation here is a pure function.
Frame indices are 1-based. Boxes are half-open: [x_min, x_max) x [y_min, y_max).
"""

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np


ScoreVector = Tuple[float, ...]


# =============================================================================
# Errors
# =============================================================================

class ValidationError(ValueError):
    """Malformed input: a file record, a constructor argument or a config value."""

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        field: Optional[str] = None,
        record_id: Optional[str] = None
    ):
        self.line = line
        self.field = field
        self.record_id = record_id

        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if record_id is not None:
            parts.append(record_id)
        if field is not None:
            parts.append(f"field '{field}'")
        prefix = f"{', '.join(parts)}: " if parts else ""
        super().__init__(prefix + message)


class InvariantError(AssertionError):
    """An internal invariant was violated (a bug, not bad input)."""


# =============================================================================
# Bounding Boxes
# =============================================================================

@dataclass(frozen=True)
class BoundingBox:
    """Integer pixel box, half-open on both axes."""
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if any(isinstance(c, bool) or not isinstance(c, (int, np.integer)) for c in coords):
            raise ValidationError(f"box coordinates must be integers, got {list(coords)}", field="box")
        if min(coords) < 0:
            raise ValidationError(f"box coordinates must be non-negative, got {list(coords)}", field="box")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValidationError(f"box has no area: {list(coords)}", field="box")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersection_area(self, other: "BoundingBox") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0
        return w * h

    def within(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height

    def to_list(self) -> List[int]:
        return [int(self.x_min), int(self.y_min), int(self.x_max), int(self.y_max)]

    @classmethod
    def from_list(cls, values: Sequence[Any]) -> "BoundingBox":
        if not isinstance(values, (list, tuple)) or len(values) != 4:
            raise ValidationError(f"box must be [x_min, y_min, x_max, y_max], got {values!r}", field="box")
        return cls(*values)

    def to_mask(self, width: int, height: int) -> "PixelMask":
        """The box as a solid mask on a width x height frame."""
        if not self.within(width, height):
            raise ValidationError(f"box {self.to_list()} exceeds frame {width}x{height}", field="box")
        runs = tuple((y * width + self.x_min, self.width) for y in range(self.y_min, self.y_max))
        if self.width == width:
            # full-width rows merge into a single run
            runs = ((self.y_min * width, self.area),)
        return PixelMask(width, height, runs)


# =============================================================================
# Run-Length Pixel Masks
# =============================================================================

def _encode_runs(flat: np.ndarray) -> Tuple[Tuple[int, int], ...]:
    """Maximal (start, length) runs of a flat boolean array."""
    padded = np.concatenate(([False], flat.astype(bool), [False]))
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = changes[0::2], changes[1::2]
    return tuple((int(s), int(e - s)) for s, e in zip(starts, ends))


@dataclass(frozen=True)
class PixelMask:
    """
    Non-empty pixel set on a width x height frame, stored as row-major runs.

    Runs are sorted, non-overlapping and maximal (no two runs touch).
    """
    width: int
    height: int
    runs: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"mask dimensions must be positive, got {self.width}x{self.height}", field="mask_rle")
        if not self.runs:
            raise ValidationError("mask is empty", field="mask_rle")
        limit = self.width * self.height
        previous_end = -1
        for start, length in self.runs:
            if length <= 0:
                raise ValidationError(f"run length must be positive, got {length}", field="mask_rle")
            if start < 0 or start + length > limit:
                raise ValidationError(f"run ({start}, {length}) outside frame of {limit} pixels", field="mask_rle")
            if start <= previous_end:
                raise ValidationError("runs must be sorted, disjoint and non-adjacent", field="mask_rle")
            previous_end = start + length

    @classmethod
    def from_array(cls, array: np.ndarray) -> "PixelMask":
        """Build from a 2D boolean array (height x width)."""
        array = np.asarray(array)
        if array.ndim != 2:
            raise ValidationError(f"mask array must be 2D, got shape {array.shape}", field="mask_rle")
        height, width = array.shape
        return cls(int(width), int(height), _encode_runs(array.reshape(-1)))

    @classmethod
    def from_rle(cls, rle: Sequence[int], width: int, height: int) -> "PixelMask":
        """Build from a flat [start, len, start, len, ...] list; runs are canonicalised."""
        if len(rle) % 2 != 0:
            raise ValidationError("mask_rle must hold start/length pairs", field="mask_rle")
        if any(isinstance(v, bool) or not isinstance(v, (int, np.integer)) for v in rle):
            raise ValidationError("mask_rle values must be integers", field="mask_rle")
        limit = width * height
        flat = np.zeros(limit, dtype=bool)
        for start, length in zip(rle[0::2], rle[1::2]):
            if length <= 0 or start < 0 or start + length > limit:
                raise ValidationError(f"run ({start}, {length}) outside frame of {limit} pixels", field="mask_rle")
            flat[start:start + length] = True
        return cls(width, height, _encode_runs(flat))

    def to_rle(self) -> List[int]:
        return [v for run in self.runs for v in run]

    @cached_property
    def flat(self) -> np.ndarray:
        """Occupancy as a flat boolean array of width*height pixels."""
        flat = np.zeros(self.width * self.height, dtype=bool)
        for start, length in self.runs:
            flat[start:start + length] = True
        return flat

    def to_array(self) -> np.ndarray:
        return self.flat.reshape(self.height, self.width)

    @property
    def area(self) -> int:
        return sum(length for _, length in self.runs)

    def bounding_box(self) -> BoundingBox:
        rows, cols = np.nonzero(self.to_array())
        return BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)

    def union(self, other: "PixelMask") -> "PixelMask":
        _check_same_frame(self, other)
        return PixelMask(self.width, self.height, _encode_runs(self.flat | other.flat))

    def intersection_area(self, other: "PixelMask") -> int:
        _check_same_frame(self, other)
        return int(np.count_nonzero(self.flat & other.flat))


def _check_same_frame(a: PixelMask, b: PixelMask) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise ValidationError(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}",
            field="mask_rle"
        )


# =============================================================================
# Regions
# =============================================================================

@dataclass(frozen=True)
class Extent:
    """A ground-truth region on one frame: a box, optionally with its pixel mask."""
    box: BoundingBox
    mask: Optional[PixelMask] = None

    def __post_init__(self):
        if self.mask is not None and self.mask.bounding_box() != self.box:
            raise ValidationError("box must be the minimum bounding box of the mask", field="box")

    @classmethod
    def from_mask(cls, mask: PixelMask) -> "Extent":
        return cls(mask.bounding_box(), mask)


@dataclass(frozen=True)
class RegionProposal:
    """
    One frame-level detection hypothesis.

    `scores` holds one classifier margin per class; `actionness` is the
    fraction of the frame's flow magnitude inside the region, once measured.
    """
    frame_index: int
    box: BoundingBox
    scores: ScoreVector = ()
    mask: Optional[PixelMask] = None
    actionness: Optional[float] = None

    def __post_init__(self):
        if self.frame_index < 1:
            raise ValidationError(f"frame index is 1-based, got {self.frame_index}", field="frame")
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if not all(math.isfinite(s) for s in self.scores):
            raise ValidationError("scores must be finite", field="scores")
        if self.mask is not None and self.mask.bounding_box() != self.box:
            raise ValidationError("box must be the minimum bounding box of the mask", field="box")
        if self.actionness is not None and not 0.0 <= self.actionness <= 1.0:
            raise ValidationError(f"actionness must lie in [0, 1], got {self.actionness}", field="actionness")

    @classmethod
    def from_mask(cls, frame_index: int, mask: PixelMask, scores: Sequence[float] = ()) -> "RegionProposal":
        return cls(frame_index, mask.bounding_box(), tuple(scores), mask)

    def with_scores(self, scores: Sequence[float]) -> "RegionProposal":
        return replace(self, scores=tuple(scores))

    def with_actionness(self, mu: float) -> "RegionProposal":
        return replace(self, actionness=mu)


@dataclass(frozen=True)
class VideoProposals:
    """All proposals of one video, one (possibly empty) tuple per frame."""
    video_id: str
    frame_width: int
    frame_height: int
    class_names: Tuple[str, ...]
    frames: Tuple[Tuple[RegionProposal, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "frames", tuple(tuple(f) for f in self.frames))
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValidationError("frame dimensions must be positive", record_id=self.video_id)
        if not self.class_names:
            raise ValidationError("at least one class is required", field="class_names", record_id=self.video_id)
        for t, proposals in enumerate(self.frames, 1):
            for proposal in proposals:
                if proposal.frame_index != t:
                    raise ValidationError(
                        f"proposal frame {proposal.frame_index} stored at position {t}",
                        field="frame", record_id=self.video_id
                    )
                if len(proposal.scores) != self.class_count:
                    raise ValidationError(
                        f"frame {t}: expected {self.class_count} scores, got {len(proposal.scores)}",
                        field="scores", record_id=self.video_id
                    )
                if not proposal.box.within(self.frame_width, self.frame_height):
                    raise ValidationError(
                        f"frame {t}: box {proposal.box.to_list()} exceeds "
                        f"{self.frame_width}x{self.frame_height}",
                        field="box", record_id=self.video_id
                    )

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def proposal_count(self) -> int:
        return sum(len(f) for f in self.frames)

    def frame(self, t: int) -> Tuple[RegionProposal, ...]:
        """Proposals on 1-based frame t."""
        return self.frames[t - 1]

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class '{name}'", field="class", record_id=self.video_id)

    def with_frames(self, frames: Iterable[Iterable[RegionProposal]]) -> "VideoProposals":
        return replace(self, frames=tuple(tuple(f) for f in frames))


# =============================================================================
# Paths, Labels and Tubes
# =============================================================================

@dataclass(frozen=True)
class ActionPath:
    """
    One proposal per frame over the whole video, bound to one class.

    `indices[t-1]` is the proposal's position within frame t, or -1 for a
    placeholder (its member is None).
    """
    class_id: int
    members: Tuple[Optional[RegionProposal], ...]
    indices: Tuple[int, ...]
    energy: float

    def __post_init__(self):
        if len(self.members) != len(self.indices):
            raise InvariantError("path members and indices differ in length")
        for t, member in enumerate(self.members, 1):
            if member is not None and member.frame_index != t:
                raise InvariantError(f"path member at position {t} belongs to frame {member.frame_index}")
        if not math.isfinite(self.energy):
            raise InvariantError("path energy must be finite")

    @property
    def length(self) -> int:
        return len(self.members)

    @property
    def placeholder_flags(self) -> Tuple[bool, ...]:
        return tuple(m is None for m in self.members)


@dataclass(frozen=True)
class LabelSequence:
    """Per-frame class labels of an action path; index C (if used) is background."""
    labels: Tuple[int, ...]
    objective: float = 0.0

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> int:
        return self.labels[i]

    @property
    def changes(self) -> int:
        return sum(1 for a, b in zip(self.labels, self.labels[1:]) if a != b)


@dataclass(frozen=True)
class ActionTube:
    """A temporally contiguous, class-labelled run of regions with a global score."""
    video_id: str
    class_id: int
    class_name: str
    t_start: int
    t_end: int
    members: Tuple[RegionProposal, ...]
    score: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.t_start < 1 or self.t_start > self.t_end:
            raise ValidationError(f"invalid interval [{self.t_start}, {self.t_end}]", record_id=self.video_id)
        if len(self.members) != self.t_end - self.t_start + 1:
            raise ValidationError(
                f"{len(self.members)} members for interval [{self.t_start}, {self.t_end}]",
                record_id=self.video_id
            )

    @property
    def length(self) -> int:
        return self.t_end - self.t_start + 1

    def region_at(self, t: int) -> RegionProposal:
        return self.members[t - self.t_start]

    def average_area(self) -> float:
        """Area from the mean member box width and height."""
        widths = [m.box.width for m in self.members]
        heights = [m.box.height for m in self.members]
        return float(np.mean(widths) * np.mean(heights))


@dataclass(frozen=True)
class GroundTruthTube:
    """Annotated action: class name plus one extent per frame of [t_start, t_end]."""
    video_id: str
    class_name: str
    t_start: int
    t_end: int
    extents: Tuple[Extent, ...] = field(default_factory=tuple)
    tube_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(self.extents))
        label = self.tube_id or f"{self.video_id}/{self.class_name}"
        if self.t_start < 1 or self.t_start > self.t_end:
            raise ValidationError(f"invalid interval [{self.t_start}, {self.t_end}]", record_id=label)
        if len(self.extents) != self.t_end - self.t_start + 1:
            raise ValidationError(
                f"{len(self.extents)} extents for interval [{self.t_start}, {self.t_end}]",
                field="extents", record_id=label
            )

    @property
    def length(self) -> int:
        return self.t_end - self.t_start + 1

    def region_at(self, t: int) -> Extent:
        return self.extents[t - self.t_start]

    def average_area(self) -> float:
        widths = [e.box.width for e in self.extents]
        heights = [e.box.height for e in self.extents]
        return float(np.mean(widths) * np.mean(heights))


# =============================================================================
# Overlap Geometry
# =============================================================================

def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes under pixel-area semantics."""
    inter = a.intersection_area(b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def mask_iou(a: PixelMask, b: PixelMask) -> float:
    """Intersection over union of two pixel sets on the same frame."""
    inter = a.intersection_area(b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def region_areas(a: Any, b: Any) -> Tuple[int, int, int]:
    """
    (intersection, area of a, area of b) for two regions.

    Pixel masks are used when both regions carry one, boxes otherwise.
    """
    if a.mask is not None and b.mask is not None:
        return a.mask.intersection_area(b.mask), a.mask.area, b.mask.area
    return a.box.intersection_area(b.box), a.box.area, b.box.area


def region_overlap(a: Any, b: Any) -> float:
    """IoU of two regions (proposals or extents): mask IoU if both are masked, else box IoU."""
    if a.mask is not None and b.mask is not None:
        return mask_iou(a.mask, b.mask)
    return box_iou(a.box, b.box)


def boxes_array(regions: Sequence[Any]) -> np.ndarray:
    """n x 4 int array of region boxes."""
    if not regions:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([r.box.to_list() for r in regions], dtype=np.int64)


def overlap_matrix(regions_a: Sequence[Any], regions_b: Sequence[Any]) -> np.ndarray:
    """Pairwise region_overlap between two region lists, as a float matrix."""
    a, b = boxes_array(regions_a), boxes_array(regions_b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))

    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union

    # masked pairs: exact pixel IoU, only where the boxes meet at all
    masked_a = [i for i, r in enumerate(regions_a) if r.mask is not None]
    masked_b = [j for j, r in enumerate(regions_b) if r.mask is not None]
    for i in masked_a:
        for j in masked_b:
            if inter[i, j] > 0:
                iou[i, j] = mask_iou(regions_a[i].mask, regions_b[j].mask)
    return iou
