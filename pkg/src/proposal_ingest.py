#!/usr/bin/env python3
"""
Proposal Ingest
===============
Reads and writes the JSON-lines files the pipeline exchanges (proposals,
ground truth, tubes, flow magnitude maps, binary segmentations), prunes
proposals by actionness and per-class NMS, and turns binary motion masks
into proposals through the power set of their connected components.

File layouts are documented in README.md.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .core_model import (
    ActionTube,
    BoundingBox,
    Extent,
    GroundTruthTube,
    PixelMask,
    RegionProposal,
    ValidationError,
    VideoProposals,
    overlap_matrix,
)

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class FlowMagnitudeMap:
    """Normalised optical-flow magnitude per pixel (height x width array)."""
    width: int
    height: int
    magnitudes: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.magnitudes, dtype=float)
        if values.shape != (self.height, self.width):
            raise ValidationError(
                f"expected {self.height}x{self.width} magnitudes, got shape {values.shape}",
                field="magnitudes"
            )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValidationError("flow magnitudes must be finite and non-negative", field="magnitudes")
        values.setflags(write=False)
        object.__setattr__(self, "magnitudes", values)

    @property
    def total(self) -> float:
        return float(self.magnitudes.sum())


@dataclass(frozen=True)
class BinarySegmentation:
    """Foreground/background map of one frame; `foreground` is None when empty."""
    width: int
    height: int
    foreground: Optional[PixelMask] = None

    def __post_init__(self):
        fg = self.foreground
        if fg is not None and (fg.width, fg.height) != (self.width, self.height):
            raise ValidationError("foreground mask does not match the frame size", field="mask_rle")


# =============================================================================
# JSON-lines Plumbing
# =============================================================================

Source = Union[str, Path, Sequence[str]]


def _parse_lines(lines: Iterable[str]) -> Iterator[Tuple[int, Dict[str, Any]]]:
    for line_no, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"invalid JSON: {e.msg}", line=line_no) from e
        if not isinstance(record, dict):
            raise ValidationError("each line must hold a JSON object", line=line_no)
        yield line_no, record


def iter_records(source: Source) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    Yield (line number, object) for every non-blank line.

    `source` is a file path, or the lines themselves as a list.
    """
    if not isinstance(source, (str, Path)):
        yield from _parse_lines(source)
        return

    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r") as f:
        yield from _parse_lines(f)


def require_field(record: Dict[str, Any], key: str, kind: Any, line_no: int) -> Any:
    """record[key], checked against `kind`; bools never pass for numbers."""
    if key not in record:
        raise ValidationError("missing", line=line_no, field=key)
    value = record[key]
    if isinstance(value, bool) and kind is not bool:
        raise ValidationError(f"expected {getattr(kind, '__name__', kind)}", line=line_no, field=key)
    if not isinstance(value, kind):
        raise ValidationError(f"expected {getattr(kind, '__name__', kind)}, got {value!r}", line=line_no, field=key)
    return value


def _write_lines(path: Path, records: Sequence[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, separators=(", ", ": ")))
            f.write("\n")


def _parse_mask(rle: Any, width: int, height: int, line_no: int) -> PixelMask:
    if not isinstance(rle, list):
        raise ValidationError("expected a list", line=line_no, field="mask_rle")
    try:
        return PixelMask.from_rle(rle, width, height)
    except ValidationError as e:
        raise ValidationError(str(e), line=line_no, field="mask_rle") from e


# =============================================================================
# Proposals
# =============================================================================

def _parse_proposal(
    item: Any,
    frame_index: int,
    width: int,
    height: int,
    class_count: int,
    line_no: int
) -> RegionProposal:
    if not isinstance(item, dict):
        raise ValidationError("proposal must be an object", line=line_no, field="proposals")

    scores = require_field(item, "scores", list, line_no)
    if len(scores) != class_count:
        raise ValidationError(
            f"expected {class_count} scores, got {len(scores)}", line=line_no, field="scores"
        )
    if not all(isinstance(s, (int, float)) and not isinstance(s, bool) and math.isfinite(s) for s in scores):
        raise ValidationError("scores must be finite numbers", line=line_no, field="scores")

    mask = None
    if item.get("mask_rle") is not None:
        mask = _parse_mask(item["mask_rle"], width, height, line_no)

    try:
        if "box" in item:
            box = BoundingBox.from_list(item["box"])
        elif mask is not None:
            box = mask.bounding_box()
        else:
            raise ValidationError("missing", field="box")
        actionness = item.get("actionness")
        return RegionProposal(frame_index, box, tuple(scores), mask, actionness)
    except ValidationError as e:
        raise ValidationError(str(e).split(": ", 1)[-1], line=line_no, field=e.field or "box") from e


def _build_video(header: Dict[str, Any], frames: Dict[int, List[RegionProposal]], line_no: int) -> VideoProposals:
    frame_count = header["frame_count"]
    ordered = [tuple(frames.get(t, ())) for t in range(1, frame_count + 1)]
    try:
        return VideoProposals(
            video_id=header["video_id"],
            frame_width=header["width"],
            frame_height=header["height"],
            class_names=tuple(header["class_names"]),
            frames=tuple(ordered)
        )
    except ValidationError as e:
        raise ValidationError(str(e), line=line_no) from e


def read_videos(path: Source) -> List[VideoProposals]:
    """
    Load every video of a proposals file, in file order.

    A header line (one carrying "frame_count") opens a video; the frame
    records that follow belong to it. Frames without a record are empty.
    """
    videos: List[VideoProposals] = []
    header: Optional[Dict[str, Any]] = None
    header_line = 0
    frames: Dict[int, List[RegionProposal]] = {}

    for line_no, record in iter_records(path):
        if "frame_count" in record:
            if header is not None:
                videos.append(_build_video(header, frames, header_line))
            video_id = require_field(record, "video_id", str, line_no)
            frame_count = require_field(record, "frame_count", int, line_no)
            class_names = require_field(record, "class_names", list, line_no)
            if not class_names or not all(isinstance(c, str) for c in class_names):
                raise ValidationError("must be a non-empty list of strings", line=line_no, field="class_names")
            if frame_count < 0:
                raise ValidationError("must be >= 0", line=line_no, field="frame_count")
            header = {
                "video_id": video_id,
                "frame_count": frame_count,
                "class_names": class_names,
                "width": record.get("width"),
                "height": record.get("height"),
            }
            header_line = line_no
            frames = {}
            continue

        if header is None:
            raise ValidationError("frame record before any header line", line=line_no)

        video_id = require_field(record, "video_id", str, line_no)
        if video_id != header["video_id"]:
            raise ValidationError(
                f"belongs to '{video_id}' but follows the header of '{header['video_id']}'",
                line=line_no, field="video_id"
            )
        frame = require_field(record, "frame", int, line_no)
        width = require_field(record, "width", int, line_no)
        height = require_field(record, "height", int, line_no)
        proposals = require_field(record, "proposals", list, line_no)

        if not 1 <= frame <= header["frame_count"]:
            raise ValidationError(f"frame {frame} outside 1..{header['frame_count']}", line=line_no, field="frame")
        if frame in frames:
            raise ValidationError(f"duplicate record for frame {frame}", line=line_no, field="frame")
        if header["width"] is None:
            header["width"], header["height"] = width, height
        elif (width, height) != (header["width"], header["height"]):
            raise ValidationError("frame size differs from the rest of the video", line=line_no, field="width")

        class_count = len(header["class_names"])
        frames[frame] = [
            _parse_proposal(item, frame, width, height, class_count, line_no) for item in proposals
        ]

    if header is not None:
        if header["width"] is None:
            raise ValidationError("video has no frame size (no width/height)", line=header_line, field="width")
        videos.append(_build_video(header, frames, header_line))

    return videos


def load_proposals(path: str) -> VideoProposals:
    """Load a single-video proposals file."""
    videos = read_videos(path)
    if len(videos) != 1:
        raise ValidationError(f"expected exactly one video in {path}, found {len(videos)}")
    return videos[0]


def _proposal_record(proposal: RegionProposal) -> Dict[str, Any]:
    record: Dict[str, Any] = {"box": proposal.box.to_list(), "scores": list(proposal.scores)}
    if proposal.mask is not None:
        record["mask_rle"] = proposal.mask.to_rle()
    if proposal.actionness is not None:
        record["actionness"] = proposal.actionness
    return record


def video_records(video: VideoProposals) -> List[Dict[str, Any]]:
    """The JSON-lines records of one video: header, then one line per frame."""
    records: List[Dict[str, Any]] = [{
        "video_id": video.video_id,
        "frame_count": video.frame_count,
        "width": video.frame_width,
        "height": video.frame_height,
        "class_names": list(video.class_names),
    }]
    for t, proposals in enumerate(video.frames, 1):
        records.append({
            "video_id": video.video_id,
            "frame": t,
            "width": video.frame_width,
            "height": video.frame_height,
            "proposals": [_proposal_record(p) for p in proposals],
        })
    return records


def write_videos(videos: Sequence[VideoProposals], path: str) -> None:
    _write_lines(Path(path), [r for video in videos for r in video_records(video)])


def save_proposals(video: VideoProposals, path: str) -> None:
    write_videos([video], path)


# =============================================================================
# Ground Truth
# =============================================================================

def _resolve_class(value: Any, class_names: Optional[Sequence[str]], line_no: int) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, int) and not isinstance(value, bool):
        if class_names:
            if not 1 <= value <= len(class_names):
                raise ValidationError(f"class id {value} outside 1..{len(class_names)}", line=line_no, field="class")
            return class_names[value - 1]
        return str(value)
    raise ValidationError("expected a class name or 1-based id", line=line_no, field="class")


def _parse_extent(item: Any, width: Optional[int], height: Optional[int], line_no: int) -> Extent:
    if not isinstance(item, dict):
        raise ValidationError("extent must be an object", line=line_no, field="extents")
    try:
        if item.get("mask_rle") is not None:
            if width is None or height is None:
                raise ValidationError("mask extents need the record's width and height", field="extents")
            mask = _parse_mask(item["mask_rle"], width, height, line_no)
            return Extent.from_mask(mask)
        box = BoundingBox.from_list(item.get("box"))
        if width is not None and height is not None and not box.within(width, height):
            raise ValidationError(f"box {box.to_list()} exceeds {width}x{height}", field="box")
        return Extent(box)
    except ValidationError as e:
        raise ValidationError(str(e).split(": ", 1)[-1], line=line_no, field=e.field or "extents") from e


def load_ground_truth(path: Source, class_names: Optional[Sequence[str]] = None) -> List[GroundTruthTube]:
    """
    Load annotated tubes.

    Integer classes are 1-based ids into `class_names` when given; string
    classes are used as-is.
    """
    tubes: List[GroundTruthTube] = []
    for line_no, record in iter_records(path):
        video_id = require_field(record, "video_id", str, line_no)
        class_name = _resolve_class(record.get("class"), class_names, line_no)
        t_start = require_field(record, "t_start", int, line_no)
        t_end = require_field(record, "t_end", int, line_no)
        extents = require_field(record, "extents", list, line_no)
        tube_id = record.get("tube_id") or f"{video_id}#{len(tubes) + 1}"

        width, height = record.get("width"), record.get("height")
        parsed = [_parse_extent(item, width, height, line_no) for item in extents]
        try:
            tubes.append(GroundTruthTube(video_id, class_name, t_start, t_end, tuple(parsed), tube_id))
        except ValidationError as e:
            raise ValidationError(str(e), line=line_no) from e
    return tubes


def _extent_record(region: Any) -> Dict[str, Any]:
    if region.mask is not None:
        return {"mask_rle": region.mask.to_rle()}
    return {"box": region.box.to_list()}


def ground_truth_record(tube: GroundTruthTube) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "video_id": tube.video_id,
        "class": tube.class_name,
        "t_start": tube.t_start,
        "t_end": tube.t_end,
    }
    if tube.tube_id:
        record["tube_id"] = tube.tube_id
    masks = [e.mask for e in tube.extents if e.mask is not None]
    if masks:
        record["width"], record["height"] = masks[0].width, masks[0].height
    record["extents"] = [_extent_record(e) for e in tube.extents]
    return record


def save_ground_truth(tubes: Sequence[GroundTruthTube], path: str) -> None:
    _write_lines(Path(path), [ground_truth_record(t) for t in tubes])


# =============================================================================
# Detected Tubes
# =============================================================================

def tube_record(tube: ActionTube) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "video_id": tube.video_id,
        "class": tube.class_name,
        "t_start": tube.t_start,
        "t_end": tube.t_end,
        "score": tube.score,
        "boxes": [m.box.to_list() for m in tube.members],
    }
    masks = [m.mask for m in tube.members]
    if any(m is not None for m in masks):
        record["width"] = next(m.width for m in masks if m is not None)
        record["height"] = next(m.height for m in masks if m is not None)
        record["mask_rle"] = [m.to_rle() if m is not None else None for m in masks]
    return record


def write_tubes(tubes: Sequence[ActionTube], path: str) -> None:
    _write_lines(Path(path), [tube_record(t) for t in tubes])


def read_tubes(path: Source, class_names: Optional[Sequence[str]] = None) -> List[ActionTube]:
    """
    Load detected tubes. Members come back as score-less proposals.

    `class_id` is the class's index in `class_names` when given, else -1.
    """
    tubes: List[ActionTube] = []
    for line_no, record in iter_records(path):
        video_id = require_field(record, "video_id", str, line_no)
        class_name = _resolve_class(record.get("class"), class_names, line_no)
        t_start = require_field(record, "t_start", int, line_no)
        t_end = require_field(record, "t_end", int, line_no)
        score = require_field(record, "score", (int, float), line_no)
        boxes = require_field(record, "boxes", list, line_no)
        rles = record.get("mask_rle") or [None] * len(boxes)
        if len(rles) != len(boxes):
            raise ValidationError("mask_rle and boxes differ in length", line=line_no, field="mask_rle")
        if len(boxes) != t_end - t_start + 1:
            raise ValidationError(
                f"{len(boxes)} boxes for interval [{t_start}, {t_end}]", line=line_no, field="boxes"
            )

        members = []
        for offset, (box, rle) in enumerate(zip(boxes, rles)):
            try:
                mask = None
                if rle is not None:
                    mask = _parse_mask(rle, record.get("width"), record.get("height"), line_no)
                members.append(RegionProposal(t_start + offset, BoundingBox.from_list(box), (), mask))
            except (ValidationError, TypeError) as e:
                raise ValidationError(str(e), line=line_no, field="boxes") from e

        class_id = list(class_names).index(class_name) if class_names and class_name in class_names else -1
        try:
            tubes.append(ActionTube(video_id, class_id, class_name, t_start, t_end, tuple(members), float(score)))
        except ValidationError as e:
            raise ValidationError(str(e), line=line_no) from e
    return tubes


# =============================================================================
# Flow Maps and Segmentations
# =============================================================================

def load_flow_maps(path: str) -> Dict[Tuple[str, int], FlowMagnitudeMap]:
    """Flow magnitude maps keyed by (video_id, frame); magnitudes are row-major."""
    maps: Dict[Tuple[str, int], FlowMagnitudeMap] = {}
    for line_no, record in iter_records(path):
        video_id = require_field(record, "video_id", str, line_no)
        frame = require_field(record, "frame", int, line_no)
        width = require_field(record, "width", int, line_no)
        height = require_field(record, "height", int, line_no)
        values = require_field(record, "magnitudes", list, line_no)
        if len(values) != width * height:
            raise ValidationError(
                f"expected {width * height} magnitudes, got {len(values)}", line=line_no, field="magnitudes"
            )
        try:
            grid = np.asarray(values, dtype=float).reshape(height, width)
            maps[(video_id, frame)] = FlowMagnitudeMap(width, height, grid)
        except (ValidationError, ValueError, TypeError) as e:
            raise ValidationError(str(e), line=line_no, field="magnitudes") from e
    return maps


def load_segmentations(path: str) -> Dict[Tuple[str, int], BinarySegmentation]:
    """Binary segmentations keyed by (video_id, frame); an empty mask_rle means no foreground."""
    segs: Dict[Tuple[str, int], BinarySegmentation] = {}
    for line_no, record in iter_records(path):
        video_id = require_field(record, "video_id", str, line_no)
        frame = require_field(record, "frame", int, line_no)
        width = require_field(record, "width", int, line_no)
        height = require_field(record, "height", int, line_no)
        rle = require_field(record, "mask_rle", list, line_no)
        foreground = _parse_mask(rle, width, height, line_no) if rle else None
        segs[(video_id, frame)] = BinarySegmentation(width, height, foreground)
    return segs


# =============================================================================
# Actionness Pruning
# =============================================================================

def actionness(region: RegionProposal, flow: FlowMagnitudeMap) -> float:
    """
    Share of the frame's total flow magnitude inside the region.

    Sums over mask pixels when the region has a mask, box pixels otherwise.
    A frame without any flow gives 0.
    """
    if region.mask is not None:
        if (region.mask.width, region.mask.height) != (flow.width, flow.height):
            raise ValidationError("flow map and mask sizes differ", field="magnitudes")
    elif not region.box.within(flow.width, flow.height):
        raise ValidationError("box lies outside the flow map", field="box")

    total = flow.total
    if total <= 0:
        return 0.0

    if region.mask is not None:
        inside = float(flow.magnitudes[region.mask.to_array()].sum())
    else:
        b = region.box
        inside = float(flow.magnitudes[b.y_min:b.y_max, b.x_min:b.x_max].sum())
    return min(1.0, inside / total)


def prune_by_actionness(
    proposals: Sequence[RegionProposal],
    flow: FlowMagnitudeMap,
    threshold: float
) -> List[RegionProposal]:
    """Keep proposals with actionness >= threshold, annotated with their value; order kept."""
    kept = []
    for proposal in proposals:
        mu = actionness(proposal, flow)
        if mu >= threshold:
            kept.append(proposal.with_actionness(mu))
    return kept


def prune_video(
    video: VideoProposals,
    flows: Dict[Tuple[str, int], FlowMagnitudeMap],
    threshold: float
) -> VideoProposals:
    """Actionness pruning over every frame that has a flow map."""
    frames = []
    removed = 0
    for t, proposals in enumerate(video.frames, 1):
        flow = flows.get((video.video_id, t))
        if flow is None:
            frames.append(proposals)
            continue
        kept = prune_by_actionness(proposals, flow, threshold)
        removed += len(proposals) - len(kept)
        frames.append(tuple(kept))
    logger.debug("%s: actionness pruning removed %d proposals", video.video_id, removed)
    return video.with_frames(frames)


# =============================================================================
# Non-Maximum Suppression
# =============================================================================

def nms_indices(
    scores: Sequence[float],
    overlaps: np.ndarray,
    iou_threshold: float,
    candidates: Optional[Sequence[int]] = None
) -> List[int]:
    """
    Greedy NMS on precomputed pairwise overlaps.

    Visits candidates by descending score (equal scores: smaller index
    first) and keeps one unless it overlaps a kept one by >= iou_threshold.
    Returns kept indices in visiting order.
    """
    order = list(candidates) if candidates is not None else list(range(len(scores)))
    order.sort(key=lambda i: (-scores[i], i))
    kept: List[int] = []
    for i in order:
        if all(overlaps[i, j] < iou_threshold for j in kept):
            kept.append(i)
    return kept


def nms(proposals: Sequence[RegionProposal], class_id: int, iou_threshold: float) -> List[RegionProposal]:
    """Per-class greedy NMS on one frame's proposals, best first."""
    if not proposals:
        return []
    frames = {p.frame_index for p in proposals}
    if len(frames) != 1:
        raise ValidationError(f"NMS expects proposals of a single frame, got frames {sorted(frames)}")
    scores = [p.scores[class_id] for p in proposals]
    keep = nms_indices(scores, overlap_matrix(proposals, proposals), iou_threshold)
    return [proposals[i] for i in keep]


def nms_video(video: VideoProposals, iou_threshold: float) -> VideoProposals:
    """Keep proposals that survive NMS for at least one class, in their original order."""
    frames = []
    for proposals in video.frames:
        if not proposals:
            frames.append(())
            continue
        overlaps = overlap_matrix(proposals, proposals)
        keep = set()
        for c in range(video.class_count):
            keep.update(nms_indices([p.scores[c] for p in proposals], overlaps, iou_threshold))
        frames.append(tuple(p for i, p in enumerate(proposals) if i in keep))
    return video.with_frames(frames)


# =============================================================================
# Power-Set Proposals from Binary Segmentations
# =============================================================================

def connected_components(seg: BinarySegmentation) -> List[PixelMask]:
    """8-connected foreground blobs, ordered by their first pixel in row-major order."""
    if seg.foreground is None:
        return []
    labels, count = ndimage.label(seg.foreground.to_array(), structure=EIGHT_CONNECTED)
    flat = labels.reshape(-1)
    components = []
    for label in range(1, count + 1):
        members = flat == label
        first = int(np.argmax(members))
        components.append((first, PixelMask.from_array(members.reshape(labels.shape))))
    components.sort(key=lambda item: item[0])
    return [mask for _, mask in components]


def powerset_proposals(
    components: Sequence[PixelMask],
    frame_index: int,
    cap: int = 12,
    class_count: int = 0
) -> List[RegionProposal]:
    """
    One mask proposal per non-empty subset of the components.

    Beyond `cap` components only the `cap` largest (by pixel count, earlier
    first on ties) are combined. Subsets are listed by size, then
    lexicographically by component order. Scores are zeros.
    """
    if not components:
        return []

    chosen = list(range(len(components)))
    if len(components) > cap:
        by_size = sorted(chosen, key=lambda i: (-components[i].area, i))
        chosen = sorted(by_size[:cap])
        logger.warning(
            "frame %d: %d components exceed the power-set cap, dropping the %d smallest",
            frame_index, len(components), len(components) - cap
        )

    masks = [components[i] for i in chosen]
    zeros = (0.0,) * class_count
    proposals = []
    for size in range(1, len(masks) + 1):
        for subset in itertools.combinations(range(len(masks)), size):
            union = masks[subset[0]].flat.copy()
            for k in subset[1:]:
                union |= masks[k].flat
            mask = PixelMask.from_array(union.reshape(masks[0].height, masks[0].width))
            proposals.append(RegionProposal.from_mask(frame_index, mask, zeros))
    return proposals


def proposals_from_segmentations(
    segs: Dict[Tuple[str, int], BinarySegmentation],
    video_id: str,
    frame_count: int,
    class_names: Sequence[str],
    cap: int = 12
) -> VideoProposals:
    """Build a whole video's proposals from its per-frame binary segmentations."""
    sizes = {(s.width, s.height) for (vid, _), s in segs.items() if vid == video_id}
    if len(sizes) != 1:
        raise ValidationError(f"video '{video_id}' needs segmentations of a single frame size, got {sorted(sizes)}")
    width, height = sizes.pop()

    frames = []
    for t in range(1, frame_count + 1):
        seg = segs.get((video_id, t))
        if seg is None:
            frames.append(())
            continue
        frames.append(tuple(powerset_proposals(connected_components(seg), t, cap, len(class_names))))
    return VideoProposals(video_id, width, height, tuple(class_names), tuple(frames))
