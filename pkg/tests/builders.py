"""Small builders for proposals, videos and tubes used across the tests."""

import json

from src.core_model import (
    ActionTube,
    BoundingBox,
    Extent,
    GroundTruthTube,
    RegionProposal,
    VideoProposals,
)


def proposal(t, coords, scores):
    return RegionProposal(t, BoundingBox(*coords), tuple(scores))


def video(frames, class_names=("walking", "running"), width=100, height=100, video_id="v1"):
    """
    Build a VideoProposals from nested lists.

    `frames[t-1]` is a list of (box coords, scores) pairs for frame t.
    """
    built = [
        tuple(proposal(t, coords, scores) for coords, scores in items)
        for t, items in enumerate(frames, 1)
    ]
    return VideoProposals(video_id, width, height, tuple(class_names), tuple(built))


def det_tube(t_start, boxes, class_name="walking", score=1.0, video_id="v1", class_id=0):
    members = tuple(
        RegionProposal(t_start + i, BoundingBox(*coords), ()) for i, coords in enumerate(boxes)
    )
    return ActionTube(video_id, class_id, class_name, t_start, t_start + len(boxes) - 1, members, score)


def gt_tube(t_start, boxes, class_name="walking", video_id="v1", tube_id=None):
    extents = tuple(Extent(BoundingBox(*coords)) for coords in boxes)
    return GroundTruthTube(video_id, class_name, t_start, t_start + len(boxes) - 1, extents, tube_id)


def write_jsonl(path, records):
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return str(path)
