"""Tests for file formats, actionness pruning, NMS and power-set proposals."""

import json
import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from src.core_model import (
    ActionTube,
    BoundingBox,
    Extent,
    GroundTruthTube,
    PixelMask,
    RegionProposal,
    ValidationError,
    VideoProposals,
    box_iou,
)
from src.proposal_ingest import (
    BinarySegmentation,
    FlowMagnitudeMap,
    actionness,
    connected_components,
    iter_records,
    load_flow_maps,
    load_ground_truth,
    load_proposals,
    load_segmentations,
    nms,
    nms_video,
    powerset_proposals,
    proposals_from_segmentations,
    prune_by_actionness,
    read_tubes,
    read_videos,
    require_field,
    save_ground_truth,
    save_proposals,
    write_tubes,
)

from builders import det_tube, gt_tube, proposal, video, write_jsonl

HEADER = {"video_id": "v1", "frame_count": 3, "width": 20, "height": 20, "class_names": ["a", "b"]}


def frame_record(frame, proposals, video_id="v1"):
    return {"video_id": video_id, "frame": frame, "width": 20, "height": 20, "proposals": proposals}


class TestProposalFiles:

    def test_missing_and_empty_frames_have_no_proposals(self, tmp_path):
        path = write_jsonl(tmp_path / "p.jsonl", [
            HEADER,
            frame_record(1, [{"box": [0, 0, 5, 5], "scores": [0.5, -0.5]}]),
            frame_record(2, []),
        ])
        loaded = load_proposals(path)
        assert loaded.frame_count == 3
        assert [len(f) for f in loaded.frames] == [1, 0, 0]
        assert loaded.frame(1)[0].scores == (0.5, -0.5)

    def test_wrong_score_length_names_line_and_field(self, tmp_path):
        path = write_jsonl(tmp_path / "p.jsonl", [
            HEADER,
            frame_record(1, [{"box": [0, 0, 5, 5], "scores": [0.5]}]),
        ])
        with pytest.raises(ValidationError) as excinfo:
            load_proposals(path)
        assert excinfo.value.line == 2
        assert excinfo.value.field == "scores"

    def test_frame_before_header(self, tmp_path):
        path = write_jsonl(tmp_path / "p.jsonl", [frame_record(1, [])])
        with pytest.raises(ValidationError, match="before any header"):
            read_videos(path)

    def test_frame_out_of_range(self, tmp_path):
        path = write_jsonl(tmp_path / "p.jsonl", [HEADER, frame_record(4, [])])
        with pytest.raises(ValidationError) as excinfo:
            read_videos(path)
        assert excinfo.value.field == "frame"

    def test_invalid_json_line(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text("{\"video_id\": \"v1\"\nnot json\n")
        with pytest.raises(ValidationError) as excinfo:
            read_videos(str(path))
        assert excinfo.value.line == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_videos(str(tmp_path / "absent.jsonl"))

    def test_several_videos(self, tmp_path):
        second = dict(HEADER, video_id="v2", frame_count=1)
        path = write_jsonl(tmp_path / "p.jsonl", [
            HEADER, frame_record(1, []), second, frame_record(1, [], video_id="v2"),
        ])
        assert [v.video_id for v in read_videos(path)] == ["v1", "v2"]

    def test_lines_instead_of_path(self):
        lines = [json.dumps(HEADER), json.dumps(frame_record(2, [{"box": [1, 1, 3, 3], "scores": [0, 1]}]))]
        videos = read_videos(lines)
        assert videos[0].proposal_count == 1

    def test_save_and_load_with_masks(self, tmp_path):
        mask = PixelMask.from_rle([21, 3, 41, 2], 20, 20)
        original = VideoProposals("v1", 20, 20, ("a", "b"), (
            (RegionProposal.from_mask(1, mask, (0.25, -1.5)),),
            (),
            (RegionProposal(3, BoundingBox(2, 2, 9, 9), (1.0, 2.0), None, 0.125),),
        ))
        path = str(tmp_path / "p.jsonl")
        save_proposals(original, path)
        assert load_proposals(path) == original


class TestGroundTruthFiles:

    def test_empty_file(self, tmp_path):
        path = tmp_path / "gt.jsonl"
        path.write_text("")
        assert load_ground_truth(str(path)) == []

    def test_reversed_interval(self, tmp_path):
        path = write_jsonl(tmp_path / "gt.jsonl", [
            {"video_id": "v1", "class": "a", "t_start": 5, "t_end": 4, "extents": []}
        ])
        with pytest.raises(ValidationError):
            load_ground_truth(path)

    def test_extent_count_mismatch_names_tube(self, tmp_path):
        path = write_jsonl(tmp_path / "gt.jsonl", [
            {"video_id": "v1", "class": "a", "t_start": 1, "t_end": 3, "tube_id": "v1#7",
             "extents": [{"box": [0, 0, 2, 2]}]}
        ])
        with pytest.raises(ValidationError, match="v1#7"):
            load_ground_truth(path)

    def test_integer_classes_are_one_based(self, tmp_path):
        path = write_jsonl(tmp_path / "gt.jsonl", [
            {"video_id": "v1", "class": 2, "t_start": 1, "t_end": 1, "extents": [{"box": [0, 0, 2, 2]}]}
        ])
        assert load_ground_truth(path, ["walking", "running"])[0].class_name == "running"

    def test_round_trip(self, tmp_path):
        tubes = [gt_tube(2, [(0, 0, 4, 4), (1, 0, 5, 4)], tube_id="v1#1"),
                 gt_tube(1, [(3, 3, 9, 9)], class_name="running", tube_id="v1#2")]
        path = str(tmp_path / "gt.jsonl")
        save_ground_truth(tubes, path)
        assert load_ground_truth(path) == tubes


class TestTubeFiles:

    def test_round_trip_keeps_boxes_and_scores(self, tmp_path):
        tubes = [det_tube(3, [(0, 0, 4, 4), (1, 1, 5, 5)], score=0.75)]
        path = str(tmp_path / "tubes.jsonl")
        write_tubes(tubes, path)
        loaded = read_tubes(path, ["walking", "running"])
        assert loaded == tubes

    def test_unknown_vocabulary_gives_negative_class_id(self, tmp_path):
        path = str(tmp_path / "tubes.jsonl")
        write_tubes([det_tube(1, [(0, 0, 4, 4)])], path)
        assert read_tubes(path)[0].class_id == -1

    def test_box_count_must_match_interval(self, tmp_path):
        path = write_jsonl(tmp_path / "tubes.jsonl", [
            {"video_id": "v1", "class": "a", "t_start": 1, "t_end": 2, "score": 1.0, "boxes": [[0, 0, 1, 1]]}
        ])
        with pytest.raises(ValidationError):
            read_tubes(path)


class TestRecordHelpers:

    def test_blank_lines_are_skipped(self):
        lines = ["", json.dumps({"a": 1}), "   ", json.dumps({"b": 2})]
        assert list(iter_records(lines)) == [(2, {"a": 1}), (4, {"b": 2})]

    def test_non_object_line(self):
        with pytest.raises(ValidationError, match="JSON object") as excinfo:
            list(iter_records([json.dumps([1, 2])]))
        assert excinfo.value.line == 1

    def test_require_field(self):
        assert require_field({"frame": 3}, "frame", int, 7) == 3
        assert require_field({"score": 2}, "score", (int, float), 7) == 2

    @pytest.mark.parametrize("record", [{}, {"frame": True}, {"frame": "3"}, {"frame": 3.0}])
    def test_require_field_rejects(self, record):
        with pytest.raises(ValidationError) as excinfo:
            require_field(record, "frame", int, 7)
        assert (excinfo.value.line, excinfo.value.field) == (7, "frame")


FRAME = 20
CLASSES = ("walking", "running", "waving")
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
names = st.text("abcxyz_#-0123", min_size=1, max_size=8)


@st.composite
def boxes(draw):
    x0 = draw(st.integers(0, FRAME - 1))
    y0 = draw(st.integers(0, FRAME - 1))
    return BoundingBox(x0, y0, draw(st.integers(x0 + 1, FRAME)), draw(st.integers(y0 + 1, FRAME)))


@st.composite
def pixel_masks(draw):
    pixels = sorted(draw(st.sets(st.integers(0, FRAME * FRAME - 1), min_size=1, max_size=12)))
    return PixelMask.from_rle([v for p in pixels for v in (p, 1)], FRAME, FRAME)


@st.composite
def regions(draw, t, class_count):
    scores = draw(st.lists(finite, min_size=class_count, max_size=class_count))
    if draw(st.booleans()):
        return RegionProposal.from_mask(t, draw(pixel_masks()), scores)
    mu = draw(st.one_of(st.none(), st.floats(0.0, 1.0)))
    return RegionProposal(t, draw(boxes()), tuple(scores), None, mu)


@st.composite
def videos(draw):
    class_names = tuple(draw(st.lists(st.sampled_from(CLASSES), min_size=1, max_size=3, unique=True)))
    frames = [
        tuple(draw(regions(t, len(class_names))) for _ in range(draw(st.integers(0, 3))))
        for t in range(1, draw(st.integers(0, 4)) + 1)
    ]
    return VideoProposals(draw(names), FRAME, FRAME, class_names, tuple(frames))


@st.composite
def ground_truth_tubes(draw):
    t_start, length = draw(st.integers(1, 30)), draw(st.integers(1, 4))
    extents = tuple(
        Extent.from_mask(draw(pixel_masks())) if draw(st.booleans()) else Extent(draw(boxes()))
        for _ in range(length)
    )
    return GroundTruthTube(
        draw(names), draw(st.sampled_from(CLASSES)), t_start, t_start + length - 1, extents, draw(names)
    )


@st.composite
def action_tubes(draw):
    class_id = draw(st.integers(0, len(CLASSES) - 1))
    t_start, length = draw(st.integers(1, 30)), draw(st.integers(1, 4))
    members = tuple(
        RegionProposal.from_mask(t, draw(pixel_masks())) if draw(st.booleans()) else RegionProposal(t, draw(boxes()))
        for t in range(t_start, t_start + length)
    )
    return ActionTube(
        draw(names), class_id, CLASSES[class_id], t_start, t_start + length - 1, members, draw(finite)
    )


# every example rewrites the same file under tmp_path
ROUND_TRIP = settings(max_examples=1000, suppress_health_check=[HealthCheck.function_scoped_fixture])


class TestFileRoundTrips:

    @ROUND_TRIP
    @given(videos())
    def test_proposals(self, tmp_path, original):
        path = str(tmp_path / "p.jsonl")
        save_proposals(original, path)
        assert read_videos(path) == [original]

    @ROUND_TRIP
    @given(st.lists(ground_truth_tubes(), max_size=4))
    def test_ground_truth(self, tmp_path, tubes):
        path = str(tmp_path / "gt.jsonl")
        save_ground_truth(tubes, path)
        assert load_ground_truth(path) == tubes

    @ROUND_TRIP
    @given(st.lists(action_tubes(), max_size=4))
    def test_tubes(self, tmp_path, tubes):
        path = str(tmp_path / "tubes.jsonl")
        write_tubes(tubes, path)
        assert read_tubes(path, CLASSES) == tubes


class TestActionness:

    def flow(self, values):
        values = np.asarray(values, dtype=float)
        return FlowMagnitudeMap(values.shape[1], values.shape[0], values)

    def test_whole_frame(self):
        flow = self.flow(np.arange(16).reshape(4, 4))
        assert actionness(proposal(1, (0, 0, 4, 4), ()), flow) == 1.0

    def test_region_without_motion(self):
        values = np.zeros((4, 4))
        values[3, 3] = 2.0
        assert actionness(proposal(1, (0, 0, 2, 2), ()), self.flow(values)) == 0.0

    def test_uniform_map(self):
        assert actionness(proposal(1, (0, 0, 2, 2), ()), self.flow(np.ones((4, 4)))) == 0.25

    def test_frame_without_motion(self):
        assert actionness(proposal(1, (0, 0, 2, 2), ()), self.flow(np.zeros((4, 4)))) == 0.0

    def test_masked_region_sums_mask_pixels(self):
        values = np.ones((4, 4))
        mask = PixelMask.from_rle([0, 2, 4, 1], 4, 4)
        assert actionness(RegionProposal.from_mask(1, mask), self.flow(values)) == pytest.approx(3 / 16)

    def test_pruning(self):
        flow = self.flow(np.ones((4, 4)))
        small = proposal(1, (0, 0, 2, 2), ())
        large = proposal(1, (0, 0, 4, 2), ())
        assert prune_by_actionness([small, large], flow, 0.0) == [
            small.with_actionness(0.25), large.with_actionness(0.5)
        ]
        assert prune_by_actionness([small, large], flow, 0.3) == [large.with_actionness(0.5)]
        assert prune_by_actionness([small, large], flow, 1.0 + 1e-9) == []

    @settings(max_examples=1000)
    @given(
        st.integers(2, 8), st.integers(1, 8), st.data()
    )
    def test_column_partition_sums_to_one(self, width, height, data):
        values = data.draw(st.lists(
            st.integers(0, 1000), min_size=width * height, max_size=width * height
        ))
        flow = self.flow((np.array(values) / 100.0).reshape(height, width))
        if flow.total <= 0:
            return
        cut = data.draw(st.integers(1, width - 1))
        left = actionness(proposal(1, (0, 0, cut, height), ()), flow)
        right = actionness(proposal(1, (cut, 0, width, height), ()), flow)
        assert left + right == pytest.approx(1.0, abs=1e-9)

    def test_flow_file_is_row_major(self, tmp_path):
        path = write_jsonl(tmp_path / "flow.jsonl", [
            {"video_id": "v1", "frame": 1, "width": 3, "height": 2, "magnitudes": [0, 1, 2, 3, 4, 5]}
        ])
        flow = load_flow_maps(path)[("v1", 1)]
        assert flow.magnitudes[1, 0] == 3.0
        assert flow.total == 15.0

    def test_negative_flow_rejected(self, tmp_path):
        path = write_jsonl(tmp_path / "flow.jsonl", [
            {"video_id": "v1", "frame": 1, "width": 2, "height": 1, "magnitudes": [0, -1]}
        ])
        with pytest.raises(ValidationError):
            load_flow_maps(path)


@st.composite
def frame_proposals(draw):
    n = draw(st.integers(1, 8))
    items = []
    for _ in range(n):
        x0 = draw(st.integers(0, 15))
        y0 = draw(st.integers(0, 15))
        x1 = draw(st.integers(x0 + 1, 20))
        y1 = draw(st.integers(y0 + 1, 20))
        score = draw(st.floats(-2.0, 2.0, allow_nan=False))
        items.append(proposal(1, (x0, y0, x1, y1), (score,)))
    return items


class TestNms:

    def test_single_proposal(self):
        p = proposal(1, (0, 0, 5, 5), (1.0,))
        assert nms([p], 0, 0.3) == [p]

    def test_identical_boxes_keep_best(self):
        low = proposal(1, (0, 0, 5, 5), (1.0,))
        high = proposal(1, (0, 0, 5, 5), (2.0,))
        assert nms([low, high], 0, 0.5) == [high]

    def test_chain_of_overlaps(self):
        # IoU(a, b) = 0.6, IoU(a, c) = IoU(b, c) = 0.0: b falls to a, c survives
        a = proposal(1, (0, 0, 10, 10), (3.0,))
        b = proposal(1, (0, 0, 6, 10), (2.0,))
        c = proposal(1, (20, 0, 30, 10), (1.0,))
        assert box_iou(a.box, b.box) == pytest.approx(0.6)
        assert nms([c, b, a], 0, 0.5) == [a, c]

    def test_mixed_frames_rejected(self):
        with pytest.raises(ValidationError):
            nms([proposal(1, (0, 0, 1, 1), (0.0,)), proposal(2, (0, 0, 1, 1), (0.0,))], 0, 0.3)

    @settings(max_examples=1000)
    @given(frame_proposals(), st.floats(0.05, 0.95))
    def test_survivors_form_an_antichain(self, proposals, threshold):
        kept = nms(proposals, 0, threshold)
        for i, p in enumerate(kept):
            for q in kept[i + 1:]:
                assert box_iou(p.box, q.box) < threshold
        kept_ids = {id(p) for p in kept}
        for p in proposals:
            if id(p) not in kept_ids:
                assert any(box_iou(p.box, q.box) >= threshold for q in kept)

    def test_video_keeps_survivors_of_any_class(self):
        v = video([[((0, 0, 10, 10), (2.0, 0.0)), ((0, 0, 10, 10), (1.0, 5.0)), ((0, 0, 9, 10), (0.0, 0.0))]])
        frame = nms_video(v, 0.5).frame(1)
        assert [p.scores for p in frame] == [(2.0, 0.0), (1.0, 5.0)]


def segmentation(array):
    array = np.asarray(array, dtype=bool)
    h, w = array.shape
    fg = PixelMask.from_array(array) if array.any() else None
    return BinarySegmentation(w, h, fg)


class TestConnectedComponents:

    def test_empty_foreground(self):
        assert connected_components(segmentation(np.zeros((4, 4)))) == []

    def test_single_blob(self):
        seg = segmentation([[0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]])
        assert connected_components(seg) == [seg.foreground]

    def test_diagonal_contact_joins_blobs(self):
        seg = segmentation([[1, 0, 0], [0, 1, 0], [0, 0, 0]])
        assert len(connected_components(seg)) == 1

    def test_separate_blobs_in_row_major_order(self):
        seg = segmentation([[0, 0, 0, 1], [1, 0, 0, 1], [1, 0, 0, 0]])
        components = connected_components(seg)
        assert [c.bounding_box() for c in components] == [BoundingBox(3, 0, 4, 2), BoundingBox(0, 1, 1, 3)]


class TestPowersetProposals:

    def blobs(self, count):
        array = np.zeros((3, 2 * count), dtype=bool)
        array[1, ::2] = True
        return connected_components(segmentation(array))

    def test_single_component(self):
        assert len(powerset_proposals(self.blobs(1), 1)) == 1

    def test_three_components_give_seven(self):
        assert len(powerset_proposals(self.blobs(3), 1)) == 7

    def test_pair_and_union_box(self):
        a, b = self.blobs(2)
        proposals = powerset_proposals([a, b], 4, class_count=2)
        assert [p.mask for p in proposals[:2]] == [a, b]
        assert proposals[2].mask == a.union(b)
        assert proposals[2].box == BoundingBox(0, 1, 3, 2)
        assert all(p.frame_index == 4 and p.scores == (0.0, 0.0) for p in proposals)

    def test_cap_keeps_largest_components(self, caplog):
        array = np.zeros((5, 9), dtype=bool)
        array[0, 0] = True          # 1 pixel
        array[0:2, 3:5] = True      # 4 pixels
        array[4, 0:3] = True        # 3 pixels
        array[3:5, 7:9] = True      # 4 pixels
        components = connected_components(segmentation(array))
        with caplog.at_level(logging.WARNING):
            proposals = powerset_proposals(components, 1, cap=3)
        assert len(proposals) == 7
        assert all(p.mask.intersection_area(components[0]) == 0 for p in proposals)
        assert "power-set cap" in caplog.text

    def test_video_from_segmentation_file(self, tmp_path):
        path = write_jsonl(tmp_path / "seg.jsonl", [
            {"video_id": "v1", "frame": 1, "width": 4, "height": 3, "mask_rle": [0, 1, 3, 1]},
            {"video_id": "v1", "frame": 2, "width": 4, "height": 3, "mask_rle": []},
        ])
        built = proposals_from_segmentations(load_segmentations(path), "v1", 3, ["a", "b"])
        assert [len(f) for f in built.frames] == [3, 0, 0]
        assert built.frame(1)[0].scores == (0.0, 0.0)
