"""Tests for the tubelink command line."""

import json

import pytest

import tubelink
from src.proposal_ingest import read_tubes, read_videos, save_proposals

from builders import video, write_jsonl


@pytest.fixture
def generated(tmp_path, small_scenario):
    """Proposals and ground truth of the small scenario, written by `gen`."""
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps(small_scenario))
    out = tmp_path / "gen"
    assert tubelink.main(["gen", str(scenario), "-o", str(out)]) == 0
    return out / "small_proposals.jsonl", out / "small_gt.jsonl"


@pytest.fixture
def linked(tmp_path, generated):
    proposals, gt = generated
    tubes = tmp_path / "tubes.jsonl"
    assert tubelink.main(["link", str(proposals), "-o", str(tubes), "-q"]) == 0
    return tubes, gt


class TestPipeline:

    def test_link_finds_planted_tube(self, linked):
        tubes, _ = linked
        found = read_tubes(str(tubes))
        assert [(t.video_id, t.class_name, t.t_start, t.t_end) for t in found] == [("small", "walking", 10, 34)]

    def test_eval_report(self, tmp_path, linked):
        tubes, gt = linked
        report_path = tmp_path / "report.json"
        curves_path = tmp_path / "curves.csv"
        code = tubelink.main([
            "eval", str(tubes), str(gt), "-o", str(report_path), "--curves", str(curves_path), "--no-localisation"
        ])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["detection"]["f1"] == 1.0
        assert report["no_localisation"]["true_positives"] == 1
        assert len(curves_path.read_text().splitlines()) == 1 + 44

    def test_curves(self, tmp_path, linked):
        tubes, gt = linked
        out = tmp_path / "curves.csv"
        assert tubelink.main(["curves", str(tubes), str(gt), "-o", str(out), "--grid-step", "0.25"]) == 0
        assert len(out.read_text().splitlines()) == 1 + 4 * 5

    def test_confusion(self, tmp_path, linked):
        tubes, gt = linked
        out = tmp_path / "confusion.csv"
        assert tubelink.main(["eval", str(tubes), str(gt), "--confusion", str(out)]) == 0
        assert out.read_text().splitlines()[1] == "walking,1"

    def test_gen_is_deterministic(self, tmp_path, small_scenario):
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps(small_scenario))
        for name in ("a", "b"):
            assert tubelink.main(["gen", str(scenario), "-o", str(tmp_path / name)]) == 0
        for suffix in ("proposals", "gt"):
            first = (tmp_path / "a" / f"small_{suffix}.jsonl").read_bytes()
            assert first == (tmp_path / "b" / f"small_{suffix}.jsonl").read_bytes()

    def test_gen_seed_override(self, tmp_path, small_scenario, capsys):
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps(small_scenario))
        assert tubelink.main(["gen", str(scenario), "-o", str(tmp_path), "--seed", "9"]) == 0
        assert "Seed: 9" in capsys.readouterr().out

    def test_empty_proposals_file(self, tmp_path):
        proposals = tmp_path / "empty.jsonl"
        proposals.write_text("")
        out = tmp_path / "tubes.jsonl"
        assert tubelink.main(["link", str(proposals), "-o", str(out)]) == 0
        assert out.read_text() == ""

    def test_link_options(self, tmp_path, generated):
        proposals, _ = generated
        out = tmp_path / "tubes.jsonl"
        code = tubelink.main([
            "link", str(proposals), "-o", str(out), "--max-paths", "auto", "--background-score", "none",
            "--alpha", "2", "--threads", "2"
        ])
        assert code == 0

    def test_score_with_zero_weights(self, tmp_path):
        proposals = tmp_path / "proposals.jsonl"
        save_proposals(video([[((0, 0, 4, 4), (0.0, 0.0))], [((1, 1, 5, 5), (0.0, 0.0))]]), str(proposals))
        features = write_jsonl(tmp_path / "features.jsonl", [
            {"video_id": "v1", "frame": t, "proposal_index": 0, "x_a": [1, 2], "x_f": [3, 4]} for t in (1, 2)
        ])
        model = tmp_path / "model.json"
        model.write_text(json.dumps({
            "class_names": ["a", "b"], "feature_dim": 4, "weights": [[0] * 4, [0] * 4], "biases": [0.5, -1.0]
        }))
        out = tmp_path / "scored.jsonl"
        code = tubelink.main(["score", str(proposals), "-f", features, "-m", str(model), "-o", str(out)])
        assert code == 0
        (scored,) = read_videos(str(out))
        assert scored.class_names == ("a", "b")
        assert all(p.scores == (0.5, -1.0) for frame in scored.frames for p in frame)


class TestExitCodes:

    def test_no_command(self):
        assert tubelink.main([]) == tubelink.EXIT_USAGE

    def test_unknown_flag(self, tmp_path):
        assert tubelink.main(["link", "x.jsonl", "-o", str(tmp_path / "t.jsonl"), "--bogus"]) == tubelink.EXIT_USAGE

    def test_missing_input(self, tmp_path):
        code = tubelink.main(["link", str(tmp_path / "absent.jsonl"), "-o", str(tmp_path / "t.jsonl")])
        assert code == tubelink.EXIT_INPUT

    def test_invalid_override(self, tmp_path, generated):
        proposals, _ = generated
        code = tubelink.main(["link", str(proposals), "-o", str(tmp_path / "t.jsonl"), "--alpha", "-1"])
        assert code == tubelink.EXIT_INPUT

    def test_missing_config_file(self, tmp_path):
        assert tubelink.main(["config", "--config", str(tmp_path / "absent.json")]) == tubelink.EXIT_INPUT

    def test_unknown_class(self, tmp_path, generated):
        _, gt = generated
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"class_names": ["walking", "running"]}))
        tubes = write_jsonl(tmp_path / "tubes.jsonl", [
            {"video_id": "small", "class": "jumping", "t_start": 1, "t_end": 1, "score": 1.0, "boxes": [[0, 0, 5, 5]]}
        ])
        assert tubelink.main(["eval", tubes, str(gt), "--config", str(config)]) == tubelink.EXIT_INPUT


class TestConfigCommand:

    def test_set_and_get(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text("{}")
        assert tubelink.main(["config", "--config", str(path), "--set", "alpha=5"]) == 0
        assert tubelink.main(["config", "--config", str(path), "--set", "max_paths=null"]) == 0
        saved = json.loads(path.read_text())
        assert saved["alpha"] == 5.0
        assert saved["max_paths"] is None

        assert tubelink.main(["config", "--config", str(path), "--get", "alpha"]) == 0
        assert "alpha = 5.0" in capsys.readouterr().out

    def test_set_class_area(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{}")
        assert tubelink.main(["config", "-c", str(path), "--set", "class_areas.walking=2200"]) == 0
        assert json.loads(path.read_text())["class_areas"] == {"walking": 2200.0}

    def test_set_requires_equals(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{}")
        assert tubelink.main(["config", "-c", str(path), "--set", "alpha"]) == tubelink.EXIT_USAGE

    def test_set_rejects_bad_value(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{}")
        assert tubelink.main(["config", "-c", str(path), "--set", "delta=0"]) == tubelink.EXIT_INPUT
        assert json.loads(path.read_text()) == {}

    def test_areas_saved_to_config(self, tmp_path, generated):
        _, gt = generated
        path = tmp_path / "config.json"
        path.write_text("{}")
        assert tubelink.main(["areas", str(gt), "-c", str(path), "--save"]) == 0
        assert json.loads(path.read_text())["class_areas"] == {"walking": 900.0}
