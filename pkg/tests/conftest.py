"""Shared fixtures."""

from pathlib import Path

import pytest

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


@pytest.fixture
def small_scenario():
    """One walking tube over frames 10-34 among three distractors per frame."""
    return {
        "video_id": "small",
        "width": 100,
        "height": 100,
        "frame_count": 44,
        "class_names": ["walking", "running"],
        "plants": [
            {"class": "walking", "t_start": 10, "t_end": 34,
             "box_start": [10, 10, 40, 40], "box_end": [10, 10, 40, 40], "margin": 1.0}
        ],
        "distractors": 3,
        "score_noise": 0.0,
        "box_jitter": 0,
        "seed": 3,
    }
