#!/usr/bin/env python3
"""
Synthetic Scenarios and Oracles
===============================
Seeded scenario generator (planted tubes among distractor proposals) and
exhaustive-search oracles for both dynamic programs, so the linker can be
checked without any trained model.

Randomness comes from numpy's PCG64 bit generator seeded with the scenario
seed; the same seed always yields the same proposals, byte for byte.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core_model import (
    ActionPath,
    BoundingBox,
    Extent,
    GroundTruthTube,
    LabelSequence,
    RegionProposal,
    ValidationError,
    VideoProposals,
)
from .tube_builder import pair_energy, smoothness_potential

logger = logging.getLogger(__name__)

ORACLE_LIMIT = 10 ** 6
DISTRACTOR_SCORE_RANGE = (-1.0, -0.5)


class OracleTooLargeError(ValueError):
    """The exhaustive search space exceeds ORACLE_LIMIT candidates."""


@dataclass(frozen=True)
class PlantedTube:
    """An action moving linearly from box_start (at t_start) to box_end (at t_end)."""
    class_name: str
    t_start: int
    t_end: int
    box_start: BoundingBox
    box_end: BoundingBox
    margin: float = 1.0

    def box_at(self, t: int) -> BoundingBox:
        span = self.t_end - self.t_start
        frac = (t - self.t_start) / span if span else 0.0
        a, b = self.box_start.to_list(), self.box_end.to_list()
        return BoundingBox(*[int(np.floor(u + (v - u) * frac + 0.5)) for u, v in zip(a, b)])

    @classmethod
    def from_dict(cls, data: Dict) -> "PlantedTube":
        box_start = BoundingBox.from_list(data.get("box_start"))
        return cls(
            class_name=data["class"],
            t_start=data["t_start"],
            t_end=data["t_end"],
            box_start=box_start,
            box_end=BoundingBox.from_list(data.get("box_end", box_start.to_list())),
            margin=data.get("margin", 1.0)
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "class": self.class_name,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "box_start": self.box_start.to_list(),
            "box_end": self.box_end.to_list(),
            "margin": self.margin,
        }


@dataclass(frozen=True)
class ScenarioSpec:
    width: int
    height: int
    frame_count: int
    class_names: Tuple[str, ...]
    plants: Tuple[PlantedTube, ...] = field(default_factory=tuple)
    distractors: int = 0
    score_noise: float = 0.0
    box_jitter: int = 0
    seed: int = 0
    video_id: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "plants", tuple(self.plants))
        if self.width <= 0 or self.height <= 0 or self.frame_count < 1:
            raise ValidationError("width, height and frame_count must be positive", record_id=self.video_id)
        if not self.class_names:
            raise ValidationError("at least one class is required", field="class_names")
        if self.distractors < 0 or self.score_noise < 0 or self.box_jitter < 0:
            raise ValidationError("distractors, score_noise and box_jitter must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed}", field="seed")
        for plant in self.plants:
            if plant.class_name not in self.class_names:
                raise ValidationError(f"unknown class '{plant.class_name}'", field="plants")
            if not 1 <= plant.t_start <= plant.t_end <= self.frame_count:
                raise ValidationError(
                    f"interval [{plant.t_start}, {plant.t_end}] outside 1..{self.frame_count}", field="plants"
                )
            if plant.margin <= 0:
                raise ValidationError(f"margin must be > 0, got {plant.margin}", field="plants")
            for box in (plant.box_start, plant.box_end):
                if not box.within(self.width, self.height):
                    raise ValidationError(f"box {box.to_list()} exceeds the frame", field="plants")

    @classmethod
    def from_dict(cls, data: Dict) -> "ScenarioSpec":
        """Create ScenarioSpec from a scenario-file dictionary."""
        try:
            return cls(
                width=data["width"],
                height=data["height"],
                frame_count=data["frame_count"],
                class_names=tuple(data["class_names"]),
                plants=tuple(PlantedTube.from_dict(p) for p in data.get("plants", [])),
                distractors=data.get("distractors", 0),
                score_noise=data.get("score_noise", 0.0),
                box_jitter=data.get("box_jitter", 0),
                seed=data.get("seed", 0),
                video_id=data.get("video_id", "synthetic")
            )
        except KeyError as e:
            raise ValidationError("missing", field=str(e.args[0])) from e
        except TypeError as e:
            raise ValidationError(f"malformed scenario: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            "video_id": self.video_id,
            "width": self.width,
            "height": self.height,
            "frame_count": self.frame_count,
            "class_names": list(self.class_names),
            "plants": [p.to_dict() for p in self.plants],
            "distractors": self.distractors,
            "score_noise": self.score_noise,
            "box_jitter": self.box_jitter,
            "seed": self.seed,
        }


def load_scenario(path: str) -> ScenarioSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(data, dict):
        raise ValidationError("scenario file must hold a JSON object")
    return ScenarioSpec.from_dict(data)


# =============================================================================
# Generator
# =============================================================================

def _jitter(box: BoundingBox, amount: int, width: int, height: int, rng: np.random.Generator) -> BoundingBox:
    if amount == 0:
        return box
    dx0, dy0, dx1, dy1 = (int(d) for d in rng.integers(-amount, amount + 1, size=4))
    x_min = min(max(box.x_min + dx0, 0), width - 1)
    y_min = min(max(box.y_min + dy0, 0), height - 1)
    x_max = min(max(box.x_max + dx1, x_min + 1), width)
    y_max = min(max(box.y_max + dy1, y_min + 1), height)
    return BoundingBox(x_min, y_min, x_max, y_max)


def _random_box(width: int, height: int, rng: np.random.Generator) -> BoundingBox:
    w = int(rng.integers(max(1, width // 12), max(2, width // 3) + 1))
    h = int(rng.integers(max(1, height // 12), max(2, height // 3) + 1))
    w, h = min(w, width), min(h, height)
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    return BoundingBox(x, y, x + w, y + h)


def generate_scenario(spec: ScenarioSpec) -> Tuple[VideoProposals, List[GroundTruthTube]]:
    """
    Proposals and ground truth for a scenario.

    Each planted tube contributes one proposal per covered frame scoring
    margin + noise for its class and noise elsewhere; distractors score
    uniformly in [-1, -0.5] for every class. Frame order is shuffled.
    Ground truth holds the unjittered plant boxes.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    C = len(spec.class_names)
    a = spec.score_noise

    def noise(size: int) -> np.ndarray:
        if a == 0:
            return np.zeros(size)
        return rng.uniform(-a, a, size=size)

    frames = []
    for t in range(1, spec.frame_count + 1):
        proposals = []
        for plant in spec.plants:
            if not plant.t_start <= t <= plant.t_end:
                continue
            box = _jitter(plant.box_at(t), spec.box_jitter, spec.width, spec.height, rng)
            scores = noise(C)
            scores[spec.class_names.index(plant.class_name)] += plant.margin
            proposals.append(RegionProposal(t, box, tuple(scores)))
        for _ in range(spec.distractors):
            box = _random_box(spec.width, spec.height, rng)
            scores = rng.uniform(*DISTRACTOR_SCORE_RANGE, size=C)
            proposals.append(RegionProposal(t, box, tuple(scores)))
        order = rng.permutation(len(proposals))
        frames.append(tuple(proposals[i] for i in order))

    video = VideoProposals(spec.video_id, spec.width, spec.height, spec.class_names, tuple(frames))
    gts = [
        GroundTruthTube(
            video_id=spec.video_id,
            class_name=plant.class_name,
            t_start=plant.t_start,
            t_end=plant.t_end,
            extents=tuple(Extent(plant.box_at(t)) for t in range(plant.t_start, plant.t_end + 1)),
            tube_id=f"{spec.video_id}#{n}"
        )
        for n, plant in enumerate(spec.plants, 1)
    ]
    logger.debug("%s: generated %d proposals, %d planted tubes", spec.video_id, video.proposal_count, len(gts))
    return video, gts


def random_video(
    rng: np.random.Generator,
    frame_count: int,
    max_proposals: int,
    class_count: int,
    width: int = 32,
    height: int = 32,
    allow_empty: bool = False,
    video_id: str = "random"
) -> VideoProposals:
    """Small random video for oracle cross-checks: uniform scores in [-1, 1], random boxes."""
    low = 0 if allow_empty else 1
    frames = []
    for t in range(1, frame_count + 1):
        n = int(rng.integers(low, max_proposals + 1))
        frames.append(tuple(
            RegionProposal(t, _random_box(width, height, rng), tuple(rng.uniform(-1.0, 1.0, size=class_count)))
            for _ in range(n)
        ))
    names = tuple(f"class_{c}" for c in range(class_count))
    return VideoProposals(video_id, width, height, names, tuple(frames))


# =============================================================================
# Oracles
# =============================================================================

def _enumerate(sizes: Sequence[int]) -> np.ndarray:
    """All index combinations, one row each, in lexicographic order."""
    total = int(np.prod([int(s) for s in sizes], dtype=object))
    if total > ORACLE_LIMIT:
        raise OracleTooLargeError(f"{total} candidates exceed the oracle limit of {ORACLE_LIMIT}")
    return np.indices(tuple(sizes)).reshape(len(sizes), -1).T


def oracle_best_path(
    video: VideoProposals,
    class_id: int,
    lam: float,
    placeholder_score: float = 0.0
) -> Tuple[ActionPath, float]:
    """Exhaustive best path; ties go to the smallest indices compared from the last frame back."""
    T = video.frame_count
    if T == 0:
        raise ValidationError("video has no frames", record_id=video.video_id)

    nodes = [list(f) if f else [None] for f in video.frames]
    candidates = _enumerate([len(n) for n in nodes])

    if T == 1:
        totals = np.array([
            m.scores[class_id] if m is not None else placeholder_score for m in nodes[0]
        ])
    else:
        tables = [
            np.array([[pair_energy(r, q, class_id, lam, placeholder_score) for q in nodes[t + 1]]
                      for r in nodes[t]])
            for t in range(T - 1)
        ]
        totals = np.zeros(len(candidates))
        for t in range(T - 1):
            totals = totals + tables[t][candidates[:, t], candidates[:, t + 1]]

    best = totals.max()
    ties = candidates[totals == best]
    # lexsort's primary key is the last one: the last frame
    chosen = ties[np.lexsort(tuple(ties[:, t] for t in range(T)))[0]]

    members = tuple(nodes[t][k] for t, k in enumerate(chosen))
    indices = tuple(-1 if m is None else int(k) for m, k in zip(members, chosen))
    energy = float(best) if T == 1 else float(best) / T
    return ActionPath(class_id, members, indices, energy), energy


def _label_table(
    path: ActionPath,
    class_count: int,
    background_score: Optional[float],
    placeholder_score: float
) -> np.ndarray:
    rows = []
    for member in path.members:
        row = list(member.scores) if member is not None else [placeholder_score] * class_count
        if background_score is not None:
            row.append(background_score)
        rows.append(row)
    return np.array(rows, dtype=float)


def path_labelling_energy(
    labels: Sequence[int],
    path: ActionPath,
    video: VideoProposals,
    alpha: float,
    background_score: Optional[float] = None,
    placeholder_score: float = 0.0
) -> float:
    """Sum of per-frame label scores minus alpha per label change."""
    S = _label_table(path, video.class_count, background_score, placeholder_score)
    if len(labels) != S.shape[0]:
        raise ValidationError(f"{len(labels)} labels for a path of {S.shape[0]} frames")
    total = 0.0
    previous = None
    for t, label in enumerate(labels):
        cost = 0.0 if previous is None else smoothness_potential(previous, label, alpha)
        total = float(S[t, label]) + (total - cost)
        previous = label
    return total


def oracle_best_labels(
    path: ActionPath,
    video: VideoProposals,
    alpha: float,
    background_score: Optional[float] = None,
    placeholder_score: float = 0.0
) -> Tuple[LabelSequence, float]:
    """
    Exhaustive best labelling. Among optimal sequences the last label is
    the smallest; walking backwards, the next label stays unchanged when
    some optimal sequence allows it, otherwise it is the smallest allowed.
    """
    S = _label_table(path, video.class_count, background_score, placeholder_score)
    T, L = S.shape
    candidates = _enumerate([L] * T)

    totals = S[0, candidates[:, 0]] + 0.0
    for t in range(1, T):
        prev, cur = candidates[:, t - 1], candidates[:, t]
        cost = np.where(prev == cur, 0.0, float(alpha))
        totals = S[t, cur] + (totals - cost)

    best = float(totals.max())
    ties = candidates[totals == best]

    label = int(ties[:, T - 1].min())
    ties = ties[ties[:, T - 1] == label]
    chosen = [label]
    for t in range(T - 2, -1, -1):
        allowed = ties[:, t]
        label = label if np.any(allowed == label) else int(allowed.min())
        ties = ties[allowed == label]
        chosen.append(label)
    chosen.reverse()
    return LabelSequence(tuple(int(c) for c in chosen), best), best
