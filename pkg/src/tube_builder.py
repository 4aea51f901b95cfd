#!/usr/bin/env python3
"""
Tube Builder
============
The linking core. For every class:

1. a forward dynamic program over the per-frame proposal sets finds the
   action path maximising (1/T) * sum_t E_c(r_t, r_t+1), with
   E_c = s_c(r_t) + s_c(r_t+1) + lambda * IoU(r_t, r_t+1);
   members are removed and the search repeats for the next path;
2. a second dynamic program labels every frame of a path, trading per-frame
   class scores against a constant cost alpha per label change;
3. maximal runs labelled with the path's class become tubes, scored by the
   mean of their top-k member scores and filtered by score, length and area.

The path objective is kept exactly as written: interior unary scores are
counted twice (each region sits in two pairs).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Set, Union

import numpy as np

from .config_manager import LinkerConfig
from .core_model import (
    ActionPath,
    ActionTube,
    InvariantError,
    LabelSequence,
    RegionProposal,
    ValidationError,
    VideoProposals,
    overlap_matrix,
    region_overlap,
)
from .proposal_ingest import nms_indices

logger = logging.getLogger(__name__)


# =============================================================================
# Link Graph
# =============================================================================

class LinkGraph:
    """
    Per-video tables shared by every class and every path search.

    Frame t (1-based) has `nodes(t)` nodes: its proposals, or a single
    placeholder when it has none. Placeholders score `placeholder_score`
    for every class and overlap nothing.
    """

    def __init__(self, video: VideoProposals, placeholder_score: float = 0.0):
        if video.frame_count == 0:
            raise ValidationError("video has no frames", record_id=video.video_id)

        self.video = video
        self.placeholder_score = float(placeholder_score)
        self.empty = [len(f) == 0 for f in video.frames]

        self.scores: List[np.ndarray] = []
        for proposals in video.frames:
            if proposals:
                self.scores.append(np.array([p.scores for p in proposals], dtype=float))
            else:
                self.scores.append(np.full((1, video.class_count), self.placeholder_score))

        self.transitions: List[np.ndarray] = []
        for a, b, empty_a, empty_b in zip(video.frames, video.frames[1:], self.empty, self.empty[1:]):
            if empty_a or empty_b:
                self.transitions.append(np.zeros((max(len(a), 1), max(len(b), 1))))
            else:
                self.transitions.append(overlap_matrix(a, b))

        self._same_frame: Dict[int, np.ndarray] = {}

    @property
    def frame_count(self) -> int:
        return self.video.frame_count

    @property
    def has_proposals(self) -> bool:
        return not all(self.empty)

    def nodes(self, t: int) -> int:
        return self.scores[t - 1].shape[0]

    def member(self, t: int, index: int) -> Optional[RegionProposal]:
        if self.empty[t - 1]:
            return None
        return self.video.frames[t - 1][index]

    def same_frame_overlaps(self, t: int) -> np.ndarray:
        if t not in self._same_frame:
            proposals = self.video.frames[t - 1]
            self._same_frame[t] = overlap_matrix(proposals, proposals)
        return self._same_frame[t]

    def full_pool(self) -> List[np.ndarray]:
        return [np.ones(self.nodes(t), dtype=bool) for t in range(1, self.frame_count + 1)]

    def nms_pool(self, class_id: int, iou_threshold: float) -> List[np.ndarray]:
        """Availability masks keeping only the per-class NMS survivors of each frame."""
        pool = self.full_pool()
        for t in range(1, self.frame_count + 1):
            if self.empty[t - 1]:
                continue
            scores = self.scores[t - 1][:, class_id]
            keep = nms_indices(list(scores), self.same_frame_overlaps(t), iou_threshold)
            mask = np.zeros(self.nodes(t), dtype=bool)
            mask[keep] = True
            pool[t - 1] = mask
        return pool


def _graph(source: Union[VideoProposals, LinkGraph], placeholder_score: float) -> LinkGraph:
    if isinstance(source, LinkGraph):
        return source
    return LinkGraph(source, placeholder_score)


# =============================================================================
# First Pass: Action Paths
# =============================================================================

def pair_energy(
    r_t: Optional[RegionProposal],
    r_next: Optional[RegionProposal],
    class_id: int,
    lam: float,
    placeholder_score: float = 0.0
) -> float:
    """E_c between consecutive regions; None stands for a placeholder."""
    if r_t is not None and r_next is not None and r_next.frame_index != r_t.frame_index + 1:
        raise ValidationError(
            f"regions of frames {r_t.frame_index} and {r_next.frame_index} are not consecutive", field="frame"
        )
    s_t = r_t.scores[class_id] if r_t is not None else placeholder_score
    s_next = r_next.scores[class_id] if r_next is not None else placeholder_score
    psi = region_overlap(r_t, r_next) if r_t is not None and r_next is not None else 0.0
    return s_t + s_next + lam * psi


def smoothness_potential(c1: int, c2: int, alpha: float) -> float:
    return 0.0 if c1 == c2 else alpha


def _best_path(graph: LinkGraph, class_id: int, lam: float, pool: Sequence[np.ndarray]) -> ActionPath:
    T = graph.frame_count
    scores = [s[:, class_id] for s in graph.scores]

    if T == 1:
        candidates = np.where(pool[0], scores[0], -np.inf)
        k = int(np.argmax(candidates))
        return _make_path(graph, class_id, [k], float(scores[0][k]))

    D = np.where(pool[0], 0.0, -np.inf)
    backpointers = []
    for t in range(T - 1):
        E = scores[t][:, None] + scores[t + 1][None, :] + lam * graph.transitions[t]
        total = D[:, None] + E
        total[:, ~pool[t + 1]] = -np.inf
        bp = np.argmax(total, axis=0)
        D = total[bp, np.arange(total.shape[1])]
        backpointers.append(bp)

    k = int(np.argmax(D))
    best = float(D[k])
    if not np.isfinite(best):
        raise InvariantError(f"no admissible path for class {class_id}")

    indices = [k]
    for bp in reversed(backpointers):
        k = int(bp[k])
        indices.append(k)
    indices.reverse()
    return _make_path(graph, class_id, indices, best / T)


def _make_path(graph: LinkGraph, class_id: int, nodes: Sequence[int], energy: float) -> ActionPath:
    members = tuple(graph.member(t, k) for t, k in enumerate(nodes, 1))
    indices = tuple(-1 if m is None else k for m, k in zip(members, nodes))
    return ActionPath(class_id, members, indices, energy)


def best_path(
    video: Union[VideoProposals, LinkGraph],
    class_id: int,
    lam: float,
    placeholder_score: float = 0.0
) -> ActionPath:
    """
    The highest-energy path of one class over the whole video.

    Ties go to the path whose node indices are smallest when compared from
    the last frame backwards. A single-frame video picks its best-scoring
    proposal, with that score as energy.
    """
    graph = _graph(video, placeholder_score)
    return _best_path(graph, class_id, lam, graph.full_pool())


def path_energy(
    path: ActionPath,
    video: Union[VideoProposals, LinkGraph],
    lam: float,
    placeholder_score: float = 0.0
) -> float:
    """The path objective of any path, accumulated frame by frame."""
    graph = _graph(video, placeholder_score)
    T = graph.frame_count
    if path.length != T:
        raise ValidationError(f"path covers {path.length} frames, video has {T}")

    nodes = [max(i, 0) for i in path.indices]
    c = path.class_id
    if T == 1:
        return float(graph.scores[0][nodes[0], c])

    total = 0.0
    for t in range(T - 1):
        j, k = nodes[t], nodes[t + 1]
        total = total + (graph.scores[t][j, c] + graph.scores[t + 1][k, c] + lam * graph.transitions[t][j, k])
    return float(total) / T


def _path_budget(graph: LinkGraph, pool: Sequence[np.ndarray], max_paths: Optional[int]) -> int:
    if max_paths is not None:
        return max_paths
    counts = [int(mask.sum()) for mask, empty in zip(pool, graph.empty) if not empty]
    return min(counts) if counts else 0


def _extract_paths(
    graph: LinkGraph,
    class_id: int,
    lam: float,
    max_paths: Optional[int],
    pool: List[np.ndarray]
) -> List[ActionPath]:
    if not graph.has_proposals:
        return []

    budget = _path_budget(graph, pool, max_paths)
    pool = [mask.copy() for mask in pool]
    paths: List[ActionPath] = []

    while len(paths) < budget:
        path = _best_path(graph, class_id, lam, pool)
        paths.append(path)
        for t, index in enumerate(path.indices):
            if index >= 0:
                pool[t][index] = False
        if any(not empty and not mask.any() for mask, empty in zip(pool, graph.empty)):
            break
    return paths


def extract_paths(
    video: Union[VideoProposals, LinkGraph],
    class_id: int,
    lam: float,
    max_paths: Optional[int] = 3,
    placeholder_score: float = 0.0
) -> List[ActionPath]:
    """
    Successive member-disjoint best paths of one class.

    Stops after `max_paths` paths, or as soon as a frame that had proposals
    has none left. `max_paths=None` uses the K-connected budget: the
    smallest proposal count over non-empty frames.
    """
    if max_paths is not None and max_paths < 1:
        raise ValidationError(f"max_paths must be >= 1, got {max_paths}", field="max_paths")
    graph = _graph(video, placeholder_score)
    return _extract_paths(graph, class_id, lam, max_paths, graph.full_pool())


# =============================================================================
# Second Pass: Temporal Labelling
# =============================================================================

def _label_scores(
    path: ActionPath,
    class_count: int,
    background_score: Optional[float],
    placeholder_score: float
) -> np.ndarray:
    rows = []
    for member in path.members:
        row = list(member.scores) if member is not None else [placeholder_score] * class_count
        if len(row) != class_count:
            raise ValidationError(f"member has {len(row)} scores, expected {class_count}", field="scores")
        if background_score is not None:
            row.append(background_score)
        rows.append(row)
    return np.array(rows, dtype=float)


def smoothness_matrix(label_count: int, alpha: float) -> np.ndarray:
    """V[c_prev, c_next]: zero on the diagonal, alpha elsewhere."""
    V = np.full((label_count, label_count), float(alpha))
    np.fill_diagonal(V, 0.0)
    return V


def temporal_label(
    path: ActionPath,
    video: VideoProposals,
    alpha: float,
    background_score: Optional[float] = None,
    placeholder_score: float = 0.0
) -> LabelSequence:
    """
    Piecewise-constant labelling of a path maximising sum of member scores
    minus alpha per label change.

    M_0 = 0 and M_t(c) = s_c(r_t) + max_c' (M_t-1(c') - V(c', c)); the
    labels are read back from the best entry of the last column (smallest
    class on ties), keeping the current label while backtracking whenever
    that is also optimal, otherwise taking the smallest optimal class.

    With `background_score` set, label index C means "no action" and scores
    that constant on every frame. link_video passes
    LinkerConfig.background_score, 0.0 unless configured to null, so the
    no-action label is on by default there.
    """
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}", field="alpha")
    S = _label_scores(path, video.class_count, background_score, placeholder_score)
    T, L = S.shape
    V = smoothness_matrix(L, alpha)
    diagonal = np.arange(L)

    M = np.zeros(L)
    backpointers = []
    for t in range(T):
        candidates = M[:, None] - V
        best = candidates.max(axis=0)
        stay = candidates[diagonal, diagonal] == best
        backpointers.append(np.where(stay, diagonal, np.argmax(candidates, axis=0)))
        M = S[t] + best

    label = int(np.argmax(M))
    objective = float(M[label])
    labels = [label]
    for bp in reversed(backpointers[1:]):
        label = int(bp[label])
        labels.append(label)
    labels.reverse()
    return LabelSequence(tuple(labels), objective)


# =============================================================================
# Tubes
# =============================================================================

def extract_tubes(
    path: ActionPath,
    labels: LabelSequence,
    video_id: str = "",
    class_name: Optional[str] = None
) -> List[ActionTube]:
    """Maximal runs labelled with the path's class, split at placeholder frames."""
    if len(labels) != path.length:
        raise ValidationError(f"{len(labels)} labels for a path of {path.length} frames")

    name = class_name if class_name is not None else str(path.class_id)
    tubes: List[ActionTube] = []
    run: List[RegionProposal] = []
    start = 0

    def close_run():
        if run:
            tubes.append(ActionTube(video_id, path.class_id, name, start, start + len(run) - 1, tuple(run)))

    for t, (member, label) in enumerate(zip(path.members, labels.labels), 1):
        if member is not None and label == path.class_id:
            if not run:
                start = t
            run.append(member)
        else:
            close_run()
            run = []
    close_run()
    return tubes


def tube_score(tube: ActionTube, top_k: int = 10) -> float:
    """Mean of the tube's top-k member scores for its class (all of them if shorter)."""
    if not tube.members:
        raise ValidationError("tube has no members", record_id=tube.video_id)
    values = np.sort(np.array([m.scores[tube.class_id] for m in tube.members]))[::-1]
    return float(np.mean(values[:min(top_k, len(values))]))


def filter_tubes(
    tubes: Sequence[ActionTube],
    config: LinkerConfig,
    warned: Optional[Set[str]] = None
) -> List[ActionTube]:
    """Keep tubes with score >= 0, at least delta frames and average area >= gamma_c / tau."""
    warned = set() if warned is None else warned
    kept = []
    for tube in tubes:
        if tube.score < 0 or tube.length < config.delta:
            continue
        min_area = config.min_area(tube.class_name)
        if min_area is None:
            if tube.class_name not in warned:
                logger.warning("%s: no average area for class '%s', area filter skipped",
                               tube.video_id or "video", tube.class_name)
                warned.add(tube.class_name)
        elif tube.average_area() < min_area:
            continue
        kept.append(tube)
    return kept


def link_class(graph: LinkGraph, class_id: int, config: LinkerConfig) -> List[ActionTube]:
    """Paths, labels and scored (unfiltered) tubes of one class."""
    video = graph.video
    pool = graph.nms_pool(class_id, config.nms_iou) if config.apply_nms else graph.full_pool()
    paths = _extract_paths(graph, class_id, config.lam, config.max_paths, pool)

    tubes = []
    for path in paths:
        labels = temporal_label(path, video, config.alpha, config.background_score, config.placeholder_score)
        for tube in extract_tubes(path, labels, video.video_id, video.class_names[class_id]):
            tubes.append(replace(tube, score=tube_score(tube, config.top_k_score)))
    return tubes


def link_video(video: VideoProposals, config: LinkerConfig) -> List[ActionTube]:
    """The whole linking pipeline for one video, best tubes first."""
    if video.frame_count == 0 or video.proposal_count == 0:
        return []

    graph = LinkGraph(video, config.placeholder_score)
    candidates: List[ActionTube] = []
    for class_id in range(video.class_count):
        candidates.extend(link_class(graph, class_id, config))

    kept = filter_tubes(candidates, config)
    logger.debug("%s: %d candidate tubes, %d kept", video.video_id, len(candidates), len(kept))
    return sorted(kept, key=lambda tube: -tube.score)


class TubeLinker:
    """Runs link_video over many videos, optionally on a thread pool."""

    def __init__(self, config: Optional[LinkerConfig] = None):
        self.config = config or LinkerConfig()

    def link_video(self, video: VideoProposals) -> List[ActionTube]:
        return link_video(video, self.config)

    def link_videos(self, videos: Sequence[VideoProposals], threads: int = 1) -> List[List[ActionTube]]:
        """Tubes per video, in input order."""
        if threads <= 1 or len(videos) <= 1:
            return [self.link_video(v) for v in videos]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(self.link_video, videos))
