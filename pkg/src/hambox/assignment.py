"""Baseline anchor-to-face matching strategies.

Three strategies are provided:

* first-step only: each anchor goes to its best-IoU face when that IoU
  clears the threshold (``sms`` in the CLI);
* two-step: the first step, then every unmatched face claims its single
  best background anchor (``dms``);
* top-N compensation: the first step, then every unmatched face claims the
  top-N background anchors above a small IoU floor (``nams``).

All tie-breaks are by ascending index so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .anchors import AnchorGrid
from .geometry import Box, as_box_array, encode_boxes, pairwise_iou

# Per-anchor provenance codes.
SOURCE_NONE = 0
SOURCE_STEP1 = 1
SOURCE_STEP2 = 2
SOURCE_HAMBOX = 3

SOURCE_NAMES = {
    SOURCE_NONE: "none",
    SOURCE_STEP1: "step1",
    SOURCE_STEP2: "step2_compensated",
    SOURCE_HAMBOX: "hambox_compensated",
}

BACKGROUND = -1


@dataclass(frozen=True)
class MatchParams:
    """Thresholds for the baseline matching strategies.

    `nams_top_n_mode` is either the string ``"mean_matched"`` (N = floored
    mean of per-face matched counts, at least 1) or a fixed positive integer.
    """

    iou_threshold: float = 0.35
    nams_stage2_floor: float = 0.1
    nams_top_n_mode: str | int = "mean_matched"

    def __post_init__(self) -> None:
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in [0, 1], got {self.iou_threshold}")
        if not 0.0 <= self.nams_stage2_floor <= 1.0:
            raise ValueError(f"nams_stage2_floor must be in [0, 1], got {self.nams_stage2_floor}")
        if isinstance(self.nams_top_n_mode, str):
            if self.nams_top_n_mode != "mean_matched":
                raise ValueError(f"unknown nams_top_n_mode {self.nams_top_n_mode!r}")
        elif int(self.nams_top_n_mode) < 1:
            raise ValueError(f"fixed nams_top_n_mode must be >= 1, got {self.nams_top_n_mode}")


@dataclass
class Assignment:
    """Per-anchor labels and regression targets for one image.

    `face_of[i]` is the matched face index or -1 for background. `targets`
    rows are encoded deltas for positives and NaN elsewhere. `source` carries
    the SOURCE_* provenance code, and `matched_count[f]` counts positives
    assigned to face f.
    """

    face_of: np.ndarray = field(repr=False)  # (N,) int64
    targets: np.ndarray = field(repr=False)  # (N, 4) float64
    source: np.ndarray = field(repr=False)  # (N,) uint8
    matched_count: np.ndarray = field(repr=False)  # (F,) int64

    @property
    def n_anchors(self) -> int:
        return self.face_of.shape[0]

    @property
    def n_faces(self) -> int:
        return self.matched_count.shape[0]

    @property
    def positive(self) -> np.ndarray:
        return self.face_of >= 0

    def copy(self) -> "Assignment":
        return Assignment(
            face_of=self.face_of.copy(),
            targets=self.targets.copy(),
            source=self.source.copy(),
            matched_count=self.matched_count.copy(),
        )


def _first_step_core(
    grid: AnchorGrid, faces: Sequence[Box] | np.ndarray, params: MatchParams
) -> tuple[Assignment, np.ndarray]:
    """First matching step plus the full anchor-by-face IoU matrix."""
    faces = as_box_array(faces)
    n = len(grid)
    f = faces.shape[0]
    ious = pairwise_iou(grid.boxes, faces)  # (N, F)
    face_of = np.full(n, BACKGROUND, dtype=np.int64)
    targets = np.full((n, 4), np.nan)
    source = np.full(n, SOURCE_NONE, dtype=np.uint8)
    if f > 0:
        best_face = np.argmax(ious, axis=1)  # first max wins: lower face index
        best_iou = ious[np.arange(n), best_face]
        pos = best_iou >= params.iou_threshold
        face_of[pos] = best_face[pos]
        source[pos] = SOURCE_STEP1
        if np.any(pos):
            targets[pos] = encode_boxes(grid.boxes[pos], faces[best_face[pos]])
    matched = np.bincount(face_of[face_of >= 0], minlength=f).astype(np.int64)
    return Assignment(face_of, targets, source, matched), ious


def match_first_step(
    grid: AnchorGrid, faces: Sequence[Box] | np.ndarray, params: MatchParams
) -> Assignment:
    """Assign each anchor to its maximum-IoU face when that IoU >= the threshold."""
    assignment, _ = _first_step_core(grid, faces, params)
    return assignment


def match_two_step(
    grid: AnchorGrid, faces: Sequence[Box] | np.ndarray, params: MatchParams
) -> Assignment:
    """First step, then each unmatched face claims its best background anchor.

    Faces are processed in annotation order; a claim succeeds even below the
    IoU threshold but requires a strictly positive IoU. Claimed anchors are
    unavailable to later faces.
    """
    faces = as_box_array(faces)
    assignment, ious = _first_step_core(grid, faces, params)
    for fi in range(faces.shape[0]):
        if assignment.matched_count[fi] > 0:
            continue
        candidate_iou = np.where(assignment.face_of == BACKGROUND, ious[:, fi], -1.0)
        best = int(np.argmax(candidate_iou))
        if candidate_iou[best] <= 0.0:
            continue
        _claim(assignment, grid, faces, best, fi, SOURCE_STEP2)
    return assignment


def match_nams(
    grid: AnchorGrid, faces: Sequence[Box] | np.ndarray, params: MatchParams
) -> Assignment:
    """First step, then each unmatched face claims top-N background anchors.

    N comes from `params.nams_top_n_mode`; candidates need IoU strictly above
    `params.nams_stage2_floor` and are ranked by IoU descending with
    ascending-index tie-break.
    """
    faces = as_box_array(faces)
    assignment, ious = _first_step_core(grid, faces, params)
    if isinstance(params.nams_top_n_mode, str):
        counts = assignment.matched_count[assignment.matched_count > 0]
        top_n = max(1, int(np.floor(counts.mean()))) if counts.size else 1
    else:
        top_n = int(params.nams_top_n_mode)
    for fi in range(faces.shape[0]):
        if assignment.matched_count[fi] > 0:
            continue
        eligible = (assignment.face_of == BACKGROUND) & (ious[:, fi] > params.nams_stage2_floor)
        idx = np.flatnonzero(eligible)
        if idx.size == 0:
            continue
        ranked = idx[np.lexsort((idx, -ious[idx, fi]))]
        for anchor in ranked[:top_n]:
            _claim(assignment, grid, faces, int(anchor), fi, SOURCE_STEP2)
    return assignment


def _claim(
    assignment: Assignment,
    grid: AnchorGrid,
    faces: np.ndarray,
    anchor: int,
    face: int,
    source: int,
) -> None:
    assignment.face_of[anchor] = face
    assignment.source[anchor] = source
    assignment.targets[anchor] = encode_boxes(grid.boxes[anchor : anchor + 1], faces[face : face + 1])[0]
    assignment.matched_count[face] += 1
