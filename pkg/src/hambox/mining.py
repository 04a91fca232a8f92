"""Online high-quality anchor compensation and the supporting quality signals.

After the first matching step, each face that holds fewer than K positive
anchors may be compensated with extra anchors whose *regressed* boxes overlap
it well: candidates are ranked by the IoU between the face and each anchor's
regression output, and accepted while that IoU is strictly above the online
threshold T, up to the per-face budget of K total positives. Anchors already
positive (to any face, including compensations granted earlier in the same
pass) are skipped, so faces are processed in annotation order and the result
is order-dependent by construction.

The same regression outputs define a per-anchor quality score F (best IoU
against any face) used both for the ignore mask and for loss weighting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .anchors import AnchorGrid
from .assignment import BACKGROUND, SOURCE_HAMBOX, SOURCE_NONE, SOURCE_STEP1, Assignment
from .geometry import Box, as_box_array, decode_boxes, encode_boxes, pairwise_iou

HIGH_QUALITY_IOU = 0.5


@dataclass(frozen=True)
class CompensationParams:
    """Online mining hyperparameters: admission threshold T and per-face budget K."""

    T: float = 0.8
    K: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.T <= 1.0:
            raise ValueError(f"T must be in [0, 1], got {self.T}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")


@dataclass
class AnchorQuality:
    """Per-anchor regression quality.

    `F[i]` is the best IoU between anchor i's regressed box and any face
    (0 with no faces); `high_quality` flags F >= 0.5; `best_face` is the
    argmax face index, or -1 when there are no faces.
    """

    F: np.ndarray = field(repr=False)  # (N,) float64
    high_quality: np.ndarray = field(repr=False)  # (N,) bool
    best_face: np.ndarray = field(repr=False)  # (N,) int64


def regress_all(grid: AnchorGrid, deltas: Sequence | np.ndarray) -> np.ndarray:
    """Decode every anchor's predicted delta into an absolute box (N, 4)."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim == 1 and deltas.size == 0:
        deltas = deltas.reshape(0, 4)
    if deltas.shape != (len(grid), 4):
        raise ValueError(f"expected ({len(grid)}, 4) deltas, got shape {deltas.shape}")
    return decode_boxes(grid.boxes, deltas)


def compute_quality(
    regressed: Sequence[Box] | np.ndarray, faces: Sequence[Box] | np.ndarray
) -> AnchorQuality:
    """Score every regressed box by its best IoU against the faces."""
    regressed = as_box_array(regressed)
    faces = as_box_array(faces)
    n = regressed.shape[0]
    if faces.shape[0] == 0:
        return AnchorQuality(
            F=np.zeros(n),
            high_quality=np.zeros(n, dtype=bool),
            best_face=np.full(n, -1, dtype=np.int64),
        )
    ious = pairwise_iou(regressed, faces)
    best_face = np.argmax(ious, axis=1).astype(np.int64)
    f = ious[np.arange(n), best_face]
    return AnchorQuality(F=f, high_quality=f >= HIGH_QUALITY_IOU, best_face=best_face)


def compensate(
    assignment: Assignment,
    grid: AnchorGrid,
    faces: Sequence[Box] | np.ndarray,
    regressed: Sequence[Box] | np.ndarray,
    params: CompensationParams,
) -> Assignment:
    """Grant under-matched faces extra positives mined from the regression output.

    `assignment` must come straight from the first matching step. For each
    face (annotation order) holding fewer than K positives, anchors are
    scanned by descending IoU(face, regressed box) and claimed while that IoU
    is strictly greater than T, skipping anchors that are already positive,
    until the face holds K positives. Claimed anchors get label positive,
    source ``hambox_compensated``, and a target re-encoded against the face.

    Returns a new assignment; the input is not modified.
    """
    faces = as_box_array(faces)
    regressed = as_box_array(regressed)
    if regressed.shape[0] != len(grid):
        raise ValueError(f"expected {len(grid)} regressed boxes, got {regressed.shape[0]}")
    if assignment.n_anchors != len(grid):
        raise ValueError(f"assignment covers {assignment.n_anchors} anchors, grid has {len(grid)}")
    if assignment.n_faces != faces.shape[0]:
        raise ValueError(f"assignment covers {assignment.n_faces} faces, got {faces.shape[0]}")
    if not np.all(np.isin(assignment.source, (SOURCE_NONE, SOURCE_STEP1))):
        raise ValueError("compensate requires a first-step-only assignment")

    out = assignment.copy()
    if faces.shape[0] == 0:
        return out
    step1_count = assignment.matched_count  # budgets use first-step counts only
    ious = pairwise_iou(faces, regressed)  # (F, N)
    for fi in range(faces.shape[0]):
        if step1_count[fi] >= params.K:
            continue
        budget = params.K - int(step1_count[fi])
        # Strictly-above-T admission lets the descending scan stop at T, so
        # only candidates above T need sorting at all.
        candidates = np.flatnonzero(ious[fi] > params.T)
        order = candidates[np.lexsort((candidates, -ious[fi, candidates]))]
        for anchor in order:
            if out.face_of[anchor] != BACKGROUND:
                continue
            out.face_of[anchor] = fi
            out.source[anchor] = SOURCE_HAMBOX
            out.targets[anchor] = encode_boxes(
                grid.boxes[anchor : anchor + 1], faces[fi : fi + 1]
            )[0]
            out.matched_count[fi] += 1
            budget -= 1
            if budget == 0:
                break
    return out


def ignore_mask(assignment: Assignment, quality: AnchorQuality) -> np.ndarray:
    """Anchors excluded from both loss terms.

    True exactly for anchors that regress well (high quality) yet stayed
    background: first-step positives and compensated anchors are never
    ignored.
    """
    if quality.F.shape[0] != assignment.n_anchors:
        raise ValueError(
            f"quality covers {quality.F.shape[0]} anchors, assignment has {assignment.n_anchors}"
        )
    return quality.high_quality & (assignment.face_of == BACKGROUND)
