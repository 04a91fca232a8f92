"""Box algebra: IoU, anchor/target delta coding, and greedy NMS.

Boxes live in continuous pixel coordinates with width = x1 - x0 (no +1
convention). Deltas use the center-offset / log-size parameterization with
identity variances.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class Box(NamedTuple):
    """Axis-aligned rectangle (x0, y0, x1, y1) with x1 >= x0 and y1 >= y0."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


class BoxDelta(NamedTuple):
    """Regression offsets: center shifts normalized by anchor size, log scale ratios."""

    tx: float
    ty: float
    tw: float
    th: float


def as_box_array(boxes: Sequence[Box] | np.ndarray) -> np.ndarray:
    """Convert a sequence of boxes (or an (N, 4) array) to a float64 (N, 4) array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def iou(a: Box | Sequence[float], b: Box | Sequence[float]) -> float:
    """Intersection-over-union of two boxes.

    Degenerate (zero-area) boxes yield 0.0, never NaN.
    """
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def pairwise_iou(a: Sequence[Box] | np.ndarray, b: Sequence[Box] | np.ndarray) -> np.ndarray:
    """IoU between every box in `a` and every box in `b`; returns an (N, M) array."""
    a = as_box_array(a)
    b = as_box_array(b)
    area_a = np.maximum(0.0, a[:, 2] - a[:, 0]) * np.maximum(0.0, a[:, 3] - a[:, 1])
    area_b = np.maximum(0.0, b[:, 2] - b[:, 0]) * np.maximum(0.0, b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def elementwise_iou(a: Sequence[Box] | np.ndarray, b: Sequence[Box] | np.ndarray) -> np.ndarray:
    """IoU between corresponding rows of two (N, 4) box arrays."""
    a = as_box_array(a)
    b = as_box_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = np.maximum(0.0, a[:, 2] - a[:, 0]) * np.maximum(0.0, a[:, 3] - a[:, 1])
    area_b = np.maximum(0.0, b[:, 2] - b[:, 0]) * np.maximum(0.0, b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def _require_positive_size(box: Sequence[float], role: str) -> None:
    x0, y0, x1, y1 = box
    if x1 - x0 <= 0.0 or y1 - y0 <= 0.0:
        raise ValueError(f"{role} must have positive width and height: {tuple(box)}")


def encode(anchor: Box | Sequence[float], target: Box | Sequence[float]) -> BoxDelta:
    """Encode `target` relative to `anchor` as (tx, ty, tw, th).

    tx, ty are the center offsets divided by anchor width/height; tw, th are
    natural logs of the size ratios. Both boxes must have positive size.
    """
    _require_positive_size(anchor, "anchor")
    _require_positive_size(target, "target")
    ax0, ay0, ax1, ay1 = anchor
    tx0, ty0, tx1, ty1 = target
    aw = ax1 - ax0
    ah = ay1 - ay0
    tw = tx1 - tx0
    th = ty1 - ty0
    dx = ((tx0 + tx1) - (ax0 + ax1)) / (2.0 * aw)
    dy = ((ty0 + ty1) - (ay0 + ay1)) / (2.0 * ah)
    return BoxDelta(dx, dy, float(np.log(tw / aw)), float(np.log(th / ah)))


def decode(anchor: Box | Sequence[float], delta: BoxDelta | Sequence[float]) -> Box:
    """Invert :func:`encode`: apply `delta` to `anchor` and return the resulting box."""
    _require_positive_size(anchor, "anchor")
    ax0, ay0, ax1, ay1 = anchor
    dx, dy, dw, dh = delta
    aw = ax1 - ax0
    ah = ay1 - ay0
    cx = (ax0 + ax1) / 2.0 + dx * aw
    cy = (ay0 + ay1) / 2.0 + dy * ah
    w = float(np.exp(dw)) * aw
    h = float(np.exp(dh)) * ah
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode` over matched (N, 4) anchor/target arrays."""
    anchors = as_box_array(anchors)
    targets = as_box_array(targets)
    if anchors.shape != targets.shape:
        raise ValueError(f"shape mismatch: anchors {anchors.shape} vs targets {targets.shape}")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        bad = int(np.argmax((aw <= 0.0) | (ah <= 0.0)))
        raise ValueError(f"anchor {bad} must have positive width and height: {tuple(anchors[bad])}")
    if np.any(tw <= 0.0) or np.any(th <= 0.0):
        bad = int(np.argmax((tw <= 0.0) | (th <= 0.0)))
        raise ValueError(f"target {bad} must have positive width and height: {tuple(targets[bad])}")
    dx = ((targets[:, 0] + targets[:, 2]) - (anchors[:, 0] + anchors[:, 2])) / (2.0 * aw)
    dy = ((targets[:, 1] + targets[:, 3]) - (anchors[:, 1] + anchors[:, 3])) / (2.0 * ah)
    return np.stack([dx, dy, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized :func:`decode` over matched (N, 4) anchor/delta arrays."""
    anchors = as_box_array(anchors)
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim == 1 and deltas.size == 0:
        deltas = deltas.reshape(0, 4)
    if anchors.shape != deltas.shape:
        raise ValueError(f"shape mismatch: anchors {anchors.shape} vs deltas {deltas.shape}")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        bad = int(np.argmax((aw <= 0.0) | (ah <= 0.0)))
        raise ValueError(f"anchor {bad} must have positive width and height: {tuple(anchors[bad])}")
    cx = (anchors[:, 0] + anchors[:, 2]) / 2.0 + deltas[:, 0] * aw
    cy = (anchors[:, 1] + anchors[:, 3]) / 2.0 + deltas[:, 1] * ah
    w = np.exp(deltas[:, 2]) * aw
    h = np.exp(deltas[:, 3]) * ah
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def nms(
    boxes: Sequence[Box] | np.ndarray,
    scores: Sequence[float] | np.ndarray,
    iou_threshold: float,
) -> list[int]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-score remaining box and suppresses remaining
    boxes whose IoU with it exceeds `iou_threshold`. Score ties break toward
    the lower index. Returns kept indices in suppression order.
    """
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] != boxes.shape[0]:
        raise ValueError(f"boxes/scores length mismatch: {boxes.shape[0]} vs {scores.shape}")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    n = boxes.shape[0]
    # Primary key: score descending; secondary: index ascending.
    order = np.lexsort((np.arange(n), -scores))
    kept: list[int] = []
    alive = np.ones(n, dtype=bool)
    for pos, idx in enumerate(order):
        if not alive[pos]:
            continue
        kept.append(int(idx))
        rest = order[pos + 1 :]
        if rest.size == 0:
            break
        overlaps = pairwise_iou(boxes[idx : idx + 1], boxes[rest])[0]
        alive[pos + 1 :] &= ~(overlaps > iou_threshold)
    return kept
