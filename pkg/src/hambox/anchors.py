"""Pyramid anchor grid generation: one scale and one aspect ratio per level."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_STRIDES = (4, 8, 16, 32, 64, 128)
DEFAULT_BASE_SCALES = (16, 32, 64, 128, 256, 512)
DEFAULT_SCALE_RATIO = 0.68


@dataclass(frozen=True)
class AnchorConfig:
    """Per-level (stride, base_scale) pairs with a global scale multiplier.

    Every base scale is multiplied by `scale_ratio`; anchor height is the
    resulting side times `aspect_ratio` (height/width).
    """

    levels: tuple[tuple[float, float], ...]
    scale_ratio: float = 1.0
    aspect_ratio: float = 1.0

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("levels must be non-empty")
        strides = [s for s, _ in self.levels]
        if any(s <= 0 for s in strides) or any(b <= 0 for _, b in self.levels):
            raise ValueError("strides and base_scales must be positive")
        if any(b >= a for a, b in zip(strides[1:], strides)):
            raise ValueError(f"strides must be strictly increasing, got {strides}")
        if self.scale_ratio <= 0:
            raise ValueError(f"scale_ratio must be > 0, got {self.scale_ratio}")
        if self.aspect_ratio <= 0:
            raise ValueError(f"aspect_ratio must be > 0, got {self.aspect_ratio}")

    def with_scale_ratio(self, ratio: float) -> "AnchorConfig":
        return AnchorConfig(self.levels, scale_ratio=ratio, aspect_ratio=self.aspect_ratio)

    def anchor_size(self, level: int) -> tuple[float, float]:
        """(width, height) of every anchor on `level`."""
        side = self.levels[level][1] * self.scale_ratio
        return side, side * self.aspect_ratio


@dataclass(frozen=True)
class AnchorGrid:
    """All anchors tiled over an image, with per-anchor level and cell provenance."""

    boxes: np.ndarray = field(repr=False)  # (N, 4) float64
    level_of: np.ndarray = field(repr=False)  # (N,) int32
    cell_of: np.ndarray = field(repr=False)  # (N, 2) int32, (row, col)
    config: AnchorConfig
    image_size: tuple[int, int]  # (width, height)

    def __len__(self) -> int:
        return self.boxes.shape[0]


def grid_shape(stride: float, image_w: float, image_h: float) -> tuple[int, int]:
    """(rows, cols) of the anchor lattice for one stride."""
    return math.ceil(image_h / stride), math.ceil(image_w / stride)


def generate_anchors(config: AnchorConfig, image_w: float, image_h: float) -> AnchorGrid:
    """Tile anchors for every level of `config` across an image_w x image_h image.

    Centers sit at (col*stride + stride/2, row*stride + stride/2); boxes are
    center +/- side/2 and are not clipped to the image. Ordering is levels in
    config order, then row-major cells.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image size must be positive, got {image_w}x{image_h}")
    boxes = []
    levels = []
    cells = []
    for li, (stride, _) in enumerate(config.levels):
        rows, cols = grid_shape(stride, image_w, image_h)
        w, h = config.anchor_size(li)
        cy, cx = np.meshgrid(
            np.arange(rows, dtype=np.float64) * stride + stride / 2.0,
            np.arange(cols, dtype=np.float64) * stride + stride / 2.0,
            indexing="ij",
        )
        cx = cx.ravel()
        cy = cy.ravel()
        boxes.append(np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1))
        levels.append(np.full(rows * cols, li, dtype=np.int32))
        rr, cc = np.meshgrid(np.arange(rows, dtype=np.int32), np.arange(cols, dtype=np.int32), indexing="ij")
        cells.append(np.stack([rr.ravel(), cc.ravel()], axis=1))
    return AnchorGrid(
        boxes=np.concatenate(boxes, axis=0),
        level_of=np.concatenate(levels, axis=0),
        cell_of=np.concatenate(cells, axis=0),
        config=config,
        image_size=(image_w, image_h),
    )


def cover_image_size(face_boxes: np.ndarray, config: AnchorConfig) -> tuple[int, int]:
    """Smallest image extent whose grid holds every anchor that can touch a face.

    Annotation files carry no image dimensions; a grid sized this way
    contains every anchor with positive overlap against any listed face, so
    match results equal those on any larger grid.
    """
    face_boxes = np.asarray(face_boxes, dtype=np.float64)
    margin = max(
        stride + config.anchor_size(li)[0] / 2.0 for li, (stride, _) in enumerate(config.levels)
    )
    v_margin = max(
        stride + config.anchor_size(li)[1] / 2.0 for li, (stride, _) in enumerate(config.levels)
    )
    max_stride = max(stride for stride, _ in config.levels)
    if face_boxes.size == 0:
        return math.ceil(max_stride), math.ceil(max_stride)
    w = math.ceil(max(float(face_boxes[:, 2].max()) + margin, max_stride))
    h = math.ceil(max(float(face_boxes[:, 3].max()) + v_margin, max_stride))
    return w, h


def default_hambox_config() -> AnchorConfig:
    """Six stride-doubling levels at scales 16..512, shrunk by the 0.68 ratio."""
    return AnchorConfig(
        levels=tuple(zip(DEFAULT_STRIDES, DEFAULT_BASE_SCALES)),
        scale_ratio=DEFAULT_SCALE_RATIO,
        aspect_ratio=1.0,
    )
