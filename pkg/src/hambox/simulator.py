"""Synthetic regression head for exercising the mining pipeline end to end.

The simulator stands in for a trained network: each anchor's "prediction" is
its own box pulled toward its best-overlapping face by a quality factor q
(optionally scheduled per iteration) plus keyed Gaussian jitter. Running the
full loop (regress, match, compensate, score, loss) over simulated
iterations reproduces the qualitative training dynamics: no compensation
while predictions are poor, then increasingly many high-quality compensated
anchors as q ramps up.

Randomness comes from a counter-based generator keyed by
(seed, iteration, stream), so outputs are bit-identical regardless of
evaluation order or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .anchors import (
    AnchorConfig,
    AnchorGrid,
    cover_image_size,
    default_hambox_config,
    generate_anchors,
)
from .assignment import SOURCE_HAMBOX, Assignment, MatchParams, match_first_step
from .geometry import Box, as_box_array, elementwise_iou, encode_boxes, pairwise_iou
from .ingest import FaceAnnotation, ImageRecord
from .losses import (
    LossParams,
    cls_loss_grad,
    location_loss,
    regression_aware_cls_loss,
    sigmoid,
)
from .mining import (
    AnchorQuality,
    CompensationParams,
    compensate,
    compute_quality,
    ignore_mask,
)

_MIN_BOX_SIDE = 1e-6  # jittered corners may not invert a box


@dataclass(frozen=True)
class RegressorModel:
    """Synthetic regression head.

    `q` interpolates each anchor toward its best face (0 = no movement,
    1 = exact); `quality_ramp`, when set, supplies q per iteration.
    `noise_sigma` scales corner jitter relative to the reference box size.
    """

    q: float = 0.9
    noise_sigma: float = 0.0
    seed: int = 0
    quality_ramp: Callable[[int], float] | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q must be in [0, 1], got {self.q}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def q_at(self, iteration: int) -> float:
        q = self.quality_ramp(iteration) if self.quality_ramp is not None else self.q
        return float(min(1.0, max(0.0, q)))


def linear_ramp(start: float, end: float, n_iters: int) -> Callable[[int], float]:
    """Schedule rising linearly from `start` at iteration 0 to `end` at n_iters - 1."""
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    if n_iters == 1:
        return lambda t: end
    return lambda t: start + (end - start) * min(t, n_iters - 1) / (n_iters - 1)


@dataclass(frozen=True)
class SimulationRecord:
    iteration: int
    cls_compensated: float
    cls_normal: float
    loc_compensated: float
    loc_normal: float
    n_compensated: int
    mean_compensated_iou: float | None
    n_ignored: int


def _keyed_normals(seed: int, iteration: int, stream: int, shape: tuple[int, ...]) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(iteration, stream))
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def simulate_regression(
    grid: AnchorGrid,
    faces: Sequence[Box] | np.ndarray,
    model: RegressorModel,
    iteration: int,
    stream: int = 0,
) -> np.ndarray:
    """Predicted boxes for every anchor at one iteration.

    Each corner moves fraction q of the way toward the anchor's best-IoU
    face; anchors overlapping no face just jitter around themselves. Noise
    std is noise_sigma times the reference box's width (x coordinates) or
    height (y coordinates). `stream` separates images sharing a seed.
    """
    faces = as_box_array(faces)
    q = model.q_at(iteration)
    boxes = grid.boxes
    out = boxes.copy()
    ref = boxes
    if faces.shape[0]:
        ious = pairwise_iou(boxes, faces)
        best = np.argmax(ious, axis=1)
        overlap = ious[np.arange(len(grid)), best] > 0.0
        pulled = faces[best]
        out = np.where(overlap[:, None], boxes + q * (pulled - boxes), boxes)
        ref = np.where(overlap[:, None], pulled, boxes)
    if model.noise_sigma > 0.0:
        noise = _keyed_normals(model.seed, iteration, stream, (len(grid), 4))
        ref_w = ref[:, 2] - ref[:, 0]
        ref_h = ref[:, 3] - ref[:, 1]
        scale = np.stack([ref_w, ref_h, ref_w, ref_h], axis=1) * model.noise_sigma
        out = out + noise * scale
        out[:, 2] = np.maximum(out[:, 2], out[:, 0] + _MIN_BOX_SIDE)
        out[:, 3] = np.maximum(out[:, 3], out[:, 1] + _MIN_BOX_SIDE)
    return out


def synthetic_dataset(
    n_images: int,
    seed: int = 0,
    image_size: int = 640,
    faces_per_image: tuple[int, int] = (2, 4),
    size_band: tuple[float, float] = (0.6, 0.7),
    levels: tuple[int, ...] = (0, 1, 2),
) -> list[ImageRecord]:
    """Deterministic random face layouts that leave room for compensation.

    Face sides are drawn `size_band` times the default anchor side of a
    random pyramid level. The default band undershoots the anchor scale, so
    most faces hold fewer first-step positives than the usual budget K while
    no anchor-to-face IoU comes near the online admission threshold (the
    nested-anchor bound at the band is (0.5/0.6)^2, about 0.69).
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    lo, hi = size_band
    if not 0.0 < lo <= hi:
        raise ValueError(f"size_band must satisfy 0 < lo <= hi, got {size_band}")
    config = default_hambox_config()
    records = []
    for i in range(n_images):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(i,))
        rng = np.random.Generator(np.random.Philox(ss))
        n_faces = int(rng.integers(faces_per_image[0], faces_per_image[1] + 1))
        faces = []
        for _ in range(n_faces):
            level = int(rng.choice(levels))
            side = config.anchor_size(level)[0] * rng.uniform(lo, hi)
            x0 = rng.uniform(0.0, image_size - side)
            y0 = rng.uniform(0.0, image_size - side)
            faces.append(FaceAnnotation(box=Box(x0, y0, x0 + side, y0 + side)))
        records.append(ImageRecord(path=f"synthetic/{i:04d}.jpg", faces=tuple(faces)))
    return records


def _image_iteration(
    grid: AnchorGrid,
    faces: np.ndarray,
    model: RegressorModel,
    iteration: int,
    stream: int,
    match_params: MatchParams,
    comp_params: CompensationParams,
    loss_params: LossParams,
    scorer_scale: float,
    scorer_bias: float,
) -> tuple[float, float, float, float, int, float, int]:
    regressed = simulate_regression(grid, faces, model, iteration, stream=stream)
    first = match_first_step(grid, faces, match_params)
    assigned = compensate(first, grid, faces, regressed, comp_params)
    quality = compute_quality(regressed, faces)
    ignored = ignore_mask(assigned, quality)
    probs = sigmoid(scorer_scale * quality.F + scorer_bias)
    cls = regression_aware_cls_loss(probs, assigned, quality, ignored, loss_params)
    pred_deltas = encode_boxes(grid.boxes, regressed)
    loc = location_loss(pred_deltas, assigned, loss_params)
    comp_mask = assigned.source == SOURCE_HAMBOX
    n_com = int(comp_mask.sum())
    com_iou_sum = 0.0
    if n_com:
        com_iou_sum = float(
            np.sum(elementwise_iou(regressed[comp_mask], faces[assigned.face_of[comp_mask]]))
        )
    return (
        cls.cls_compensated,
        cls.cls_normal,
        loc.loc_compensated,
        loc.loc_normal,
        n_com,
        com_iou_sum,
        int(ignored.sum()),
    )


def run_simulation(
    dataset: Sequence[ImageRecord],
    anchor_config: AnchorConfig,
    comp_params: CompensationParams,
    loss_params: LossParams,
    model: RegressorModel,
    n_iters: int,
    match_params: MatchParams | None = None,
    image_size: tuple[int, int] | None = None,
    scorer_scale: float = 4.0,
    scorer_bias: float = -2.0,
    threads: int = 1,
) -> list[SimulationRecord]:
    """Run the mining pipeline over simulated training iterations.

    Per iteration and image: simulate predictions, match, compensate, build
    the quality/ignore signals, score with probability
    sigmoid(scorer_scale * F + scorer_bias), and evaluate both losses.
    Loss terms and counts are summed over images; the compensated-IoU mean
    pools all compensated anchors of the iteration. With `image_size` unset,
    each image's grid is sized from its own annotations.
    """
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    match_params = match_params or MatchParams()
    grids: list[AnchorGrid] = []
    face_arrays: list[np.ndarray] = []
    for rec in dataset:
        faces = rec.face_boxes()
        w, h = image_size if image_size is not None else cover_image_size(faces, anchor_config)
        grids.append(generate_anchors(anchor_config, w, h))
        face_arrays.append(faces)

    records: list[SimulationRecord] = []
    for t in range(n_iters):
        def work(i: int):
            return _image_iteration(
                grids[i],
                face_arrays[i],
                model,
                t,
                i,
                match_params,
                comp_params,
                loss_params,
                scorer_scale,
                scorer_bias,
            )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, range(len(dataset))))
        else:
            results = [work(i) for i in range(len(dataset))]

        cls_com = sum(r[0] for r in results)
        cls_norm = sum(r[1] for r in results)
        loc_com = sum(r[2] for r in results)
        loc_norm = sum(r[3] for r in results)
        n_com = sum(r[4] for r in results)
        iou_sum = sum(r[5] for r in results)
        n_ign = sum(r[6] for r in results)
        records.append(
            SimulationRecord(
                iteration=t,
                cls_compensated=cls_com,
                cls_normal=cls_norm,
                loc_compensated=loc_com,
                loc_normal=loc_norm,
                n_compensated=n_com,
                mean_compensated_iou=(iou_sum / n_com) if n_com else None,
                n_ignored=n_ign,
            )
        )
    return records


def optimize_logits(
    assignment: Assignment,
    quality: AnchorQuality,
    ignore: np.ndarray,
    loss_params: LossParams,
    steps: int,
    step_size: float,
    logits: np.ndarray | None = None,
) -> np.ndarray:
    """Plain gradient descent on per-anchor logits; returns the loss trajectory.

    Entry k is the total classification loss after k steps (so the array has
    steps + 1 values). Ignored anchors receive zero gradient and never move.
    """
    if step_size <= 0.0:
        raise ValueError(f"step_size must be > 0, got {step_size}")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    z = np.zeros(assignment.n_anchors) if logits is None else np.asarray(logits, dtype=np.float64).copy()

    def loss_at(zv: np.ndarray) -> float:
        return regression_aware_cls_loss(
            np.asarray(sigmoid(zv)), assignment, quality, ignore, loss_params
        ).cls_total

    trajectory = [loss_at(z)]
    for _ in range(steps):
        z -= step_size * cls_loss_grad(z, assignment, quality, ignore, loss_params)
        trajectory.append(loss_at(z))
    return np.asarray(trajectory)
