"""Command-line surface: CSV emitters for anchors, matching stats, assignments,
simulation runs, and the gradient self-check.

Exit codes: 0 success, 1 analysis failure, 2 usage/IO/config error. Every
command writes a ``manifest.json`` recording the config snapshot, seed, tool
version, and a sha256 per output file; reruns with identical inputs produce
byte-identical outputs regardless of ``--threads``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .anchors import cover_image_size, generate_anchors
from .assignment import (
    SOURCE_NAMES,
    SOURCE_STEP1,
    Assignment,
    match_first_step,
    match_nams,
    match_two_step,
)
from .geometry import elementwise_iou
from .ingest import (
    ConfigError,
    ImageRecord,
    ToolConfig,
    config_as_dict,
    filter_valid,
    load_config,
    load_wider_annotations,
)
from .losses import LossParams, cls_loss_grad, sigmoid
from .mining import compensate, compute_quality, ignore_mask
from .simulator import (
    RegressorModel,
    linear_ramp,
    run_simulation,
    simulate_regression,
    synthetic_dataset,
)
from .stats import EmptyDatasetError, scale_ratio_sweep

EXIT_OK = 0
EXIT_ANALYSIS = 1
EXIT_USAGE = 2


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _write_output(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _write_manifest(out_dir: Path, cfg: ToolConfig, seed: int, outputs: Sequence[Path]) -> None:
    checksums = {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in outputs
    }
    manifest = {
        "tool_version": __version__,
        "seed": seed,
        "config": config_as_dict(cfg),
        "outputs": checksums,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_dataset(annotations: str, min_side: float) -> list[ImageRecord]:
    records = load_wider_annotations(annotations)
    if min_side > 0:
        records = filter_valid(records, min_side)
    return records


def _parse_ratio_spec(spec: str) -> list[float]:
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"ratio spec must be start:stop:step, got {spec!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0:
        raise ValueError(f"ratio step must be > 0, got {step}")
    ratios = []
    r = start
    while r <= stop + 1e-9:
        ratios.append(round(r, 12))
        r += step
    if not ratios:
        raise ValueError(f"ratio spec {spec!r} yields no ratios")
    return ratios


def cmd_anchors(args: argparse.Namespace, cfg: ToolConfig) -> int:
    grid = generate_anchors(cfg.anchors, args.width, args.height)
    lines = ["level,row,col,x0,y0,x1,y1"]
    for i in range(len(grid)):
        r, c = grid.cell_of[i]
        b = grid.boxes[i]
        lines.append(
            f"{grid.level_of[i]},{r},{c},{_fmt(b[0])},{_fmt(b[1])},{_fmt(b[2])},{_fmt(b[3])}"
        )
    out = Path(args.out) / "anchors.csv"
    _write_output(out, "\n".join(lines) + "\n")
    _write_manifest(Path(args.out), cfg, args.seed, [out])
    return EXIT_OK


def cmd_match_stats(args: argparse.Namespace, cfg: ToolConfig) -> int:
    ratios = _parse_ratio_spec(args.ratios)
    records = _load_dataset(args.annotations, cfg.data.min_side)
    points = scale_ratio_sweep(
        records, cfg.anchors, ratios, cfg.match.iou_threshold, threads=args.threads
    )
    lines = ["ratio,mean_anchors_per_face,fraction_faces_matched"]
    for p in points:
        lines.append(
            f"{_fmt(p.scale_ratio)},{_fmt(p.mean_anchors_per_face)},{_fmt(p.fraction_faces_matched)}"
        )
    out = Path(args.out) / "scale_curve.csv"
    _write_output(out, "\n".join(lines) + "\n")
    _write_manifest(Path(args.out), cfg, args.seed, [out])
    return EXIT_OK


def _assign_image(
    record: ImageRecord,
    cfg: ToolConfig,
    strategy: str,
    seed: int,
    sim_quality: float,
    stream: int,
) -> list[str]:
    from .stats import valid_face_boxes

    faces = valid_face_boxes(record)
    w, h = cover_image_size(faces, cfg.anchors)
    grid = generate_anchors(cfg.anchors, w, h)
    ignore = None
    claim_iou = None
    if strategy == "sms":
        assignment = match_first_step(grid, faces, cfg.match)
    elif strategy == "dms":
        assignment = match_two_step(grid, faces, cfg.match)
    elif strategy == "nams":
        assignment = match_nams(grid, faces, cfg.match)
    else:  # hambox: compensation against simulated predictions
        model = RegressorModel(q=sim_quality, noise_sigma=0.0, seed=seed)
        regressed = simulate_regression(grid, faces, model, iteration=0, stream=stream)
        first = match_first_step(grid, faces, cfg.match)
        assignment = compensate(first, grid, faces, regressed, cfg.compensation)
        quality = compute_quality(regressed, faces)
        ignore = ignore_mask(assignment, quality)
        comp = assignment.source > SOURCE_STEP1
        claim_iou = np.zeros(len(grid))
        if np.any(comp):
            claim_iou[comp] = elementwise_iou(
                regressed[comp], faces[assignment.face_of[comp]]
            )
        claim_iou[ignore] = quality.F[ignore]

    lines = []
    pos = np.flatnonzero(assignment.face_of >= 0)
    step1_iou = np.zeros(len(grid))
    if pos.size:
        step1_iou[pos] = elementwise_iou(grid.boxes[pos], faces[assignment.face_of[pos]])
    for a in pos:
        src = SOURCE_NAMES[int(assignment.source[a])]
        iou_val = step1_iou[a]
        if claim_iou is not None and assignment.source[a] > SOURCE_STEP1:
            iou_val = claim_iou[a]
        lines.append(
            f"{record.path},{a},{grid.level_of[a]},positive,{assignment.face_of[a]},{src},{_fmt(iou_val)}"
        )
    if ignore is not None:
        for a in np.flatnonzero(ignore):
            lines.append(
                f"{record.path},{a},{grid.level_of[a]},ignore,,none,{_fmt(claim_iou[a])}"
            )
    return lines


def cmd_assign(args: argparse.Namespace, cfg: ToolConfig) -> int:
    strategy = args.strategy or cfg.strategy
    records = _load_dataset(args.annotations, cfg.data.min_side)

    def work(i: int) -> list[str]:
        return _assign_image(records[i], cfg, strategy, args.seed, args.sim_quality, i)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            blocks = list(pool.map(work, range(len(records))))
    else:
        blocks = [work(i) for i in range(len(records))]
    lines = ["image,anchor,level,label,face,source,iou"]
    for block in blocks:
        lines.extend(block)
    out = Path(args.out) / "assign.csv"
    _write_output(out, "\n".join(lines) + "\n")
    _write_manifest(Path(args.out), cfg, args.seed, [out])
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, cfg: ToolConfig) -> int:
    sim = cfg.simulator
    seed = args.seed if args.seed is not None else sim.seed
    if args.annotations:
        dataset = _load_dataset(args.annotations, cfg.data.min_side)
        image_size = None
    else:
        dataset = synthetic_dataset(args.synthetic_images, seed=seed)
        image_size = (640, 640)
    ramp = None
    if sim.quality_ramp is not None:
        ramp = linear_ramp(sim.quality_ramp[0], sim.quality_ramp[1], args.iters)
    model = RegressorModel(q=sim.q, noise_sigma=sim.noise_sigma, seed=seed, quality_ramp=ramp)
    records = run_simulation(
        dataset,
        cfg.anchors,
        cfg.compensation,
        cfg.loss,
        model,
        args.iters,
        match_params=cfg.match,
        image_size=image_size,
        scorer_scale=sim.score_scale,
        scorer_bias=sim.score_bias,
        threads=args.threads,
    )
    lines = ["iter,cls_com,cls_norm,loc_com,loc_norm,n_com,mean_com_iou,n_ignored"]
    for r in records:
        mean = "" if r.mean_compensated_iou is None else _fmt(r.mean_compensated_iou)
        lines.append(
            f"{r.iteration},{_fmt(r.cls_compensated)},{_fmt(r.cls_normal)},"
            f"{_fmt(r.loc_compensated)},{_fmt(r.loc_normal)},{r.n_compensated},{mean},{r.n_ignored}"
        )
    out = Path(args.out) / "simulation.csv"
    _write_output(out, "\n".join(lines) + "\n")
    outputs = [out]
    if args.provenance:
        prov = Path(args.out) / "provenance.csv"
        _write_output(
            prov, _final_iteration_provenance(dataset, cfg, model, args.iters, image_size)
        )
        outputs.append(prov)
    _write_manifest(Path(args.out), cfg, seed, outputs)
    return EXIT_OK


def _final_iteration_provenance(dataset, cfg: ToolConfig, model, n_iters: int, image_size) -> str:
    """Pooled first-step provenance of the run's last iteration."""
    from .stats import combine_reports, provenance_csv, provenance_report, valid_face_boxes

    reports = []
    for stream, rec in enumerate(dataset):
        faces = valid_face_boxes(rec)
        w, h = image_size if image_size is not None else cover_image_size(faces, cfg.anchors)
        grid = generate_anchors(cfg.anchors, w, h)
        regressed = simulate_regression(grid, faces, model, n_iters - 1, stream=stream)
        assignment = match_first_step(grid, faces, cfg.match)
        quality = compute_quality(regressed, faces)
        scores = np.asarray(
            sigmoid(cfg.simulator.score_scale * quality.F + cfg.simulator.score_bias)
        )
        reports.append(provenance_report(assignment, grid, quality, regressed, scores, faces, 0.5))
    return provenance_csv(combine_reports(reports))


def gradient_check(seed: int, trials: int, corrupt: bool = False) -> tuple[float, dict]:
    """Max relative error between analytic and central-difference gradients.

    Random instances include compensated anchors and nonempty ignore masks.
    `corrupt` perturbs the analytic gradient, for validating that the check
    can fail.
    """
    from .assignment import BACKGROUND, SOURCE_HAMBOX, SOURCE_STEP1, SOURCE_NONE
    from .mining import AnchorQuality
    from .losses import regression_aware_cls_loss

    rng = np.random.default_rng(seed)
    h = 1e-4
    worst = 0.0
    worst_case: dict = {}
    for trial in range(trials):
        n = int(rng.integers(8, 40))
        source = rng.choice(
            [SOURCE_NONE, SOURCE_STEP1, SOURCE_HAMBOX], size=n, p=[0.6, 0.25, 0.15]
        ).astype(np.uint8)
        face_of = np.where(source == SOURCE_NONE, BACKGROUND, rng.integers(0, 3, size=n))
        assignment = Assignment(
            face_of=face_of.astype(np.int64),
            targets=np.zeros((n, 4)),
            source=source,
            matched_count=np.bincount(face_of[face_of >= 0], minlength=3).astype(np.int64),
        )
        f_vals = rng.uniform(0.0, 1.0, size=n)
        quality = AnchorQuality(
            F=f_vals, high_quality=f_vals >= 0.5, best_face=np.zeros(n, dtype=np.int64)
        )
        ignore = (source == SOURCE_NONE) & quality.high_quality
        params = LossParams(
            alpha=float(rng.uniform(0.1, 0.9)),
            gamma=float(rng.choice([0.0, 1.0, 2.0, 3.0])),
        )
        logits = rng.uniform(-3.0, 3.0, size=n)
        grad = cls_loss_grad(logits, assignment, quality, ignore, params)
        if corrupt:
            grad = grad + 1e-3

        def loss_at(z: np.ndarray) -> float:
            return regression_aware_cls_loss(
                np.asarray(sigmoid(z)), assignment, quality, ignore, params
            ).cls_total

        fd = np.zeros(n)
        for j in range(n):
            zp = logits.copy()
            zm = logits.copy()
            zp[j] += h
            zm[j] -= h
            fd[j] = (loss_at(zp) - loss_at(zm)) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
        idx = int(np.argmax(rel))
        if rel[idx] > worst:
            worst = float(rel[idx])
            worst_case = {
                "trial": trial,
                "anchor": idx,
                "analytic": float(grad[idx]),
                "finite_difference": float(fd[idx]),
            }
    return worst, worst_case


def cmd_loss_check(args: argparse.Namespace, cfg: ToolConfig) -> int:
    if args.trials < 1:
        print(f"error: --trials must be >= 1, got {args.trials}", file=sys.stderr)
        return EXIT_USAGE
    worst, worst_case = gradient_check(args.seed, args.trials, corrupt=args.corrupt_gradient)
    print(f"max relative gradient error over {args.trials} trials: {worst:.3e}")
    if worst >= 1e-4:
        print(f"worst case: {worst_case}", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hambox",
        description="Anchor mining pipeline: grids, matching strategies, losses, statistics.",
    )
    parser.add_argument("--config", help="path to INI config file")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-image work")
    parser.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("anchors", help="dump the anchor grid as CSV")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=640)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("match-stats", help="scale-ratio matching sweep")
    p.add_argument("--annotations", required=True)
    p.add_argument("--ratios", default="0.68:0.68:1", help="start:stop:step")
    p.set_defaults(func=cmd_match_stats)

    p = sub.add_parser("assign", help="dump per-image assignments")
    p.add_argument("--annotations", required=True)
    p.add_argument("--strategy", choices=("sms", "dms", "nams", "hambox"), default=None)
    p.add_argument("--sim-quality", type=float, default=0.9, help="regressor quality for hambox")
    p.add_argument("--T", type=float, default=None, help="online admission threshold override")
    p.add_argument("--K", type=int, default=None, help="per-face positive budget override")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("simulate", help="run the simulated training loop")
    p.add_argument("--annotations", default=None)
    p.add_argument("--synthetic-images", type=int, default=20)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--T", type=float, default=None, help="online admission threshold override")
    p.add_argument("--K", type=int, default=None, help="per-face positive budget override")
    p.add_argument(
        "--provenance",
        action="store_true",
        help="also write provenance.csv for the final iteration",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("loss-check", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_loss_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        cfg = load_config(args.config) if args.config else ToolConfig()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is None and args.command != "simulate":
        args.seed = cfg.simulator.seed
    if getattr(args, "T", None) is not None or getattr(args, "K", None) is not None:
        from dataclasses import replace

        from .mining import CompensationParams

        try:
            comp = CompensationParams(
                T=args.T if args.T is not None else cfg.compensation.T,
                K=args.K if args.K is not None else cfg.compensation.K,
            )
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        cfg = replace(cfg, compensation=comp)
    try:
        return args.func(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EmptyDatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
