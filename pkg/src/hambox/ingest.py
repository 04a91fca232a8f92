"""Annotation parsing and tool configuration.

Ground-truth input follows the WIDER FACE ``*_bbx_gt.txt`` layout: repeated
blocks of an image path line, a face-count line, and one line of ten
space-separated integers per face (``x y w h blur expression illumination
invalid occlusion pose``). A block declaring zero faces is followed by a
single all-zero placeholder line, which is consumed and discarded.

Configuration is a sectioned key-value (INI) file; every key is optional and
defaults match the tool's standard operating point. Unknown sections or keys
are rejected by name.
"""

from __future__ import annotations

import configparser
import io
import logging
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .anchors import (
    DEFAULT_BASE_SCALES,
    DEFAULT_SCALE_RATIO,
    DEFAULT_STRIDES,
    AnchorConfig,
)
from .assignment import MatchParams
from .geometry import Box
from .losses import LossParams
from .mining import CompensationParams

logger = logging.getLogger(__name__)

STRATEGIES = ("sms", "dms", "nams", "hambox")

# WIDER FACE attribute ranges: (name, max code); all minimums are 0.
_ATTR_RANGES = (("blur", 2), ("expression", 1), ("illumination", 1), ("invalid", 1), ("occlusion", 2), ("pose", 1))


class AnnotationParseError(ValueError):
    """Malformed annotation input (strict mode only)."""


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class FaceAnnotation:
    box: Box
    blur: int = 0
    expression: int = 0
    illumination: int = 0
    invalid: int = 0
    occlusion: int = 0
    pose: int = 0


@dataclass(frozen=True)
class ImageRecord:
    path: str
    faces: tuple[FaceAnnotation, ...]

    def face_boxes(self) -> np.ndarray:
        """(F, 4) array of this image's face boxes."""
        if not self.faces:
            return np.zeros((0, 4))
        return np.array([f.box for f in self.faces], dtype=np.float64)


class _LineReader:
    def __init__(self, lines: Iterator[str]):
        self._lines = lines
        self._consumed = 0
        self.lineno = 0  # line number of the most recently returned line
        self._pushed: tuple[str, int] | None = None

    def next(self) -> str | None:
        if self._pushed is not None:
            line, self.lineno = self._pushed
            self._pushed = None
            return line
        for raw in self._lines:
            self._consumed += 1
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip():
                self.lineno = self._consumed
                return line
        return None

    def push_back(self, line: str) -> None:
        self._pushed = (line, self.lineno)


def _parse_face_fields(parts: Sequence[str]) -> tuple[int, ...]:
    if len(parts) != 10:
        raise ValueError(f"expected 10 fields, got {len(parts)}")
    return tuple(int(p) for p in parts)


def parse_wider_annotations(
    stream: Iterable[str] | io.TextIOBase | str,
    strict: bool = False,
) -> list[ImageRecord]:
    """Parse annotation text into image records.

    `stream` is an open text file, an iterable of lines, or the raw text
    itself. In strict mode any malformed or degenerate entry raises
    :class:`AnnotationParseError` with its line number; in lenient mode bad
    faces are dropped and summarized in a single warning.
    """
    if isinstance(stream, str):
        stream = iter(stream.splitlines(keepends=True))
    reader = _LineReader(iter(stream))
    records: list[ImageRecord] = []
    skipped_malformed = 0
    dropped_degenerate = 0

    while True:
        path = reader.next()
        if path is None:
            break
        count_line = reader.next()
        if count_line is None:
            if strict:
                raise AnnotationParseError(f"line {reader.lineno}: truncated block for {path!r}")
            skipped_malformed += 1
            break
        try:
            count = int(count_line.strip())
            if count < 0:
                raise ValueError("negative count")
        except ValueError:
            if strict:
                raise AnnotationParseError(
                    f"line {reader.lineno}: bad face count {count_line.strip()!r} for {path!r}"
                ) from None
            skipped_malformed += 1
            # Recovery: discard anything that still looks like a face line.
            while (line := reader.next()) is not None:
                try:
                    _parse_face_fields(line.split())
                except ValueError:
                    reader.push_back(line)
                    break
            records.append(ImageRecord(path=path, faces=()))
            continue

        faces: list[FaceAnnotation] = []
        if count == 0:
            # The distributed files pad empty images with one all-zero line.
            placeholder = reader.next()
            if placeholder is not None:
                try:
                    _parse_face_fields(placeholder.split())
                except ValueError:
                    if strict:
                        raise AnnotationParseError(
                            f"line {reader.lineno}: expected placeholder face line after zero count"
                        ) from None
                    reader.push_back(placeholder)
            elif strict:
                raise AnnotationParseError(
                    f"line {reader.lineno}: expected placeholder face line after zero count"
                )
        for _ in range(count):
            line = reader.next()
            if line is None:
                if strict:
                    raise AnnotationParseError(f"line {reader.lineno}: truncated block for {path!r}")
                skipped_malformed += 1
                break
            try:
                x, y, w, h, *attrs = _parse_face_fields(line.split())
            except ValueError as exc:
                if strict:
                    raise AnnotationParseError(f"line {reader.lineno}: {exc}") from None
                skipped_malformed += 1
                continue
            names = [name for name, _ in _ATTR_RANGES]
            attr_map = dict(zip(names, attrs))
            bad_attr = next(
                (name for (name, hi) in _ATTR_RANGES if not 0 <= attr_map[name] <= hi), None
            )
            if bad_attr is not None:
                if strict:
                    raise AnnotationParseError(
                        f"line {reader.lineno}: attribute {bad_attr}={attr_map[bad_attr]} out of range"
                    )
                skipped_malformed += 1
                continue
            if w <= 0 or h <= 0:
                if strict:
                    raise AnnotationParseError(
                        f"line {reader.lineno}: degenerate face {w}x{h} at ({x}, {y})"
                    )
                dropped_degenerate += 1
                continue
            faces.append(FaceAnnotation(box=Box(x, y, x + w, y + h), **attr_map))
        records.append(ImageRecord(path=path, faces=tuple(faces)))

    if skipped_malformed or dropped_degenerate:
        logger.warning(
            "annotation parse: skipped %d malformed entries, dropped %d degenerate faces",
            skipped_malformed,
            dropped_degenerate,
        )
    return records


def load_wider_annotations(path: str | Path, strict: bool = False) -> list[ImageRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_wider_annotations(fh, strict=strict)


def format_wider_annotations(records: Sequence[ImageRecord]) -> str:
    """Serialize records back to the annotation layout (integer coordinates)."""
    out: list[str] = []
    for rec in records:
        out.append(rec.path)
        out.append(str(len(rec.faces)))
        if not rec.faces:
            out.append("0 0 0 0 0 0 0 0 0 0")
            continue
        for f in rec.faces:
            x0, y0, x1, y1 = f.box
            out.append(
                f"{int(x0)} {int(y0)} {int(x1 - x0)} {int(y1 - y0)} "
                f"{f.blur} {f.expression} {f.illumination} {f.invalid} {f.occlusion} {f.pose}"
            )
    return "\n".join(out) + "\n"


def filter_valid(records: Sequence[ImageRecord], min_side: float = 0.0) -> list[ImageRecord]:
    """Drop faces flagged invalid or smaller than `min_side`; keep every image."""
    if min_side < 0:
        raise ValueError(f"min_side must be >= 0, got {min_side}")
    out = []
    for rec in records:
        kept = tuple(
            f
            for f in rec.faces
            if f.invalid != 1 and min(f.box.width, f.box.height) >= min_side
        )
        out.append(ImageRecord(path=rec.path, faces=kept))
    return out


# ---------------------------------------------------------------------------
# Tool configuration


@dataclass(frozen=True)
class SimulatorSettings:
    """Declarative form of the synthetic regression head used by the CLI."""

    q: float = 0.9
    noise_sigma: float = 0.0
    seed: int = 0
    quality_ramp: tuple[float, float] | None = None  # (start, end) over a run
    score_scale: float = 4.0
    score_bias: float = -2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q must be in [0, 1], got {self.q}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.quality_ramp is not None:
            for value in self.quality_ramp:
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"quality_ramp values must be in [0, 1], got {value}")


@dataclass(frozen=True)
class DataSettings:
    annotations: str | None = None
    min_side: float = 0.0

    def __post_init__(self) -> None:
        if self.min_side < 0:
            raise ValueError(f"min_side must be >= 0, got {self.min_side}")


@dataclass(frozen=True)
class ToolConfig:
    anchors: AnchorConfig = field(
        default_factory=lambda: AnchorConfig(
            levels=tuple(zip(DEFAULT_STRIDES, DEFAULT_BASE_SCALES)),
            scale_ratio=DEFAULT_SCALE_RATIO,
        )
    )
    strategy: str = "sms"
    match: MatchParams = field(default_factory=MatchParams)
    compensation: CompensationParams = field(default_factory=CompensationParams)
    loss: LossParams = field(default_factory=LossParams)
    simulator: SimulatorSettings = field(default_factory=SimulatorSettings)
    data: DataSettings = field(default_factory=DataSettings)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


_SECTION_KEYS = {
    "anchors": ("strides", "base_scales", "scale_ratio", "aspect_ratio"),
    "match": ("strategy", "iou_threshold", "nams_stage2_floor", "nams_top_n_mode"),
    "compensation": ("t", "k"),
    "loss": ("alpha", "gamma", "smooth_l1_beta"),
    "simulator": ("q", "noise_sigma", "seed", "quality_ramp", "score_scale", "score_bias"),
    "data": ("annotations", "min_side"),
}


def parse_config(text: str) -> ToolConfig:
    """Parse and validate configuration text; unset keys take their defaults."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None

    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    def get(section: str, key: str, default: str | None = None) -> str | None:
        return parser.get(section, key, fallback=default)

    def build(section: str, key: str, converter, default):
        raw = get(section, key)
        if raw is None:
            return default
        try:
            return converter(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None

    strides = build("anchors", "strides", _parse_float_list, tuple(float(s) for s in DEFAULT_STRIDES))
    scales = build(
        "anchors", "base_scales", _parse_float_list, tuple(float(s) for s in DEFAULT_BASE_SCALES)
    )
    if len(strides) != len(scales):
        raise ConfigError(
            f"[anchors] strides and base_scales must pair up, got {len(strides)} vs {len(scales)}"
        )
    scale_ratio = build("anchors", "scale_ratio", float, DEFAULT_SCALE_RATIO)
    aspect_ratio = build("anchors", "aspect_ratio", float, 1.0)
    try:
        anchor_cfg = AnchorConfig(tuple(zip(strides, scales)), scale_ratio, aspect_ratio)
    except ValueError as exc:
        raise ConfigError(f"[anchors]: {exc}") from None

    strategy = build("match", "strategy", str, "sms").strip().lower()

    def top_n_mode(raw: str):
        raw = raw.strip()
        return raw if raw == "mean_matched" else int(raw)

    try:
        match = MatchParams(
            iou_threshold=build("match", "iou_threshold", float, 0.35),
            nams_stage2_floor=build("match", "nams_stage2_floor", float, 0.1),
            nams_top_n_mode=build("match", "nams_top_n_mode", top_n_mode, "mean_matched"),
        )
    except ValueError as exc:
        raise ConfigError(f"[match]: {exc}") from None
    try:
        comp = CompensationParams(
            T=build("compensation", "t", float, 0.8),
            K=build("compensation", "k", int, 3),
        )
    except ValueError as exc:
        raise ConfigError(f"[compensation]: {exc}") from None
    try:
        loss = LossParams(
            alpha=build("loss", "alpha", float, 0.25),
            gamma=build("loss", "gamma", float, 2.0),
            smooth_l1_beta=build("loss", "smooth_l1_beta", float, 1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"[loss]: {exc}") from None

    def ramp(raw: str) -> tuple[float, float]:
        parts = raw.split(":")
        if len(parts) != 2:
            raise ValueError(f"quality_ramp must be 'start:end', got {raw!r}")
        return float(parts[0]), float(parts[1])

    try:
        sim = SimulatorSettings(
            q=build("simulator", "q", float, 0.9),
            noise_sigma=build("simulator", "noise_sigma", float, 0.0),
            seed=build("simulator", "seed", int, 0),
            quality_ramp=build("simulator", "quality_ramp", ramp, None),
            score_scale=build("simulator", "score_scale", float, 4.0),
            score_bias=build("simulator", "score_bias", float, -2.0),
        )
    except ValueError as exc:
        raise ConfigError(f"[simulator]: {exc}") from None
    try:
        data = DataSettings(
            annotations=build("data", "annotations", str, None),
            min_side=build("data", "min_side", float, 0.0),
        )
    except ValueError as exc:
        raise ConfigError(f"[data]: {exc}") from None
    try:
        return ToolConfig(
            anchors=anchor_cfg,
            strategy=strategy,
            match=match,
            compensation=comp,
            loss=loss,
            simulator=sim,
            data=data,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ToolConfig:
    """Read and validate a config file; an empty or missing-section file is all defaults."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: ToolConfig) -> str:
    """Render a config back to INI text; parse_config(dump_config(c)) == c."""
    lines = [
        "[anchors]",
        "strides = " + ", ".join(_num(s) for s, _ in cfg.anchors.levels),
        "base_scales = " + ", ".join(_num(b) for _, b in cfg.anchors.levels),
        f"scale_ratio = {_num(cfg.anchors.scale_ratio)}",
        f"aspect_ratio = {_num(cfg.anchors.aspect_ratio)}",
        "",
        "[match]",
        f"strategy = {cfg.strategy}",
        f"iou_threshold = {_num(cfg.match.iou_threshold)}",
        f"nams_stage2_floor = {_num(cfg.match.nams_stage2_floor)}",
        f"nams_top_n_mode = {cfg.match.nams_top_n_mode}",
        "",
        "[compensation]",
        f"t = {_num(cfg.compensation.T)}",
        f"k = {cfg.compensation.K}",
        "",
        "[loss]",
        f"alpha = {_num(cfg.loss.alpha)}",
        f"gamma = {_num(cfg.loss.gamma)}",
        f"smooth_l1_beta = {_num(cfg.loss.smooth_l1_beta)}",
        "",
        "[simulator]",
        f"q = {_num(cfg.simulator.q)}",
        f"noise_sigma = {_num(cfg.simulator.noise_sigma)}",
        f"seed = {cfg.simulator.seed}",
        f"score_scale = {_num(cfg.simulator.score_scale)}",
        f"score_bias = {_num(cfg.simulator.score_bias)}",
    ]
    if cfg.simulator.quality_ramp is not None:
        start, end = cfg.simulator.quality_ramp
        lines.append(f"quality_ramp = {_num(start)}:{_num(end)}")
    lines += ["", "[data]", f"min_side = {_num(cfg.data.min_side)}"]
    if cfg.data.annotations is not None:
        lines.append(f"annotations = {cfg.data.annotations}")
    return "\n".join(lines) + "\n"


def config_as_dict(cfg: ToolConfig) -> dict:
    """Plain-JSON view of a config, for run manifests."""

    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclass_fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    return plain(cfg)


def _num(x: float) -> str:
    return f"{x:.12g}"
