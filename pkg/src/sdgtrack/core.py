"""Geometry, frame container and configuration shared by every stage.

Coordinates are continuous image-plane pixels: pixel column ``j`` covers
``[j, j + 1)`` so its center sits at ``j + 0.5`` and a W x H frame spans
``[0, W] x [0, H]``.
"""
from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value or key."""


class DataError(ValueError):
    """Malformed input file; carries the file and line when known."""

    def __init__(self, message, path=None, line=None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path + (f":{line}" if line is not None else "") + ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w} h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError("box fields must be finite")

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> BBox:
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def translated(self, dx, dy) -> BBox:
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)

    def scaled(self, s) -> BBox:
        """Scale about the center."""
        return BBox(self.cx, self.cy, self.w * s, self.h * s)

    def rescaled(self, s) -> BBox:
        """Scale the whole coordinate system (center included)."""
        return BBox(self.cx * s, self.cy * s, self.w * s, self.h * s)

    def pixel_span(self, width=None, height=None):
        """Integer ``(c0, r0, c1, r1)`` half-open pixel ranges whose centers fall in the box."""
        c0 = int(math.floor(self.x0 + 0.5))
        r0 = int(math.floor(self.y0 + 0.5))
        c1 = int(math.floor(self.x1 + 0.5))
        r1 = int(math.floor(self.y1 + 0.5))
        if c1 <= c0:
            c1 = c0 + 1
        if r1 <= r0:
            r1 = r0 + 1
        if width is not None:
            c0, c1 = max(0, c0), min(width, c1)
        if height is not None:
            r0, r1 = max(0, r0), min(height, r1)
        return c0, r0, c1, r1


@dataclass(frozen=True, eq=False)
class Frame:
    """An RGB raster (``pixels`` is H x W x 3 uint8)."""

    index: int
    pixels: np.ndarray
    timestamp: float | None = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame pixels must be H x W x 3, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"frame pixels must be uint8, got {px.dtype}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"frame must be at least 8x8, got {px.shape[1]}x{px.shape[0]}")
        if self.index < 0:
            raise ValueError("frame index must be >= 0")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def crop(self, c0, r0, c1, r1) -> np.ndarray:
        return self.pixels[r0:r1, c0:c1]


@dataclass(frozen=True)
class Detection:
    frame_index: int
    bbox: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def cle(a: BBox, b: BBox) -> float:
    """Center location error in pixels."""
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def clip_to_frame(b: BBox, width, height) -> BBox | None:
    """Intersect ``b`` with the frame; ``None`` when nothing is left."""
    if width <= 0 or height <= 0:
        raise ValueError("frame dimensions must be positive")
    x0, y0 = max(0.0, b.x0), max(0.0, b.y0)
    x1, y1 = min(float(width), b.x1), min(float(height), b.y1)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox.from_corners(x0, y0, x1, y1)


# ---------------------------------------------------------------------------
# configuration


def _require(cond, name, message):
    if not cond:
        raise ConfigError(f"{name}: {message}")


@dataclass(frozen=True)
class FollowerConfig:
    win_small: int = 5
    win_large: int = 21
    tau_area: float = 400.0
    q_low: float = 0.01
    q_high: float = 0.05
    drift_period_n: int = 10
    stable_k: int = 50
    eps_stable: float = 0.05
    roi_expand: float = 2.5
    pyramid_levels: int = 3
    max_features: int = 60
    min_inliers: int = 4
    median_reject_k: float = 2.0
    feature_min_dist: float = 2.0
    lk_max_iter: int = 20
    lk_eps: float = 0.01
    max_residual: float = 0.12
    scale_min_step: float = 0.5
    scale_max_step: float = 2.0
    drift_accept: float = 0.6
    drift_blend: float = 0.5
    q_pos: float = 1.0
    q_vel: float = 0.5
    q_size: float = 0.1
    r_pos: float = 4.0
    r_size: float = 4.0
    p0_pos: float = 4.0
    p0_vel: float = 100.0
    p0_size: float = 4.0

    def __post_init__(self):
        _require(self.win_small % 2 == 1 and self.win_small >= 3, "win_small", "must be odd and >= 3")
        _require(self.win_large % 2 == 1, "win_large", "must be odd")
        _require(self.win_small < self.win_large, "win_small", "must be smaller than win_large")
        _require(0 < self.q_low <= self.q_high < 1, "q_low", "need 0 < q_low <= q_high < 1")
        _require(self.tau_area > 0, "tau_area", "must be positive")
        _require(self.roi_expand >= 1, "roi_expand", "must be >= 1")
        _require(self.min_inliers >= 3, "min_inliers", "must be >= 3")
        _require(self.drift_period_n >= 1, "drift_period_n", "must be >= 1")
        _require(self.stable_k >= 1, "stable_k", "must be >= 1")
        _require(self.eps_stable > 0, "eps_stable", "must be positive")
        _require(self.pyramid_levels >= 1, "pyramid_levels", "must be >= 1")
        _require(self.max_features >= self.min_inliers, "max_features", "must be >= min_inliers")
        _require(self.median_reject_k > 0, "median_reject_k", "must be positive")
        _require(0 < self.scale_min_step <= 1 <= self.scale_max_step, "scale_min_step",
                 "need scale_min_step <= 1 <= scale_max_step")
        _require(0 <= self.drift_blend <= 1, "drift_blend", "must be in [0, 1]")
        for name in ("q_pos", "q_vel", "q_size", "r_pos", "r_size", "p0_pos", "p0_vel", "p0_size"):
            _require(getattr(self, name) > 0, name, "must be positive")


@dataclass(frozen=True)
class RecoveryConfig:
    hist_bins_h: int = 16
    hist_bins_s: int = 16
    alpha_min: float = 0.3
    alpha_max: float = 0.8
    accept_threshold: float = 0.4
    pos_sigma_frac: float = 0.2
    lab_reg_lambda: float = 1e-3
    max_recovery_frames: int = 30
    recovery_downscale: int = 2
    min_area_floor: float = 4.0
    min_area_frac: float = 0.1

    def __post_init__(self):
        _require(self.hist_bins_h >= 1, "hist_bins_h", "must be >= 1")
        _require(self.hist_bins_s >= 1, "hist_bins_s", "must be >= 1")
        _require(0 <= self.alpha_min <= self.alpha_max <= 1, "alpha_min",
                 "need 0 <= alpha_min <= alpha_max <= 1")
        _require(0 < self.accept_threshold < 1, "accept_threshold", "must be in (0, 1)")
        _require(self.lab_reg_lambda > 0, "lab_reg_lambda", "must be positive")
        _require(self.pos_sigma_frac > 0, "pos_sigma_frac", "must be positive")
        _require(self.max_recovery_frames >= 0, "max_recovery_frames", "must be >= 0")
        _require(self.recovery_downscale >= 1, "recovery_downscale", "must be >= 1")


@dataclass(frozen=True)
class ObserverConfig:
    tau_det: float = 0.25
    detect_period: int = 5
    latency: int = 1
    rebase_buffer: int = 30

    def __post_init__(self):
        _require(self.detect_period >= 1, "detect_period", "must be >= 1")
        _require(self.latency >= 0, "latency", "must be >= 0")
        _require(self.rebase_buffer >= self.latency, "rebase_buffer", "must be >= latency")
        _require(0 <= self.tau_det <= 1, "tau_det", "must be in [0, 1]")


@dataclass(frozen=True)
class OracleConfig:
    """Noise model of the ground-truth detector; period/latency come from ObserverConfig."""

    center_noise_sigma: float = 1.0
    size_noise_sigma: float = 0.0
    miss_rate: float = 0.0
    false_rate: float = 0.0
    score_lo: float = 0.5
    score_hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        _require(0 <= self.miss_rate <= 1, "miss_rate", "must be in [0, 1]")
        _require(0 <= self.false_rate <= 1, "false_rate", "must be in [0, 1]")
        _require(0 <= self.score_lo <= self.score_hi <= 1, "score_lo", "need 0 <= score_lo <= score_hi <= 1")
        _require(self.center_noise_sigma >= 0, "center_noise_sigma", "must be >= 0")
        _require(self.size_noise_sigma >= 0, "size_noise_sigma", "must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    follower_enabled: bool = True
    recovery_enabled: bool = True


@dataclass(frozen=True)
class TrackerConfig:
    follower: FollowerConfig = field(default_factory=FollowerConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def with_overrides(self, **sections) -> TrackerConfig:
        """``cfg.with_overrides(observer={"latency": 0})``"""
        changes = {name: replace(getattr(self, name), **vals) for name, vals in sections.items()}
        return replace(self, **changes)


def parse_value(text: str, kind, name="value"):
    """Convert config text for a field annotated as ``kind``."""
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None
    raise ConfigError(f"{name}: unsupported field type {kind}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def iter_key_values(text: str, path=None):
    """Yield ``(line_number, key, value)`` from flat key=value text; ``#`` starts a comment."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"expected key=value, got {raw.strip()!r}", path, lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise DataError("empty key", path, lineno)
        yield lineno, key, value.strip()


def parse_config(text: str, path=None, base: TrackerConfig | None = None) -> TrackerConfig:
    """Parse ``section.field=value`` lines over the defaults (or ``base``)."""
    cfg = base or TrackerConfig()
    sections = {f.name: f for f in fields(TrackerConfig)}
    pending: dict[str, dict] = {}
    hints = {}
    for lineno, key, value in iter_key_values(text, path):
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise DataError(f"unknown config key {key!r}", path, lineno)
        cls = type(getattr(cfg, section))
        if cls not in hints:
            hints[cls] = typing.get_type_hints(cls)
        if name not in hints[cls]:
            raise DataError(f"unknown config key {key!r}", path, lineno)
        try:
            pending.setdefault(section, {})[name] = parse_value(value, hints[cls][name], key)
        except ConfigError as exc:
            raise DataError(str(exc), path, lineno) from None
    try:
        return cfg.with_overrides(**pending)
    except ConfigError as exc:
        raise DataError(f"invalid configuration: {exc}", path) from None


def load_config(path) -> TrackerConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path)


def dump_config(cfg: TrackerConfig) -> str:
    lines = []
    for sec in fields(TrackerConfig):
        obj = getattr(cfg, sec.name)
        for f in fields(obj):
            lines.append(f"{sec.name}.{f.name}={format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
