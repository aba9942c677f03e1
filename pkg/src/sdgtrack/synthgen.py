"""Synthetic ground-to-air sequences: sky gradient, drifting clouds, one small textured target."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .core import BBox, ConfigError, DataError, Frame, format_value, iter_key_values

TRAJECTORIES = ("linear", "sinusoidal", "maneuver")


@dataclass(frozen=True)
class ScenarioSpec:
    width: int = 480
    height: int = 360
    frame_count: int = 150
    trajectory: str = "linear"
    start: tuple = (100.0, 100.0)
    velocity: tuple = (2.0, 0.0)
    amplitude: float = 0.0
    period: float = 60.0
    turns: tuple = ()
    target_size: tuple = (12.0, 10.0)
    target_color: tuple = (200, 60, 40)
    scale_min: float = 1.0
    scale_max: float = 1.0
    scale_period: float = 100.0
    texture_amp: float = 0.1
    cloud_count: int = 4
    cloud_size: tuple = (30.0, 80.0)
    cloud_brightness: tuple = (200.0, 245.0)
    cloud_drift: tuple = (0.3, 0.0)
    cloud_opacity: tuple = (0.5, 0.85)
    cloud_tint: float = 0.0
    sky_top: tuple = (95, 145, 215)
    sky_bottom: tuple = (175, 205, 235)
    occlusions: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ConfigError(f"trajectory: must be one of {', '.join(TRAJECTORIES)}")
        if self.frame_count < 1:
            raise ConfigError("frame_count: must be >= 1")
        if self.width < 8 or self.height < 8:
            raise ConfigError("width: frame must be at least 8x8")
        if min(self.target_size) * self.scale_min < 4:
            raise ConfigError("target_size: rendered target must stay >= 4 px")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("scale_min: need 0 < scale_min <= scale_max")
        for s, e in self.occlusions:
            if not 0 <= s < e <= self.frame_count:
                raise ConfigError(f"occlusions: interval {s}:{e} outside the sequence")


# spec field -> key in the flat key=value dialect
_KEYS = {
    "width": "width", "height": "height", "frame_count": "frame_count",
    "trajectory": "trajectory.kind", "start": "trajectory.start", "velocity": "trajectory.velocity",
    "amplitude": "trajectory.amplitude", "period": "trajectory.period", "turns": "trajectory.turns",
    "target_size": "target.size", "target_color": "target.color", "scale_min": "target.scale_min",
    "scale_max": "target.scale_max", "scale_period": "target.scale_period",
    "texture_amp": "target.texture_amp",
    "cloud_count": "clouds.count", "cloud_size": "clouds.size", "cloud_brightness": "clouds.brightness",
    "cloud_drift": "clouds.drift", "cloud_opacity": "clouds.opacity", "cloud_tint": "clouds.tint",
    "sky_top": "sky.top", "sky_bottom": "sky.bottom", "occlusions": "occlusions", "seed": "seed",
}
_FIELDS = {v: k for k, v in _KEYS.items()}
_INT_TUPLES = {"target_color", "sky_top", "sky_bottom"}
_PAIRS = {"turns": (int, float), "occlusions": (int, int)}


def _parse_field(name, text):
    default = getattr(ScenarioSpec, name, None) if name not in ("turns", "occlusions") else ()
    if name in _PAIRS:
        kinds = _PAIRS[name]
        out = []
        for item in filter(None, (p.strip() for p in text.split(";"))):
            a, _, b = item.partition(":")
            out.append((kinds[0](a), kinds[1](b)))
        return tuple(out)
    if isinstance(default, tuple):
        conv = int if name in _INT_TUPLES else float
        return tuple(conv(p) for p in text.split(","))
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    return type(default)(text)


def _format_field(value):
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(f"{format_value(a)}:{format_value(b)}" for a, b in value)
        return ",".join(format_value(v) for v in value)
    return format_value(value)


def parse_scenario(text: str, path=None) -> ScenarioSpec:
    values = {}
    for lineno, key, value in iter_key_values(text, path):
        if key not in _FIELDS:
            raise DataError(f"unknown scenario key {key!r}", path, lineno)
        name = _FIELDS[key]
        try:
            values[name] = _parse_field(name, value)
        except ValueError:
            raise DataError(f"{key}: cannot parse {value!r}", path, lineno) from None
    try:
        return ScenarioSpec(**values)
    except (ConfigError, TypeError) as exc:
        raise DataError(f"invalid scenario: {exc}", path) from None


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read scenario: {exc.strerror}", path) from None
    return parse_scenario(text, path)


def dump_scenario(spec: ScenarioSpec) -> str:
    return "".join(f"{_KEYS[f.name]}={_format_field(getattr(spec, f.name))}\n" for f in fields(spec))


# ---------------------------------------------------------------------------
# kinematics


def trajectory_centers(spec: ScenarioSpec) -> np.ndarray:
    t = np.arange(spec.frame_count, dtype=np.float64)
    start = np.asarray(spec.start, dtype=np.float64)
    vel = np.asarray(spec.velocity, dtype=np.float64)
    if spec.trajectory == "linear":
        return start + t[:, None] * vel
    if spec.trajectory == "sinusoidal":
        speed = np.hypot(*vel)
        normal = np.array([-vel[1], vel[0]]) / speed if speed > 0 else np.array([0.0, 1.0])
        wave = spec.amplitude * np.sin(2 * np.pi * t / spec.period)
        return start + t[:, None] * vel + wave[:, None] * normal
    speed = float(np.hypot(*vel))
    heading = math.atan2(vel[1], vel[0])
    turns = dict()
    for f, deg in spec.turns:
        turns[f] = turns.get(f, 0.0) + deg
    out = np.empty((spec.frame_count, 2))
    pos = start.copy()
    for i in range(spec.frame_count):
        out[i] = pos
        heading += math.radians(turns.get(i, 0.0))
        pos = pos + speed * np.array([math.cos(heading), math.sin(heading)])
    return out


def scale_schedule(spec: ScenarioSpec) -> np.ndarray:
    t = np.arange(spec.frame_count, dtype=np.float64)
    mid = (spec.scale_min + spec.scale_max) / 2.0
    amp = (spec.scale_max - spec.scale_min) / 2.0
    return mid + amp * np.sin(2 * np.pi * t / spec.scale_period)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    visible: np.ndarray
    boxes: list

    def __len__(self):
        return len(self.boxes)

    def box(self, i) -> BBox | None:
        return self.boxes[i]


def _occluded(spec, i):
    return any(s <= i < e for s, e in spec.occlusions)


@dataclass(frozen=True)
class _Cloud:
    cx: float
    cy: float
    sx: float
    sy: float
    vx: float
    vy: float
    color: tuple
    opacity: float


class Scene:
    """Pre-sampled scenario state; renders any frame independently of the others."""

    SUPERSAMPLE = 4

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.centers = trajectory_centers(spec)
        self.scales = scale_schedule(spec)
        w0, h0 = spec.target_size
        self.true_boxes = [BBox(float(c[0]), float(c[1]), w0 * s, h0 * s)
                           for c, s in zip(self.centers, self.scales)]
        rng = np.random.default_rng(spec.seed)
        tgt = np.asarray(spec.target_color, dtype=np.float64)
        self.clouds = []
        for _ in range(spec.cloud_count):
            size = rng.uniform(*spec.cloud_size)
            bright = rng.uniform(*spec.cloud_brightness)
            color = (1 - spec.cloud_tint) * np.full(3, bright) + spec.cloud_tint * tgt
            jitter = rng.uniform(0.8, 1.2, 2)
            self.clouds.append(_Cloud(
                cx=rng.uniform(0, spec.width), cy=rng.uniform(0, spec.height),
                sx=size / 4.0, sy=size / 4.0 * rng.uniform(0.5, 1.0),
                vx=spec.cloud_drift[0] * jitter[0], vy=spec.cloud_drift[1] * jitter[1],
                color=tuple(color), opacity=rng.uniform(*spec.cloud_opacity),
            ))
        self.visible = np.array([self._in_frame(b) and not _occluded(spec, i)
                                 for i, b in enumerate(self.true_boxes)])
        top = np.asarray(spec.sky_top, dtype=np.float64)
        bot = np.asarray(spec.sky_bottom, dtype=np.float64)
        f = ((np.arange(spec.height) + 0.5) / spec.height)[:, None]
        self._sky = np.broadcast_to((top + (bot - top) * f)[:, None, :], (spec.height, spec.width, 3))

    def _in_frame(self, b: BBox):
        return b.x0 >= 0 and b.y0 >= 0 and b.x1 <= self.spec.width and b.y1 <= self.spec.height

    def ground_truth(self) -> GroundTruth:
        boxes = [b if v else None for b, v in zip(self.true_boxes, self.visible)]
        return GroundTruth(self.visible.copy(), boxes)

    @staticmethod
    def _blend_blob(img, cx, cy, sx, sy, color, opacity):
        h, w, _ = img.shape
        r = 3.0 * max(sx, sy)
        c0, c1 = max(0, int(math.floor(cx - r))), min(w, int(math.ceil(cx + r)))
        r0, r1 = max(0, int(math.floor(cy - r))), min(h, int(math.ceil(cy + r)))
        if c1 <= c0 or r1 <= r0:
            return
        xs = np.arange(c0, c1) + 0.5 - cx
        ys = np.arange(r0, r1) + 0.5 - cy
        a = opacity * np.exp(-0.5 * ((xs[None, :] / sx) ** 2 + (ys[:, None] / sy) ** 2))
        region = img[r0:r1, c0:c1]
        region += a[..., None] * (np.asarray(color) - region)

    def _draw_target(self, img, b: BBox, scale):
        spec = self.spec
        h, w, _ = img.shape
        c0, c1 = max(0, int(math.floor(b.x0)) - 1), min(w, int(math.ceil(b.x1)) + 1)
        r0, r1 = max(0, int(math.floor(b.y0)) - 1), min(h, int(math.ceil(b.y1)) + 1)
        k = self.SUPERSAMPLE
        sub = (np.arange(k) + 0.5) / k
        xs = (np.arange(c0, c1)[:, None] + sub[None, :]).ravel()
        ys = (np.arange(r0, r1)[:, None] + sub[None, :]).ravel()
        X, Y = np.meshgrid(xs - b.cx, ys - b.cy)
        inside = (X / (b.w / 2)) ** 2 + (Y / (b.h / 2)) ** 2 <= 1.0
        cell = 2.0 * scale
        parity = (np.floor(X / cell) + np.floor(Y / cell)) % 2
        factor = np.where(parity == 0, 1.0 + spec.texture_amp, 1.0 - spec.texture_amp)
        color = np.clip(np.asarray(spec.target_color, dtype=np.float64) * factor[..., None], 0, 255)
        color = np.where(inside[..., None], color, 0.0)
        nr, nc = r1 - r0, c1 - c0
        tsum = color.reshape(nr, k, nc, k, 3).sum(axis=(1, 3)) / (k * k)
        cover = inside.reshape(nr, k, nc, k).mean(axis=(1, 3))
        region = img[r0:r1, c0:c1]
        region[:] = region * (1.0 - cover[..., None]) + tsum

    def render(self, i: int, with_target=True) -> Frame:
        spec = self.spec
        img = np.array(self._sky, dtype=np.float64)
        for c in self.clouds:
            self._blend_blob(img, c.cx + c.vx * i, c.cy + c.vy * i, c.sx, c.sy, c.color, c.opacity)
        b = self.true_boxes[i]
        if _occluded(spec, i):
            size = max(b.w, b.h)
            self._blend_blob(img, b.cx, b.cy, size * 0.9, size * 0.9, (228.0, 228.0, 230.0), 0.97)
        elif with_target and self.visible[i]:
            self._draw_target(img, b, self.scales[i])
        return Frame(i, np.floor(img + 0.5).clip(0, 255).astype(np.uint8))

    def frames(self):
        for i in range(self.spec.frame_count):
            yield self.render(i)


def generate(spec: ScenarioSpec):
    """All frames plus ground truth for a scenario."""
    scene = Scene(spec)
    return list(scene.frames()), scene.ground_truth()


# ---------------------------------------------------------------------------
# on-disk sequences


GT_FILE = "groundtruth.csv"
GT_HEADER = "frame,visible,cx,cy,w,h"


def frame_name(i: int) -> str:
    return f"frame_{i:06d}.ppm"


def write_ppm(path, pixels: np.ndarray):
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header", path)
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DataError("only binary 8-bit PPM (P6) is supported", path)
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError("truncated PPM pixel data", path)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def save_groundtruth(gt: GroundTruth, path):
    lines = [GT_HEADER]
    for i, b in enumerate(gt.boxes):
        if b is None:
            lines.append(f"{i},0,,,,")
        else:
            lines.append(f"{i},1,{b.cx!r},{b.cy!r},{b.w!r},{b.h!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_groundtruth(path) -> GroundTruth:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read ground truth: {exc.strerror}", path) from None
    visible, boxes = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or (lineno == 1 and line.startswith("frame")):
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataError("expected 6 fields", path, lineno)
        try:
            frame = int(parts[0])
            vis = parts[1].strip() == "1"
            box = BBox(*(float(p) for p in parts[2:])) if vis else None
        except ValueError as exc:
            raise DataError(f"bad ground-truth row: {exc}", path, lineno) from None
        if frame != len(boxes):
            raise DataError(f"expected frame {len(boxes)}, got {frame}", path, lineno)
        visible.append(vis)
        boxes.append(box)
    return GroundTruth(np.array(visible, dtype=bool), boxes)


def save_sequence(frames, gt: GroundTruth, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = 0
    for f in frames:
        write_ppm(d / frame_name(f.index), f.pixels)
        n += 1
    if n != len(gt):
        raise DataError(f"{n} frames but {len(gt)} ground-truth rows", d)
    save_groundtruth(gt, d / GT_FILE)


def frame_paths(directory) -> list[Path]:
    return sorted(Path(directory).glob("frame_*.ppm"))


def load_sequence(directory):
    d = Path(directory)
    gt_path = d / GT_FILE
    if not gt_path.is_file():
        raise DataError(f"missing {GT_FILE}", d)
    gt = load_groundtruth(gt_path)
    paths = frame_paths(d)
    expected = [frame_name(i) for i in range(len(gt))]
    if [p.name for p in paths] != expected:
        raise DataError(f"{len(paths)} frame files do not match {len(gt)} ground-truth rows", d)
    frames = [Frame(i, read_ppm(p)) for i, p in enumerate(paths)]
    return frames, gt


def iter_sequence_frames(directory):
    """Lazily read frames of a saved sequence (keeps memory flat for long runs)."""
    for i, p in enumerate(frame_paths(directory)):
        yield Frame(i, read_ppm(p))
