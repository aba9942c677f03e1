"""Sparse detection sources and latency compensation for stale anchors."""
from __future__ import annotations

import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .core import BBox, DataError, Detection, ObserverConfig, OracleConfig

log = logging.getLogger(__name__)


class DetectionSource(Protocol):
    def poll(self, frame_index: int) -> Detection | None:
        """Detection delivered at ``frame_index`` (its own frame may be older)."""


class NoDetections:
    def poll(self, frame_index):
        return None


@dataclass(frozen=True)
class OracleDetectorParams:
    period: int = 5
    latency: int = 1
    center_noise_sigma: float = 1.0
    size_noise_sigma: float = 0.0
    miss_rate: float = 0.0
    false_rate: float = 0.0
    score_range: tuple = (0.5, 1.0)
    rng_seed: int | tuple = 0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        for name in ("miss_rate", "false_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def from_config(cls, observer: ObserverConfig, oracle: OracleConfig) -> OracleDetectorParams:
        return cls(observer.detect_period, observer.latency, oracle.center_noise_sigma,
                   oracle.size_noise_sigma, oracle.miss_rate, oracle.false_rate,
                   (oracle.score_lo, oracle.score_hi), oracle.seed)


def oracle_poll(gt, params: OracleDetectorParams, now: int, frame_size=None) -> Detection | None:
    """Ground-truth detector on a fixed schedule with seeded noise.

    The random draws depend only on ``(seed, frame)``, so polling order does not
    matter. ``frame_size`` bounds false positives; it defaults to the extent of
    the visible ground truth.
    """
    src = now - params.latency
    if src < 0 or src >= len(gt.boxes) or src % params.period != 0:
        return None
    box = gt.boxes[src]
    if box is None:
        return None
    seed = params.rng_seed if isinstance(params.rng_seed, tuple) else (params.rng_seed,)
    rng = np.random.default_rng([*seed, src])
    lo, hi = params.score_range
    u_miss, u_false = rng.random(2)
    if u_false < params.false_rate:
        if frame_size is None:
            frame_size = _gt_extent(gt)
        fw, fh = frame_size
        w, h = box.w, box.h
        cx = rng.uniform(w / 2, max(w / 2, fw - w / 2))
        cy = rng.uniform(h / 2, max(h / 2, fh - h / 2))
        return Detection(src, BBox(cx, cy, w, h), float(rng.uniform(lo, hi)))
    if u_miss < params.miss_rate:
        return None
    dx, dy = rng.normal(0.0, params.center_noise_sigma, 2) if params.center_noise_sigma > 0 else (0.0, 0.0)
    ds = float(np.exp(rng.normal(0.0, params.size_noise_sigma))) if params.size_noise_sigma > 0 else 1.0
    score = float(rng.uniform(lo, hi))
    return Detection(src, BBox(box.cx + dx, box.cy + dy, box.w * ds, box.h * ds), score)


def _gt_extent(gt):
    xs = [b.x1 for b in gt.boxes if b is not None] or [1.0]
    ys = [b.y1 for b in gt.boxes if b is not None] or [1.0]
    return max(xs), max(ys)


class OracleDetector:
    def __init__(self, gt, params: OracleDetectorParams, frame_size=None):
        self.gt = gt
        self.params = params
        self.frame_size = frame_size

    def poll(self, frame_index):
        return oracle_poll(self.gt, self.params, frame_index, self.frame_size)


class ListDetections:
    """Replays stored detections, each delivered ``latency`` frames after its own frame."""

    def __init__(self, detections, latency: int = 0):
        self.latency = latency
        self._by_frame = {}
        for d in detections:
            cur = self._by_frame.get(d.frame_index)
            if cur is None or d.score > cur.score:
                self._by_frame[d.frame_index] = d

    def poll(self, frame_index):
        return self._by_frame.get(frame_index - self.latency)


class ThreadedSource:
    """Runs a source on a worker thread; results come back through a queue.

    ``poll`` submits the frame index and returns whatever finished since the last
    call (newest first, older ones are dropped as superseded). Delivery order
    follows frame order because the worker is a single FIFO consumer.
    """

    def __init__(self, inner: DetectionSource):
        self.inner = inner
        self._requests: queue.Queue = queue.Queue()
        self._results: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def _run(self):
        while True:
            idx = self._requests.get()
            if idx is None:
                return
            det = self.inner.poll(idx)
            if det is not None:
                self._results.put(det)

    def poll(self, frame_index):
        self._requests.put(frame_index)
        latest = None
        while True:
            try:
                latest = self._results.get_nowait()
            except queue.Empty:
                return latest

    def drain(self, timeout=5.0):
        """Stop the worker and return every detection it still holds, in order."""
        self._requests.put(None)
        self._worker.join(timeout)
        out = []
        while not self._results.empty():
            out.append(self._results.get_nowait())
        return out


# ---------------------------------------------------------------------------
# CSV


DETECTIONS_HEADER = "frame,score,cx,cy,w,h"


def parse_detections(text: str, path=None) -> list[Detection]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if lineno == 1 and line.replace(" ", "") == DETECTIONS_HEADER:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise DataError(f"expected 6 fields, got {len(parts)}", path, lineno)
        try:
            frame = int(parts[0])
            vals = [float(p) for p in parts[1:]]
            out.append(Detection(frame, BBox(vals[1], vals[2], vals[3], vals[4]), vals[0]))
        except ValueError as exc:
            raise DataError(f"bad detection: {exc}", path, lineno) from None
    out.sort(key=lambda d: d.frame_index)
    return out


def load_detections(path) -> list[Detection]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read detections: {exc.strerror}", path) from None
    return parse_detections(text, path)


def format_detections(dets) -> str:
    lines = [DETECTIONS_HEADER]
    for d in dets:
        b = d.bbox
        lines.append(f"{d.frame_index},{d.score!r},{b.cx!r},{b.cy!r},{b.w!r},{b.h!r}")
    return "\n".join(lines) + "\n"


def save_detections(dets, path):
    Path(path).write_text(format_detections(dets))


# ---------------------------------------------------------------------------
# latency compensation


class DisplacementBuffer:
    """Per-frame target displacement (frame ``t-1`` to ``t``) for the last ``capacity`` frames."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def record(self, frame_index: int, disp):
        self._items.append((frame_index, np.asarray(disp, dtype=np.float64).copy()))

    def has(self, frame_index):
        return any(i == frame_index for i, _ in self._items)

    def oldest(self):
        return self._items[0][0] if self._items else None

    def total(self, after: int, upto: int) -> np.ndarray:
        """Summed displacement over frames ``(after, upto]``."""
        s = np.zeros(2)
        for i, d in self._items:
            if after < i <= upto:
                s += d
        return s


def rebase_anchor(det: Detection, buf: DisplacementBuffer, now: int):
    """Carry a late detection forward to ``now``; returns ``(bbox, stale)``."""
    gap = now - det.frame_index
    if gap < 0:
        raise ValueError("detection is from the future")
    if gap == 0:
        return det.bbox, False
    if gap > buf.capacity:
        log.warning("detection %d frames old exceeds rebase buffer (%d); applied as-is", gap, buf.capacity)
        return det.bbox, True
    shift = buf.total(det.frame_index, now)
    return det.bbox.translated(*shift), False
