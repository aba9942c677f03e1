"""Frame-by-frame state machine joining detection anchors, flow following and recovery."""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import BBox, DataError, Frame, TrackerConfig, clip_to_frame
from .follower import (FlowLost, FollowerState, KalmanState, capture_template, drift_correct, follower_step,
                       init_follower, kalman_predict, maybe_update_template)
from .observer import DisplacementBuffer, rebase_anchor
from .recovery import RecoveryContext, attempt_recovery

log = logging.getLogger(__name__)


class TrackerMode(enum.Enum):
    UNINITIALIZED = "UNINITIALIZED"
    TRACKING = "TRACKING"
    RECOVERING = "RECOVERING"
    LOST = "LOST"


SOURCES = ("DETECTION", "FLOW", "RECOVERY", "HOLD", "NONE")


@dataclass(frozen=True)
class TrackRecord:
    frame_index: int
    mode: TrackerMode
    bbox: BBox | None
    source: str
    detection_applied: bool = False

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if (self.bbox is None) != (self.source == "NONE"):
            raise ValueError("bbox must be present exactly when source is not NONE")


@dataclass(frozen=True, eq=False)
class PipelineState:
    mode: TrackerMode = TrackerMode.UNINITIALIZED
    follower: FollowerState | None = None
    recovery: RecoveryContext | None = None
    hold: KalmanState | None = None
    prev_frame: Frame | None = None
    buffer: DisplacementBuffer | None = None
    stale_anchors: int = 0
    history: tuple = ()


STAGES = ("detect", "follow", "recover", "total")


def initial_state(cfg: TrackerConfig) -> PipelineState:
    return PipelineState(buffer=DisplacementBuffer(cfg.observer.rebase_buffer))


def _hold_box(kal: KalmanState, frame: Frame) -> BBox:
    b = kal.bbox()
    return BBox(min(max(b.cx, 0.0), frame.width), min(max(b.cy, 0.0), frame.height), b.w, b.h)


def _enter_recovery(state: PipelineState, frame: Frame, cfg) -> PipelineState:
    f = state.follower
    ctx = RecoveryContext(f.template, f.smoothed, f.frame_index)
    hold = KalmanState(f.kalman.x.copy(), f.kalman.P.copy())
    return replace(state, mode=TrackerMode.RECOVERING, follower=None, recovery=ctx, hold=hold)


def step(frame: Frame, source, state: PipelineState, cfg: TrackerConfig, timings=None):
    """Advance one frame; returns ``(state, TrackRecord)``.

    The follower runs before the anchor is applied so the displacement of this
    frame is known when a late detection is carried forward to it.
    """
    fcfg, rcfg = cfg.follower, cfg.recovery
    prev = state.prev_frame
    if prev is not None and frame.index <= prev.index:
        raise ValueError(f"frame {frame.index} arrived after frame {prev.index}")
    if state.buffer is None:
        state = replace(state, buffer=DisplacementBuffer(cfg.observer.rebase_buffer))
    if prev is not None and prev.pixels.shape != frame.pixels.shape:
        raise ValueError("frame size changed mid-sequence")
    clock = time.perf_counter
    t_start = clock()

    t0 = clock()
    det = source.poll(frame.index)
    if det is not None and det.score <= cfg.observer.tau_det:
        det = None
    _tick(timings, "detect", clock() - t0)

    record = None
    disp = np.zeros(2)
    mode = state.mode

    if mode is TrackerMode.TRACKING:
        f = state.follower
        if not cfg.pipeline.follower_enabled:
            record = TrackRecord(frame.index, mode, f.smoothed, "HOLD")
        else:
            t0 = clock()
            try:
                f, box = follower_step(f, prev, frame, fcfg)
                disp = f.last_disp
                if f.frames_since_drift_check >= fcfg.drift_period_n:
                    f = drift_correct(f, frame, fcfg)
                    box = f.smoothed
                f = maybe_update_template(f, frame, fcfg)
                state = replace(state, follower=f)
                record = TrackRecord(frame.index, mode, box, "FLOW")
            except FlowLost as exc:
                log.debug("frame %d: %s", frame.index, exc)
                state = _enter_recovery(state, frame, cfg)
                mode = state.mode
            _tick(timings, "follow", clock() - t0)

    if mode is TrackerMode.RECOVERING:
        hold = kalman_predict(state.hold, fcfg.q_pos, fcfg.q_vel, fcfg.q_size)
        disp = hold.x[2:4].copy()
        state = replace(state, hold=hold)
        recovered = None
        ctx = state.recovery
        if cfg.pipeline.recovery_enabled and det is None:
            t0 = clock()
            recovered, ctx = attempt_recovery(frame, ctx, rcfg)
            _tick(timings, "recover", clock() - t0)
        else:
            ctx = replace(ctx, attempts=ctx.attempts + 1)
        if recovered is not None:
            f = init_follower(frame, recovered, fcfg, template=ctx.template)
            state = replace(state, mode=TrackerMode.TRACKING, follower=f, recovery=None, hold=None)
            record = TrackRecord(frame.index, TrackerMode.TRACKING, recovered, "RECOVERY")
        elif ctx.attempts > rcfg.max_recovery_frames:
            state = replace(state, mode=TrackerMode.LOST, recovery=None, hold=None)
            record = TrackRecord(frame.index, TrackerMode.LOST, None, "NONE")
        else:
            state = replace(state, recovery=ctx)
            record = TrackRecord(frame.index, mode, _hold_box(hold, frame), "HOLD")

    state.buffer.record(frame.index, disp)

    if det is not None:
        anchor, stale = rebase_anchor(det, state.buffer, frame.index)
        anchor = clip_to_frame(anchor, frame.width, frame.height)
        if anchor is not None:
            template = None
            last_disp = None
            if state.follower is not None:
                template, last_disp = state.follower.template, state.follower.last_disp
            elif state.recovery is not None:
                template = state.recovery.template
            if template is None:
                template = _anchor_template(det, state.history, frame, anchor, rcfg)
            f = init_follower(frame, anchor, fcfg, template=template,
                              bins=(rcfg.hist_bins_h, rcfg.hist_bins_s), last_disp=last_disp)
            state = replace(state, mode=TrackerMode.TRACKING, follower=f, recovery=None, hold=None,
                            stale_anchors=state.stale_anchors + int(stale))
            record = TrackRecord(frame.index, TrackerMode.TRACKING, anchor, "DETECTION", True)

    if record is None:
        record = TrackRecord(frame.index, state.mode, None, "NONE")
    keep = cfg.observer.latency
    history = (state.history[-keep:] if keep else ()) + (frame,)
    state = replace(state, prev_frame=frame, history=history)
    _tick(timings, "total", clock() - t_start)
    return state, record


def _anchor_template(det, history, frame, anchor, rcfg):
    # the detection box is exact on its own frame; rebasing only approximates it later
    bins = (rcfg.hist_bins_h, rcfg.hist_bins_s)
    for old in history:
        if old.index == det.frame_index:
            box = clip_to_frame(det.bbox, old.width, old.height)
            if box is not None:
                return capture_template(old, box, bins)
    return capture_template(frame, anchor, bins)


def _tick(timings, stage, dt):
    if timings is not None:
        timings.setdefault(stage, []).append(dt)


@dataclass
class TimingSummary:
    frames: int
    wall_time: float
    stages: dict = field(default_factory=dict)

    @property
    def update_rate(self) -> float:
        return self.frames / self.wall_time if self.wall_time > 0 else 0.0

    @classmethod
    def from_samples(cls, frames, wall_time, samples):
        stages = {}
        for name in STAGES:
            xs = np.asarray(samples.get(name, []), dtype=np.float64) * 1e3
            if len(xs):
                stages[name] = (len(xs), float(xs.mean()), float(np.percentile(xs, 50)),
                                float(np.percentile(xs, 95)))
        return cls(frames, wall_time, stages)

    def report(self) -> str:
        lines = [f"frames: {self.frames}", f"wall_time_s: {self.wall_time:.4f}",
                 f"update_rate_fps: {self.update_rate:.2f}"]
        for name, (n, mean, p50, p95) in self.stages.items():
            lines += [f"{name}.calls: {n}", f"{name}.mean_ms: {mean:.3f}",
                      f"{name}.p50_ms: {p50:.3f}", f"{name}.p95_ms: {p95:.3f}"]
        return "\n".join(lines) + "\n"


def run_sequence(frames, source, cfg: TrackerConfig):
    """Track every frame; returns ``(records, TimingSummary)``."""
    state = initial_state(cfg)
    records = []
    samples: dict = {}
    t0 = time.perf_counter()
    for frame in frames:
        state, rec = step(frame, source, state, cfg, samples)
        records.append(rec)
    if not records:
        raise ValueError("empty sequence")
    return records, TimingSummary.from_samples(len(records), time.perf_counter() - t0, samples)


# ---------------------------------------------------------------------------
# track CSV

TRACK_HEADER = "frame,mode,source,cx,cy,w,h,detection_applied"


def format_track(records) -> str:
    lines = [TRACK_HEADER]
    for r in records:
        if r.bbox is None:
            geo = ",,,"
        else:
            geo = f"{r.bbox.cx!r},{r.bbox.cy!r},{r.bbox.w!r},{r.bbox.h!r}"
        lines.append(f"{r.frame_index},{r.mode.value},{r.source},{geo},{int(r.detection_applied)}")
    return "\n".join(lines) + "\n"


def save_track(records, path):
    Path(path).write_text(format_track(records))


def parse_track(text: str, path=None) -> list[TrackRecord]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or (lineno == 1 and line == TRACK_HEADER):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 8:
            raise DataError(f"expected 8 fields, got {len(parts)}", path, lineno)
        try:
            mode = TrackerMode(parts[1])
            bbox = None if parts[3] == "" else BBox(*(float(p) for p in parts[3:7]))
            out.append(TrackRecord(int(parts[0]), mode, bbox, parts[2], parts[7] == "1"))
        except ValueError as exc:
            raise DataError(f"bad track record: {exc}", path, lineno) from None
    return out


def load_track(path) -> list[TrackRecord]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read track: {exc.strerror}", path) from None
    return parse_track(text, path)
