"""Precision / success-AUC metrics, interpolation baselines and the ablation runner."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import DataError, TrackerConfig, cle, iou
from .observer import ListDetections, OracleDetector, OracleDetectorParams
from .pipeline import TrackRecord, TrackerMode, run_sequence
from . import synthgen

PRECISION_PX = 20.0
THRESHOLDS = tuple(k / 20 for k in range(21))


@dataclass(frozen=True)
class EvalResult:
    precision: float
    auc: float
    success: tuple
    frames_evaluated: int
    mean_update_rate: float = 0.0

    def report(self) -> str:
        lines = [f"precision={self.precision!r}", f"auc={self.auc!r}",
                 f"frames_evaluated={self.frames_evaluated}",
                 f"mean_update_rate={self.mean_update_rate!r}"]
        lines += [f"success@{t:.2f}={s!r}" for t, s in zip(THRESHOLDS, self.success)]
        return "\n".join(lines) + "\n"

    def success_curve(self) -> str:
        """Two-column data file for plotting the success curve."""
        body = "".join(f"{t:.2f} {s:.6f}\n" for t, s in zip(THRESHOLDS, self.success))
        return "# iou_threshold success_rate\n" + body


def frame_errors(records, gt, count_hold=True):
    """Per visible frame ``(cle, iou)``; a missing prediction is ``(inf, 0)``."""
    by_frame = {}
    for r in records:
        if r.frame_index in by_frame:
            raise ValueError(f"duplicate record for frame {r.frame_index}")
        by_frame[r.frame_index] = r
    if len(by_frame) != len(gt) or set(by_frame) != set(range(len(gt))):
        raise ValueError(f"records cover {len(by_frame)} frames, ground truth has {len(gt)}")
    errs = []
    for i, g in enumerate(gt.boxes):
        if g is None:
            continue
        r = by_frame[i]
        pred = r.bbox
        if r.source == "HOLD" and not count_hold:
            pred = None
        errs.append((math.inf, 0.0) if pred is None else (cle(pred, g), iou(pred, g)))
    return np.array(errs, dtype=np.float64).reshape(-1, 2)


def evaluate(records, gt, count_hold=True, update_rate=0.0) -> EvalResult:
    errs = frame_errors(records, gt, count_hold)
    n = len(errs)
    if n == 0:
        return EvalResult(0.0, 0.0, (0.0,) * len(THRESHOLDS), 0, update_rate)
    precision = float(np.mean(errs[:, 0] < PRECISION_PX))
    success = tuple(float(np.mean(errs[:, 1] > t)) for t in THRESHOLDS)
    return EvalResult(precision, float(np.mean(success)), success, n, update_rate)


# ---------------------------------------------------------------------------
# baselines


def _delivered(detections, latency):
    by_frame = {}
    for d in detections:
        by_frame[d.frame_index + latency] = d
    return by_frame


def zoh_baseline(detections, frame_count, latency=0) -> list[TrackRecord]:
    """Repeat the latest delivered detection until the next one arrives."""
    delivered = _delivered(detections, latency)
    out, last = [], None
    for i in range(frame_count):
        d = delivered.get(i)
        if d is not None:
            last = d
            out.append(TrackRecord(i, TrackerMode.TRACKING, d.bbox, "DETECTION", True))
        elif last is not None:
            out.append(TrackRecord(i, TrackerMode.TRACKING, last.bbox, "HOLD"))
        else:
            out.append(TrackRecord(i, TrackerMode.UNINITIALIZED, None, "NONE"))
    return out


def cv_predictor_baseline(detections, frame_count, latency=0) -> list[TrackRecord]:
    """Extrapolate the latest detection along the velocity of the last two."""
    delivered = _delivered(detections, latency)
    out, last, vel = [], None, np.zeros(2)
    for i in range(frame_count):
        d = delivered.get(i)
        if d is not None:
            if last is not None and d.frame_index > last.frame_index:
                vel = (d.bbox.center - last.bbox.center) / (d.frame_index - last.frame_index)
            last = d
        if last is None:
            out.append(TrackRecord(i, TrackerMode.UNINITIALIZED, None, "NONE"))
            continue
        shift = vel * (i - last.frame_index)
        box = last.bbox.translated(*shift) if np.any(shift) else last.bbox
        out.append(TrackRecord(i, TrackerMode.TRACKING, box, "DETECTION" if d is not None else "HOLD",
                               d is not None))
    return out


# ---------------------------------------------------------------------------
# scenario suite


def default_suite() -> list[tuple[str, synthgen.ScenarioSpec]]:
    """Ten fast-moving scenarios: sharp maneuvers, strong scale change, occlusions."""
    S = synthgen.ScenarioSpec
    return [
        ("fast_sine", S(trajectory="sinusoidal", start=(50, 180), velocity=(2.6, 0), amplitude=70,
                        period=60, seed=101)),
        ("zigzag", S(trajectory="maneuver", start=(40, 110), velocity=(2.5, 4.33),
                     turns=((30, -120), (60, 120), (90, -120), (120, 120)), seed=102)),
        ("loop", S(trajectory="maneuver", start=(120, 70), velocity=(6, 0),
                   turns=((25, 90), (45, 90), (70, 90), (90, 90), (115, 90), (135, 90)), seed=103)),
        ("hard_turns", S(trajectory="maneuver", start=(80, 290), velocity=(5, -3),
                         turns=((22, 120), (40, -100), (65, -80), (90, -130), (110, 90), (130, 100)),
                         seed=104)),
        ("scale_sine", S(trajectory="sinusoidal", start=(60, 180), velocity=(2.4, 0), amplitude=80,
                         period=75, scale_min=0.6, scale_max=1.8, scale_period=70, seed=105)),
        ("scale_loop", S(trajectory="maneuver", start=(100, 80), velocity=(5, 1),
                         turns=((40, 100), (70, 80), (105, 100), (130, 80)),
                         scale_min=0.5, scale_max=1.6, scale_period=90, seed=106)),
        ("occl_sine", S(trajectory="sinusoidal", start=(50, 180), velocity=(2.5, 0), amplitude=60,
                        period=70, occlusions=((41, 61), (102, 122)), seed=107)),
        ("occl_turns", S(trajectory="maneuver", start=(60, 90), velocity=(5, 1),
                         turns=((35, 110), (60, -100), (85, -90), (115, -90)),
                         occlusions=((43, 63), (96, 116)), seed=108)),
        ("occl_scale", S(trajectory="sinusoidal", start=(60, 170), velocity=(2.4, 0.3), amplitude=50,
                         period=55, scale_min=0.7, scale_max=1.5, scale_period=80,
                         occlusions=((47, 67), (104, 124)), seed=109)),
        ("occl_clutter", S(trajectory="sinusoidal", start=(50, 190), velocity=(2.5, -0.2), amplitude=65,
                           period=65, cloud_count=10, cloud_tint=0.25,
                           occlusions=((38, 58), (93, 113)), seed=110)),
    ]


SCENARIO_SUFFIX = ".scenario"


def write_suite(directory, suite=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, spec in suite or default_suite():
        (directory / f"{name}{SCENARIO_SUFFIX}").write_text(synthgen.dump_scenario(spec))


def load_suite(directory) -> list[tuple[str, synthgen.ScenarioSpec]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError("suite directory does not exist", directory)
    paths = sorted(directory.glob(f"*{SCENARIO_SUFFIX}"))
    if not paths:
        raise DataError(f"no *{SCENARIO_SUFFIX} files", directory)
    return [(p.stem, synthgen.load_scenario(p)) for p in paths]


# ---------------------------------------------------------------------------
# ablation

VARIANTS = ("ZOH", "CV-predictor", "Follower-only", "Full", "Dense-oracle")


@dataclass(frozen=True)
class AblationRow:
    scenario: str
    variant: str
    occluded: bool
    result: EvalResult


@dataclass(frozen=True)
class AblationReport:
    rows: tuple

    def get(self, scenario, variant) -> EvalResult:
        for r in self.rows:
            if r.scenario == scenario and r.variant == variant:
                return r.result
        raise KeyError((scenario, variant))

    @property
    def scenarios(self):
        return list(dict.fromkeys(r.scenario for r in self.rows))

    def mean(self, variant, metric="precision", occluded=None) -> float:
        vals = [getattr(r.result, metric) for r in self.rows
                if r.variant == variant and (occluded is None or r.occluded == occluded)]
        return float(np.mean(vals)) if vals else math.nan

    def summary(self):
        """``(label, variant, mean update rate, mean precision, mean auc)`` over all and occluded scenarios."""
        out = []
        for label, occ in (("ALL", None), ("OCCLUSION", True)):
            for v in VARIANTS:
                if not any(r.variant == v and (occ is None or r.occluded) for r in self.rows):
                    continue
                out.append((label, v, self.mean(v, "mean_update_rate", occ),
                            self.mean(v, "precision", occ), self.mean(v, "auc", occ)))
        return out

    def to_csv(self, timing=False) -> str:
        head = "scenario,variant,occluded," + ("update_rate," if timing else "") + "precision,auc,frames"
        lines = [head]
        for r in self.rows:
            rate = f"{r.result.mean_update_rate:.2f}," if timing else ""
            lines.append(f"{r.scenario},{r.variant},{int(r.occluded)},{rate}"
                         f"{r.result.precision:.6f},{r.result.auc:.6f},{r.result.frames_evaluated}")
        for label, v, rate, prec, auc in self.summary():
            rate_s = f"{rate:.2f}," if timing else ""
            lines.append(f"{label},{v},,{rate_s}{prec:.6f},{auc:.6f},")
        return "\n".join(lines) + "\n"

    def to_text(self, timing=False) -> str:
        cols = ["scenario", "variant"] + (["fps"] if timing else []) + ["precision", "auc"]
        body = []
        for r in self.rows:
            body.append([r.scenario, r.variant] + ([f"{r.result.mean_update_rate:.1f}"] if timing else [])
                        + [f"{r.result.precision:.3f}", f"{r.result.auc:.3f}"])
        for label, v, rate, prec, auc in self.summary():
            body.append([f"mean:{label}", v] + ([f"{rate:.1f}"] if timing else []) + [f"{prec:.3f}", f"{auc:.3f}"])
        widths = [max(len(c), *(len(row[i]) for row in body)) for i, c in enumerate(cols)]
        fmt = lambda row: "  ".join(s.ljust(w) if i < 2 else s.rjust(w)
                                     for i, (s, w) in enumerate(zip(row, widths)))
        return "\n".join([fmt(cols), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]) + "\n"

    def retention(self, variant="Full", reference="Dense-oracle") -> float:
        ref = self.mean(reference)
        return self.mean(variant) / ref if ref > 0 else math.nan


def oracle_params(cfg: TrackerConfig, spec_seed: int, dense=False) -> OracleDetectorParams:
    p = OracleDetectorParams.from_config(cfg.observer, cfg.oracle)
    p = replace(p, rng_seed=(cfg.oracle.seed, spec_seed))
    if dense:
        p = replace(p, period=1, latency=0, center_noise_sigma=0.0, size_noise_sigma=0.0, miss_rate=0.0, false_rate=0.0)
    return p


def _collect(detector, frame_count):
    out = []
    for i in range(frame_count + detector.params.latency):
        d = detector.poll(i)
        if d is not None:
            out.append(d)
    return out


def run_scenario(name, spec, cfg: TrackerConfig, variants=VARIANTS, count_hold=True):
    frames, gt = synthgen.generate(spec)
    size = (spec.width, spec.height)
    params = oracle_params(cfg, spec.seed)
    rows = []
    occluded = bool(spec.occlusions)
    for v in variants:
        if v in ("Follower-only", "Full"):
            vcfg = cfg.with_overrides(pipeline=dict(follower_enabled=True, recovery_enabled=(v == "Full")))
            records, timing = run_sequence(frames, OracleDetector(gt, params, size), vcfg)
            rate = timing.update_rate
        else:
            p = oracle_params(cfg, spec.seed, dense=(v == "Dense-oracle"))
            t0 = time.perf_counter()
            dets = _collect(OracleDetector(gt, p, size), spec.frame_count)
            fn = cv_predictor_baseline if v == "CV-predictor" else zoh_baseline
            records = fn(dets, spec.frame_count, p.latency)
            dt = time.perf_counter() - t0
            rate = spec.frame_count / dt if dt > 0 else 0.0
        rows.append(AblationRow(name, v, occluded, evaluate(records, gt, count_hold, rate)))
    return rows


def run_ablation(suite, cfg: TrackerConfig, variants=VARIANTS, count_hold=True) -> AblationReport:
    """Every variant on every scenario under the same oracle settings and seeds."""
    rows = []
    for name, spec in suite:
        rows.extend(run_scenario(name, spec, cfg, variants, count_hold))
    return AblationReport(tuple(rows))


# ---------------------------------------------------------------------------
# re-acquisition benchmark


def occlusion_spec(seed: int, start=45, length=20, frame_count=90, tint=0.3) -> synthgen.ScenarioSpec:
    """Randomized target path with one total occlusion and target-tinted clouds."""
    rng = np.random.default_rng([7919, seed])
    heading = rng.uniform(-0.6, 0.6) + (math.pi if rng.random() < 0.5 else 0.0)
    speed = rng.uniform(2.0, 3.5)
    vel = (speed * math.cos(heading), speed * math.sin(heading))
    x0 = 400.0 if vel[0] < 0 else 80.0
    return synthgen.ScenarioSpec(
        frame_count=frame_count, trajectory="sinusoidal", start=(x0, float(rng.uniform(120, 240))),
        velocity=vel, amplitude=float(rng.uniform(10, 40)), period=float(rng.uniform(50, 90)),
        scale_min=0.8, scale_max=1.3, scale_period=float(rng.uniform(60, 120)),
        cloud_count=10, cloud_tint=tint, occlusions=((start, start + length),), seed=seed)


def reacquisition_run(seed: int, cfg: TrackerConfig, window=5, min_iou=0.3):
    """Detections stop at the occlusion; returns ``(reacquired, frames after reappearance or None)``."""
    spec = occlusion_spec(seed)
    frames, gt = synthgen.generate(spec)
    start, end = spec.occlusions[0]
    params = oracle_params(cfg, spec.seed)
    dets = [d for d in _collect(OracleDetector(gt, params, (spec.width, spec.height)), spec.frame_count)
            if d.frame_index < start]
    records, _ = run_sequence(frames, ListDetections(dets, params.latency), cfg)
    for k in range(window + 1):
        t = end + k
        if t >= len(records) or gt.boxes[t] is None:
            continue
        r = records[t]
        if r.mode is TrackerMode.TRACKING and r.bbox is not None and iou(r.bbox, gt.boxes[t]) > min_iou:
            return True, k
    return False, None
