"""High-rate Follower: ROI-confined sparse flow, box re-fit, drift control, Kalman smoothing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import BBox, FollowerConfig, Frame, clip_to_frame
from . import imgproc

log = logging.getLogger(__name__)


class FlowLost(Exception):
    """Not enough consistent flow vectors to keep following the target."""


# ---------------------------------------------------------------------------
# Kalman filter on [u, v, du, dv, w, h]


@dataclass(frozen=True, eq=False)
class KalmanState:
    x: np.ndarray
    P: np.ndarray

    def bbox(self) -> BBox:
        return BBox(float(self.x[0]), float(self.x[1]), max(1.0, float(self.x[4])), max(1.0, float(self.x[5])))


_H = np.zeros((4, 6))
_H[0, 0] = _H[1, 1] = _H[2, 4] = _H[3, 5] = 1.0


def kalman_init(b: BBox, p0_pos=4.0, p0_vel=100.0, p0_size=4.0) -> KalmanState:
    """Filter anchored at ``b`` with zero velocity."""
    x = np.array([b.cx, b.cy, 0.0, 0.0, b.w, b.h])
    P = np.diag([p0_pos, p0_pos, p0_vel, p0_vel, p0_size, p0_size]).astype(np.float64)
    return KalmanState(x, P)


def kalman_predict(s: KalmanState, q_pos, q_vel, q_size, dt=1.0) -> KalmanState:
    F = np.eye(6)
    F[0, 2] = F[1, 3] = dt
    Q = np.diag([q_pos, q_pos, q_vel, q_vel, q_size, q_size])
    return KalmanState(F @ s.x, F @ s.P @ F.T + Q)


def kalman_update(s: KalmanState, z: BBox, r_pos, r_size) -> KalmanState:
    R = np.diag([r_pos, r_pos, r_size, r_size])
    innov = np.array([z.cx, z.cy, z.w, z.h]) - _H @ s.x
    S = _H @ s.P @ _H.T + R
    K = s.P @ _H.T @ np.linalg.inv(S)
    x = s.x + K @ innov
    A = np.eye(6) - K @ _H
    P = A @ s.P @ A.T + K @ R @ K.T
    P = (P + P.T) / 2.0
    x[4] = max(x[4], 1.0)
    x[5] = max(x[5], 1.0)
    return KalmanState(x, P)


def _predict(s: KalmanState, cfg: FollowerConfig) -> KalmanState:
    return kalman_predict(s, cfg.q_pos, cfg.q_vel, cfg.q_size)


def _update(s: KalmanState, z: BBox, cfg: FollowerConfig) -> KalmanState:
    return kalman_update(s, z, cfg.r_pos, cfg.r_size)


# ---------------------------------------------------------------------------
# appearance template


@dataclass(frozen=True, eq=False)
class TargetTemplate:
    patch: np.ndarray
    mean_ab: np.ndarray
    cov_ab: np.ndarray
    hs_hist: np.ndarray
    mean_saturation: float
    captured_at: int
    low_chroma: bool = False


COLOR_CORE_FRACTION = 0.6


def color_core(b: BBox) -> BBox:
    """Central part of the box used for color statistics (keeps background out)."""
    return BBox(b.cx, b.cy, max(2.0, b.w * COLOR_CORE_FRACTION), max(2.0, b.h * COLOR_CORE_FRACTION))


def color_stats(px: np.ndarray, bins=(16, 16)):
    """Lab a/b mean and covariance, H-S histogram and mean saturation of ``(n, 3)`` pixels."""
    px = np.asarray(px).reshape(-1, 3)
    ab = imgproc.rgb_to_lab_image(px)[:, 1:]
    mean_ab = ab.mean(axis=0)
    cov_ab = np.cov(ab, rowvar=False) if len(ab) > 1 else np.zeros((2, 2))
    cov_ab = (cov_ab + cov_ab.T) / 2.0
    hist, low = imgproc.hs_histogram_pixels(px, *bins)
    _, s, _ = imgproc.rgb_to_hsv_image(px)
    return mean_ab, cov_ab, hist, float(s.mean()), low


def capture_template(frame: Frame, b: BBox, bins=(16, 16)) -> TargetTemplate:
    c0, r0, c1, r1 = b.pixel_span(frame.width, frame.height)
    # pad tiny boxes out to 3x3
    if c1 - c0 < 3:
        c0 = max(0, min(c0, frame.width - 3))
        c1 = c0 + 3
    if r1 - r0 < 3:
        r0 = max(0, min(r0, frame.height - 3))
        r1 = r0 + 3
    patch = imgproc.to_gray(frame.crop(c0, r0, c1, r1))
    k0, q0, k1, q1 = color_core(b).pixel_span(frame.width, frame.height)
    core = frame.crop(k0, q0, max(k1, k0 + 1), max(q1, q0 + 1))
    mean_ab, cov_ab, hist, sat, low = color_stats(core, bins)
    return TargetTemplate(patch, mean_ab, cov_ab, hist, sat, frame.index, low)


# ---------------------------------------------------------------------------
# geometry helpers


def select_params(area: float, cfg: FollowerConfig):
    """Window size and corner quality for a target of the given area."""
    if area <= 0:
        raise ValueError("area must be positive")
    if area < cfg.tau_area:
        return cfg.win_small, cfg.q_low
    return cfg.win_large, cfg.q_high


def roi_of(b: BBox, expand: float, frame_w, frame_h) -> BBox:
    cx = min(max(b.cx, 0.0), float(frame_w))
    cy = min(max(b.cy, 0.0), float(frame_h))
    roi = clip_to_frame(BBox(cx, cy, b.w * expand, b.h * expand), frame_w, frame_h)
    if roi is None:  # only reachable for degenerate zero-width frames
        raise ValueError("roi is empty")
    return roi


MAD_FLOOR = 0.5


def median_flow_filter(displacements, k: float):
    """Inlier mask of displacements within ``k`` MADs of the component-wise median."""
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
    if len(d) == 0:
        raise ValueError("no displacements")
    med = np.median(d, axis=0)
    mad = np.maximum(np.median(np.abs(d - med), axis=0), MAD_FLOOR)
    mask = (np.abs(d - med) <= k * mad).all(axis=1)
    return mask, med


def refit_bbox(prev_bbox: BBox, prev_pts, new_pts, scale_clamp=(0.5, 2.0)) -> BBox:
    """Median translation plus median pairwise-distance ratio as the scale change."""
    p = np.asarray(prev_pts, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(new_pts, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        raise FlowLost("flow lost")
    shift = np.median(q - p, axis=0)
    scale = 1.0
    if len(p) >= 2:
        i, j = np.triu_indices(len(p), 1)
        d_old = np.linalg.norm(p[i] - p[j], axis=1)
        d_new = np.linalg.norm(q[i] - q[j], axis=1)
        ok = d_old > 1e-9
        if ok.any():
            scale = float(np.median(d_new[ok] / d_old[ok]))
            scale = min(max(scale, scale_clamp[0]), scale_clamp[1])
    return BBox(prev_bbox.cx + shift[0], prev_bbox.cy + shift[1], prev_bbox.w * scale, prev_bbox.h * scale)


# ---------------------------------------------------------------------------
# follower state and per-frame step


@dataclass(frozen=True, eq=False)
class FollowerState:
    bbox: BBox
    kalman: KalmanState
    features: np.ndarray
    stable_run: int
    frames_since_drift_check: int
    template: TargetTemplate
    smoothed: BBox
    last_disp: np.ndarray
    frame_index: int


def init_follower(frame: Frame, b: BBox, cfg: FollowerConfig, template: TargetTemplate | None = None,
                  bins=(16, 16), last_disp=None) -> FollowerState:
    """Start following ``b`` on ``frame`` (an anchor or a recovered box)."""
    if template is None:
        template = capture_template(frame, b, bins)
    return FollowerState(
        bbox=b,
        kalman=kalman_init(b, cfg.p0_pos, cfg.p0_vel, cfg.p0_size),
        features=np.empty((0, 2)),
        stable_run=0,
        frames_since_drift_check=0,
        template=template,
        smoothed=b,
        last_disp=np.zeros(2) if last_disp is None else np.asarray(last_disp, dtype=np.float64),
        frame_index=frame.index,
    )


def _crop_window(roi: BBox, shift, pad: int, w: int, h: int):
    x0 = math.floor(min(roi.x0, roi.x0 + shift[0]) - pad)
    y0 = math.floor(min(roi.y0, roi.y0 + shift[1]) - pad)
    x1 = math.ceil(max(roi.x1, roi.x1 + shift[0]) + pad)
    y1 = math.ceil(max(roi.y1, roi.y1 + shift[1]) + pad)
    return max(0, x0), max(0, y0), min(w, x1), min(h, y1)


def _clamp_center(b: BBox, w, h) -> BBox:
    return BBox(min(max(b.cx, 0.0), float(w)), min(max(b.cy, 0.0), float(h)), b.w, b.h)


def follower_step(state: FollowerState, prev: Frame, next: Frame, cfg: FollowerConfig):
    """Track from ``prev`` to ``next``; returns ``(state, smoothed_box)`` or raises FlowLost."""
    if prev.pixels.shape != next.pixels.shape:
        raise ValueError("frame size changed mid-sequence")
    W, H = next.width, next.height
    win, quality = select_params(state.bbox.area, cfg)
    roi = roi_of(state.bbox, cfg.roi_expand, W, H)
    pad = (win // 2 + 2) * 2 ** (cfg.pyramid_levels - 1)
    c0, r0, c1, r1 = _crop_window(roi, state.last_disp, pad, W, H)
    g_prev = imgproc.to_gray(prev.crop(c0, r0, c1, r1))
    g_next = imgproc.to_gray(next.crop(c0, r0, c1, r1))
    offset = np.array([c0, r0], dtype=np.float64)

    feats = state.features
    if len(feats) < cfg.min_inliers:
        local_roi = roi.translated(-c0, -r0)
        feats = imgproc.shi_tomasi(g_prev, local_roi, cfg.max_features, quality, cfg.feature_min_dist) + offset
    if len(feats) < cfg.min_inliers:
        raise FlowLost("flow lost: no trackable features")

    pyr_prev = imgproc.build_pyramid(g_prev, cfg.pyramid_levels)
    pyr_next = imgproc.build_pyramid(g_next, cfg.pyramid_levels)
    new, status, resid = imgproc.lk_flow(pyr_prev, pyr_next, feats - offset, win,
                                         cfg.lk_max_iter, cfg.lk_eps, guess=state.last_disp)
    keep = status & (resid <= cfg.max_residual)
    if keep.sum() < cfg.min_inliers:
        raise FlowLost("flow lost: too few tracked points")
    old_pts = feats[keep]
    new_pts = new[keep] + offset
    mask, _ = median_flow_filter(new_pts - old_pts, cfg.median_reject_k)
    if mask.sum() < cfg.min_inliers:
        raise FlowLost("flow lost: too few inliers")
    old_pts, new_pts = old_pts[mask], new_pts[mask]
    raw = refit_bbox(state.bbox, old_pts, new_pts, (cfg.scale_min_step, cfg.scale_max_step))
    raw = _clamp_center(raw, W, H)

    kal = _update(_predict(state.kalman, cfg), raw, cfg)
    smoothed = _clamp_center(kal.bbox(), W, H)
    kal = KalmanState(np.r_[smoothed.cx, smoothed.cy, kal.x[2:]], kal.P)

    prev_s = state.smoothed
    stable = (abs(smoothed.w - prev_s.w) / prev_s.w < cfg.eps_stable
              and abs(smoothed.h - prev_s.h) / prev_s.h < cfg.eps_stable)
    new_roi = roi_of(raw, cfg.roi_expand, W, H)
    inside = ((new_pts[:, 0] >= new_roi.x0) & (new_pts[:, 0] <= new_roi.x1)
              & (new_pts[:, 1] >= new_roi.y0) & (new_pts[:, 1] <= new_roi.y1))
    new_state = replace(
        state,
        bbox=raw,
        kalman=kal,
        features=new_pts[inside],
        stable_run=state.stable_run + 1 if stable else 0,
        frames_since_drift_check=state.frames_since_drift_check + 1,
        smoothed=smoothed,
        last_disp=np.median(new_pts - old_pts, axis=0),
        frame_index=next.index,
    )
    return new_state, smoothed


def drift_correct(state: FollowerState, frame: Frame, cfg: FollowerConfig) -> FollowerState:
    """Pull the box halfway toward the best template match inside the ROI."""
    W, H = frame.width, frame.height
    roi = roi_of(state.bbox, cfg.roi_expand, W, H)
    c0, r0, c1, r1 = roi.pixel_span(W, H)
    search = imgproc.to_gray(frame.crop(c0, r0, c1, r1))
    pw = max(3, int(round(state.bbox.w)))
    ph = max(3, int(round(state.bbox.h)))
    reset = replace(state, frames_since_drift_check=0)
    if pw > search.shape[1] or ph > search.shape[0]:
        return reset
    patch = imgproc.resample(state.template.patch, pw, ph)
    try:
        (pc, pr), score = imgproc.ncc_match(patch, search)
    except ValueError:
        log.warning("drift correction skipped: degenerate template")
        return reset
    if score <= cfg.drift_accept:
        return reset
    peak = np.array([c0 + pc + pw / 2.0, r0 + pr + ph / 2.0])
    cur = state.bbox.center
    moved = cur + cfg.drift_blend * (peak - cur)
    shift = moved - cur
    corrected = state.bbox.translated(*shift)
    kal = _update(state.kalman, corrected, cfg)
    smoothed = _clamp_center(kal.bbox(), W, H)
    # features are re-seeded around the corrected box on the next step
    return replace(reset, bbox=corrected, kalman=kal, smoothed=smoothed, features=np.empty((0, 2)))


def maybe_update_template(state: FollowerState, frame: Frame, cfg: FollowerConfig) -> FollowerState:
    """Refresh appearance only after ``stable_k`` consecutive geometrically stable frames."""
    if state.stable_run < cfg.stable_k:
        return state
    tmpl = capture_template(frame, state.smoothed, state.template.hs_hist.shape)
    return replace(state, template=tmpl, stable_run=0)
