"""Dual-space re-localization: fused Lab/HSV likelihood, OTSU mask, five-constraint candidate gate."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import BBox, Frame, RecoveryConfig
from .follower import TargetTemplate
from . import imgproc


@dataclass(frozen=True)
class RecoveryContext:
    template: TargetTemplate
    last_bbox: BBox
    last_seen: int
    attempts: int = 0


@dataclass(frozen=True)
class CandidateScore:
    blob: imgproc.Blob
    s_color: float
    s_hsv: float
    s_size: float
    s_pos: float
    s_shape: float

    @property
    def composite(self) -> float:
        return (self.s_color + self.s_hsv + self.s_size + self.s_pos + self.s_shape) / 5.0


def adaptive_alpha(mean_saturation: float, cfg: RecoveryConfig) -> float:
    """Weight of the HSV map: saturated targets lean on hue, washed-out ones on Lab."""
    alpha = cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * mean_saturation
    return min(max(alpha, cfg.alpha_min), cfg.alpha_max)


def fuse_maps(m_hsv: np.ndarray, m_lab: np.ndarray, alpha: float) -> np.ndarray:
    if m_hsv.shape != m_lab.shape:
        raise ValueError(f"map shapes differ: {m_hsv.shape} vs {m_lab.shape}")
    return alpha * m_hsv + (1.0 - alpha) * m_lab


def size_score(area, last_area) -> float:
    return math.exp(-abs(math.log(area / last_area)))


def score_candidate(b: imgproc.Blob, ctx: RecoveryContext, frame, cfg: RecoveryConfig) -> CandidateScore:
    """Score one blob; ``frame`` and ``ctx.last_bbox`` must share the blob's pixel grid."""
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    tmpl = ctx.template
    blob_px = px[b.rows, b.cols]

    ab = imgproc.rgb_to_lab_image(blob_px)[:, 1:].mean(axis=0) - tmpl.mean_ab
    inv = np.linalg.inv(tmpl.cov_ab + cfg.lab_reg_lambda * np.eye(2))
    s_color = math.exp(-0.5 * float(ab @ inv @ ab))

    hist, _ = imgproc.hs_histogram_pixels(blob_px, *tmpl.hs_hist.shape)
    s_hsv = float(np.minimum(hist, tmpl.hs_hist).sum())

    s_size = size_score(b.bbox.area, ctx.last_bbox.area)

    sigma = cfg.pos_sigma_frac * math.hypot(px.shape[1], px.shape[0])
    dist2 = (b.centroid[0] - ctx.last_bbox.cx) ** 2 + (b.centroid[1] - ctx.last_bbox.cy) ** 2
    s_pos = math.exp(-dist2 / (2.0 * sigma * sigma))

    return CandidateScore(b, min(1.0, s_color), min(1.0, s_hsv), s_size, s_pos, b.solidity)


def likelihood_map(px: np.ndarray, tmpl: TargetTemplate, cfg: RecoveryConfig) -> np.ndarray:
    m_lab = imgproc.mahalanobis_map(px, tmpl.mean_ab, tmpl.cov_ab, cfg.lab_reg_lambda)
    m_hsv = imgproc.back_project(px, tmpl.hs_hist)
    return fuse_maps(m_hsv, m_lab, adaptive_alpha(tmpl.mean_saturation, cfg))


def _to_small(b: BBox, ds, off) -> BBox:
    return BBox((b.cx - off) / ds, (b.cy - off) / ds, b.w / ds, b.h / ds)


def find_candidates(frame: Frame, ctx: RecoveryContext, cfg: RecoveryConfig):
    """Scored candidates in downscaled coordinates, best first, plus the scale factor."""
    ds = cfg.recovery_downscale
    small = imgproc.decimate(frame.pixels, ds)
    fused = likelihood_map(small, ctx.template, cfg)
    threshold, degenerate = imgproc.otsu_threshold(fused)
    if degenerate:
        return [], ds
    off = imgproc.decimate_offset(ds)
    last_small = _to_small(ctx.last_bbox, ds, off)
    min_area = max(cfg.min_area_floor, cfg.min_area_frac * last_small.area)
    blobs = imgproc.extract_blobs(fused, threshold, min_area)
    local = replace(ctx, last_bbox=last_small)
    scored = [score_candidate(b, local, small, cfg) for b in blobs]
    scored.sort(key=lambda c: -c.composite)
    return scored, ds


def attempt_recovery(frame: Frame, ctx: RecoveryContext, cfg: RecoveryConfig):
    """Returns ``(bbox or None, updated context)``."""
    scored, ds = find_candidates(frame, ctx, cfg)
    if scored and scored[0].composite > cfg.accept_threshold:
        b = scored[0].blob.bbox
        off = imgproc.decimate_offset(ds)
        return BBox(b.cx * ds + off, b.cy * ds + off, b.w * ds, b.h * ds), ctx
    return None, replace(ctx, attempts=ctx.attempts + 1)
