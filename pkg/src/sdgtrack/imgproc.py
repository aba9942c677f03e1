"""Image primitives written directly on numpy arrays.

Gray images and scalar maps are 2-D float64 arrays with values in [0, 1].
Point coordinates follow the continuous convention of :mod:`sdgtrack.core`
(pixel ``(row, col)`` is centered at ``(col + 0.5, row + 0.5)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .core import BBox, Frame

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

# sRGB primaries to XYZ, D65 reference white
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)

HUE_MIN_VALUE = 0.05
HUE_MIN_SATURATION = 0.03


def _pixels(f) -> np.ndarray:
    return f.pixels if isinstance(f, Frame) else np.asarray(f)


def to_gray(f) -> np.ndarray:
    px = _pixels(f)
    return (px @ GRAY_WEIGHTS) / 255.0


def rgb_to_hsv_image(px):
    """Hexcone HSV for an ``... x 3`` uint8 array: hue in degrees, s and v in [0, 1]."""
    rgb = np.asarray(px, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, 60.0 * h, 0.0)
    h = np.where(h >= 360.0, h - 360.0, h)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def rgb_to_hsv(r, g, b):
    h, s, v = rgb_to_hsv_image(np.array([r, g, b], dtype=np.float64))
    return float(h), float(s), float(v)


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t):
    delta = 6.0 / 29.0
    return np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta * delta) + 4.0 / 29.0)


def rgb_to_lab_image(px) -> np.ndarray:
    """CIELAB (D65) for an ``... x 3`` 8-bit RGB array."""
    lin = _srgb_to_linear(np.asarray(px, dtype=np.float64) / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T
    fx, fy, fz = (_lab_f(xyz[..., i] / _WHITE_D65[i]) for i in range(3))
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def rgb_to_lab(r, g, b):
    lab = rgb_to_lab_image(np.array([r, g, b], dtype=np.float64))
    return float(lab[0]), float(lab[1]), float(lab[2])


# ---------------------------------------------------------------------------
# pyramids, sampling


MIN_LEVEL_SIZE = 8


def downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2, img.shape[1] // 2
    a = img[: 2 * h, : 2 * w]
    return (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]) / 4.0


def build_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level 0 is ``img``; each further level is a 2x2 box average, kept while >= 8x8."""
    pyr = [np.asarray(img, dtype=np.float64)]
    while len(pyr) < levels:
        h, w = pyr[-1].shape
        if h // 2 < MIN_LEVEL_SIZE or w // 2 < MIN_LEVEL_SIZE:
            break
        pyr.append(downsample2(pyr[-1]))
    return pyr


def decimate(px: np.ndarray, factor: int) -> np.ndarray:
    """Keep the center pixel of every ``factor x factor`` block.

    Point sampling keeps genuine pixel colors (averaging would mix target and
    background chroma). A full-resolution coordinate ``x`` maps to
    ``(x - decimate_offset(factor)) / factor``.
    """
    if factor == 1:
        return px
    h, w = px.shape[0] // factor, px.shape[1] // factor
    o = factor // 2
    return px[o: o + h * factor: factor, o: o + w * factor: factor]


def decimate_offset(factor: int) -> float:
    return factor // 2 + 0.5 - factor / 2.0


def sample_bilinear(img: np.ndarray, x, y) -> np.ndarray:
    """Sample at continuous coordinates with edge replication."""
    h, w = img.shape
    ax = np.clip(np.asarray(x, dtype=np.float64) - 0.5, 0.0, w - 1.0)
    ay = np.clip(np.asarray(y, dtype=np.float64) - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(ax).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ay).astype(np.intp), max(h - 2, 0))
    fx = ax - x0
    fy = ay - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resample(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to ``height x width``."""
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    xs = (np.arange(width) + 0.5) * (w / width)
    ys = (np.arange(height) + 0.5) * (h / height)
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(img, gx, gy)


# ---------------------------------------------------------------------------
# corners and flow


def sobel(img: np.ndarray):
    """3x3 Sobel derivatives scaled to intensity per pixel, edge-replicated."""
    p = np.pad(img, 1, mode="edge")
    gx = ((p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])) / 8.0
    gy = ((p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])) / 8.0
    return gx, gy


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="constant")
    return sum(p[r:r + a.shape[0], c:c + a.shape[1]] for r in range(3) for c in range(3))


def min_eigen_map(img: np.ndarray) -> np.ndarray:
    """Smaller eigenvalue of the 3x3-window structure tensor at every pixel."""
    gx, gy = sobel(img)
    a = _box3(gx * gx)
    b = _box3(gx * gy)
    c = _box3(gy * gy)
    return (a + c) / 2.0 - np.sqrt(((a - c) / 2.0) ** 2 + b * b)


def shi_tomasi(img: np.ndarray, roi: BBox, max_n: int, quality: float, min_dist: float) -> np.ndarray:
    """Strongest min-eigenvalue corners inside ``roi`` as an ``(n, 2)`` array of (x, y)."""
    h, w = img.shape
    c0, r0, c1, r1 = roi.pixel_span(w, h)
    if c1 <= c0 or r1 <= r0:
        return np.empty((0, 2))
    # 2 px of context so gradients and the tensor window see real neighbors
    m = 2
    e0, f0, e1, f1 = max(0, c0 - m), max(0, r0 - m), min(w, c1 + m), min(h, r1 + m)
    eig = min_eigen_map(img[f0:f1, e0:e1])[r0 - f0:r1 - f0, c0 - e0:c1 - e0]
    top = eig.max() if eig.size else 0.0
    if top <= 1e-12:
        return np.empty((0, 2))
    padded = np.pad(eig, 1, mode="constant", constant_values=-np.inf)
    neigh = np.max([padded[dr:dr + eig.shape[0], dc:dc + eig.shape[1]]
                    for dr in range(3) for dc in range(3) if (dr, dc) != (1, 1)], axis=0)
    cand = (eig >= quality * top) & (eig >= neigh)
    rows, cols = np.nonzero(cand)
    order = np.argsort(-eig[rows, cols], kind="stable")
    kept: list[tuple[float, float]] = []
    d2 = min_dist * min_dist
    for i in order:
        x, y = cols[i] + c0 + 0.5, rows[i] + r0 + 0.5
        if all((x - kx) ** 2 + (y - ky) ** 2 >= d2 for kx, ky in kept):
            kept.append((x, y))
            if len(kept) >= max_n:
                break
    return np.array(kept, dtype=np.float64).reshape(-1, 2)


def _inside(img, pts, margin):
    h, w = img.shape
    return ((pts[:, 0] - margin >= 0) & (pts[:, 0] + margin <= w)
            & (pts[:, 1] - margin >= 0) & (pts[:, 1] + margin <= h))


def lk_flow(prev: list[np.ndarray], next: list[np.ndarray], points, win: int,
            max_iter: int = 20, eps: float = 0.01, guess=None):
    """Coarse-to-fine iterative Lucas-Kanade for a set of points.

    ``guess`` is an optional initial displacement (shared ``(2,)`` or per point).
    Returns ``(new_points, status, residual)``.
    """
    if win % 2 != 1:
        raise ValueError("window size must be odd")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.empty((0, 2)), np.zeros(0, dtype=bool), np.zeros(0)
    nlev = min(len(prev), len(next))
    for a, b in zip(prev[:nlev], next[:nlev]):
        if a.shape != b.shape:
            raise ValueError("pyramids must share geometry")

    half = win // 2
    r = np.arange(-half, half + 1, dtype=np.float64)
    ox, oy = np.meshgrid(r, r)
    rg = np.arange(-half - 1, half + 2, dtype=np.float64)
    gx_off, gy_off = np.meshgrid(rg, rg)
    min_eig_floor = 1e-4 * win * win

    g = np.zeros((n, 2))
    if guess is not None:
        g = np.broadcast_to(np.asarray(guess, dtype=np.float64), (n, 2)) / 2.0 ** (nlev - 1)
    status = np.ones(n, dtype=bool)
    final = pts.copy()
    T = Ix = Iy = None

    for lev in range(nlev - 1, -1, -1):
        I, J = prev[lev], next[lev]
        p = pts / 2.0 ** lev
        patch = sample_bilinear(I, p[:, 0, None, None] + gx_off, p[:, 1, None, None] + gy_off)
        T = patch[:, 1:-1, 1:-1]
        Ix = (patch[:, 1:-1, 2:] - patch[:, 1:-1, :-2]) / 2.0
        Iy = (patch[:, 2:, 1:-1] - patch[:, :-2, 1:-1]) / 2.0
        gxx = (Ix * Ix).sum(axis=(1, 2))
        gxy = (Ix * Iy).sum(axis=(1, 2))
        gyy = (Iy * Iy).sum(axis=(1, 2))
        min_eig = (gxx + gyy) / 2.0 - np.sqrt(((gxx - gyy) / 2.0) ** 2 + gxy * gxy)
        ok = min_eig >= min_eig_floor
        if lev == 0:
            status &= ok & _inside(I, p, half + 1)
        det = np.where(ok, gxx * gyy - gxy * gxy, 1.0)

        d = np.zeros((n, 2))
        active = ok & status
        for _ in range(max_iter):
            if not active.any():
                break
            q = p + g + d
            Jw = sample_bilinear(J, q[:, 0, None, None] + ox, q[:, 1, None, None] + oy)
            diff = T - Jw
            bx = (diff * Ix).sum(axis=(1, 2))
            by = (diff * Iy).sum(axis=(1, 2))
            step = np.stack([(gyy * bx - gxy * by) / det, (gxx * by - gxy * bx) / det], axis=1)
            step[~active] = 0.0
            d += step
            active &= np.abs(step).max(axis=1) >= eps
        diverged = ~np.isfinite(d).all(axis=1) | (np.abs(d).max(axis=1) > win)
        d[diverged] = 0.0
        if lev == 0:
            status &= ~diverged
            final = p + g + d
        else:
            g = 2.0 * (g + d)

    status &= _inside(next[0], final, half)
    Jw = sample_bilinear(next[0], final[:, 0, None, None] + ox, final[:, 1, None, None] + oy)
    residual = np.abs(T - Jw).mean(axis=(1, 2))
    return final, status, residual


# ---------------------------------------------------------------------------
# matching, color models


def ncc_match(template: np.ndarray, search: np.ndarray):
    """Zero-normalized cross-correlation; returns ``((col, row), score)`` of the best placement."""
    th, tw = template.shape
    sh, sw = search.shape
    if th > sh or tw > sw:
        raise ValueError("template must fit inside the search image")
    t = template - template.mean()
    tnorm = math.sqrt(float((t * t).sum()))
    if tnorm < 1e-9:
        raise ValueError("degenerate template")
    win = sliding_window_view(search, (th, tw))
    npx = th * tw
    wsum = win.sum(axis=(2, 3))
    wsq = (win * win).sum(axis=(2, 3))
    var = np.maximum(wsq - wsum * wsum / npx, 0.0)
    num = np.einsum("ijkl,kl->ij", win, t)
    den = tnorm * np.sqrt(var)
    score = np.where(den > 1e-9 * max(tnorm, 1.0), num / np.where(den > 0, den, 1.0), 0.0)
    score = np.clip(score, -1.0, 1.0)
    row, col = np.unravel_index(int(np.argmax(score)), score.shape)
    return (int(col), int(row)), float(score[row, col])


def hs_bins(px, bins_h: int, bins_s: int):
    """Hue/saturation bin indices and the mask of pixels whose hue is meaningful."""
    h, s, v = rgb_to_hsv_image(px)
    hb = np.minimum((h / 360.0 * bins_h).astype(np.intp), bins_h - 1)
    sb = np.minimum((s * bins_s).astype(np.intp), bins_s - 1)
    valid = (v >= HUE_MIN_VALUE) & (s >= HUE_MIN_SATURATION)
    return hb, sb, valid


def hs_histogram_pixels(px, bins_h: int, bins_s: int):
    """Normalized H-S histogram of an ``(n, 3)`` pixel list plus a low-chroma flag."""
    px = np.asarray(px).reshape(-1, 3)
    hb, sb, valid = hs_bins(px, bins_h, bins_s)
    hist = np.zeros((bins_h, bins_s))
    if not valid.any():
        hist[:] = 1.0 / hist.size
        return hist, True
    np.add.at(hist, (hb[valid], sb[valid]), 1.0)
    return hist / hist.sum(), False


def hs_histogram(f, roi: BBox, bins_h: int, bins_s: int):
    px = _pixels(f)
    c0, r0, c1, r1 = roi.pixel_span(px.shape[1], px.shape[0])
    if c1 <= c0 or r1 <= r0:
        raise ValueError("empty roi")
    return hs_histogram_pixels(px[r0:r1, c0:c1], bins_h, bins_s)


def back_project(f, hist: np.ndarray) -> np.ndarray:
    """Look up each pixel's H-S bin in ``hist``; rescaled so the maximum is 1.

    Low-chroma pixels have no usable hue and score 0.
    """
    bins_h, bins_s = hist.shape
    hb, sb, valid = hs_bins(_pixels(f), bins_h, bins_s)
    out = np.where(valid, hist[hb, sb], 0.0)
    top = out.max() if out.size else 0.0
    return out / top if top > 0 else out


def mahalanobis_map(f, mean_ab, cov_ab, lam: float) -> np.ndarray:
    """exp(-d^2 / 2) of the regularized Mahalanobis distance over Lab a/b."""
    ab = rgb_to_lab_image(_pixels(f))[..., 1:] - np.asarray(mean_ab, dtype=np.float64)
    inv = np.linalg.inv(np.asarray(cov_ab, dtype=np.float64) + lam * np.eye(2))
    d2 = np.einsum("...i,ij,...j->...", ab, inv, ab)
    return np.exp(-0.5 * np.maximum(d2, 0.0))


# ---------------------------------------------------------------------------
# segmentation


OTSU_BINS = 256


def quantize_map(m: np.ndarray):
    """Map values onto 256 levels spanning ``[min, max]``; returns ``(levels, lo, hi)``."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.intp), lo, hi
    q = np.floor((m - lo) / (hi - lo) * OTSU_BINS).astype(np.intp)
    return np.clip(q, 0, OTSU_BINS - 1), lo, hi


def otsu_level(q: np.ndarray) -> int:
    """Level ``k`` maximizing between-class variance of ``{q < k}`` vs ``{q >= k}``.

    Compared in exact integer arithmetic so ties resolve to the lowest ``k``.
    """
    counts = np.bincount(q.ravel(), minlength=OTSU_BINS).tolist()
    n = sum(counts)
    total = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for k in range(OTSU_BINS):
        if 0 < n0 < n:
            num = (s0 * n - n0 * total) ** 2
            den = n0 * (n - n0)
            if num * best_den > best_num * den:
                best_k, best_num, best_den = k, num, den
        n0 += counts[k]
        s0 += k * counts[k]
    return best_k


def otsu_threshold(m: np.ndarray):
    """Returns ``(threshold, degenerate)``; foreground is ``m >= threshold``."""
    q, lo, hi = quantize_map(m)
    if hi <= lo:
        return lo, True
    k = otsu_level(q)
    return float(m[q >= k].min()), False


@dataclass(frozen=True, eq=False)
class Blob:
    area: int
    centroid: tuple[float, float]
    bbox: BBox
    solidity: float
    rows: np.ndarray
    cols: np.ndarray


def _hull_area(points: np.ndarray) -> float:
    pts = sorted(set(map(tuple, points.tolist())))
    if len(pts) < 3:
        return 0.0

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    area = 0.0
    for i in range(len(hull)):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % len(hull)]
        area += x0 * y1 - x1 * y0
    return abs(area) / 2.0


def pixel_hull_area(rows: np.ndarray, cols: np.ndarray) -> float:
    """Convex hull area of the union of pixel squares (only row extremes matter)."""
    ur, inv = np.unique(rows, return_inverse=True)
    cmin = np.full(len(ur), np.iinfo(np.intp).max)
    cmax = np.full(len(ur), np.iinfo(np.intp).min)
    np.minimum.at(cmin, inv, cols)
    np.maximum.at(cmax, inv, cols)
    corners = np.concatenate([
        np.stack([cmin, ur], 1), np.stack([cmin, ur + 1], 1),
        np.stack([cmax + 1, ur], 1), np.stack([cmax + 1, ur + 1], 1),
    ])
    return _hull_area(corners)


_EIGHT = np.ones((3, 3), dtype=bool)


def extract_blobs(m: np.ndarray, threshold: float, min_area: float) -> list[Blob]:
    """8-connected components of ``m >= threshold``, largest first."""
    labels, count = ndimage.label(m >= threshold, structure=_EIGHT)
    blobs = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        rr, cc = np.nonzero(labels[sl] == lab)
        area = len(rr)
        if area < min_area or area == 0:
            continue
        rows = rr + sl[0].start
        cols = cc + sl[1].start
        bbox = BBox.from_corners(cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
        hull = pixel_hull_area(rows, cols)
        solidity = min(1.0, area / hull) if hull > 0 else 1.0
        blobs.append(Blob(area, (cols.mean() + 0.5, rows.mean() + 0.5), bbox, solidity, rows, cols))
    blobs.sort(key=lambda b: -b.area)
    return blobs
