"""Shared fixtures-by-hand: analytic textures and exhaustive reference implementations."""
from fractions import Fraction

import numpy as np


def sinusoid_texture(seed, width=96, height=96, shift=(0.0, 0.0), amp=0.08, n=6):
    """Smooth random texture evaluated analytically, so shifting it is exact.

    ``shift=(dx, dy)`` moves content by ``+d``: ``out(x) = base(x - d)``.
    """
    rng = np.random.default_rng(seed)
    xs = np.arange(width) + 0.5 - shift[0]
    ys = np.arange(height) + 0.5 - shift[1]
    X, Y = np.meshgrid(xs, ys)
    img = np.full((height, width), 0.5)
    for _ in range(n):
        period = rng.uniform(8, 24)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / period
        img += amp * np.sin(k * (np.cos(theta) * X + np.sin(theta) * Y) + phase)
    return np.clip(img, 0, 1)


def brute_otsu(m):
    """Exhaustive between-class variance over all 256 cut levels with exact rationals.

    Values are quantized over ``[min, max]`` into 256 levels; cut ``k`` splits
    levels ``< k`` from ``>= k``. The lowest maximizing cut wins, and the
    returned threshold is the smallest map value on the upper side.
    """
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    q = np.clip(np.floor((m - lo) / (hi - lo) * 256).astype(int), 0, 255).ravel()
    n = q.size
    best, best_k = Fraction(-1), None
    for k in range(1, 256):
        below = q[q < k]
        above = q[q >= k]
        if len(below) == 0 or len(above) == 0:
            continue
        w0 = Fraction(len(below), n)
        w1 = Fraction(len(above), n)
        mu0 = Fraction(int(below.sum()), len(below))
        mu1 = Fraction(int(above.sum()), len(above))
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best:
            best, best_k = var, k
    return float(m.ravel()[q >= best_k].min())


def plus_mask(size=15, thick=5):
    m = np.zeros((size, size))
    a = (size - thick) // 2
    m[a:a + thick, :] = 1
    m[:, a:a + thick] = 1
    return m
