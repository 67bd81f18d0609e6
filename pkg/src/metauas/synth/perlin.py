"""Fractal Perlin noise and binary blob masks for local texture changes.

Noise is generated on a power-of-two canvas that is at least as large as the
requested dims and cropped, so every lattice period divides the canvas and no
resampling is needed. Masks are thresholded min-max-normalized noise.
"""

from __future__ import annotations

import numpy as np

from ..config import SynthConfig
from ..errors import ConfigError


def _fade(t: np.ndarray) -> np.ndarray:
    # quintic smoothstep 6t^5 - 15t^4 + 10t^3
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _perlin_grid(canvas: int, period_y: int, period_x: int, rng: np.random.Generator) -> np.ndarray:
    """Single-octave Perlin noise on a (canvas, canvas) grid, values in ~[-1, 1]."""
    dy, dx = canvas // period_y, canvas // period_x
    angles = rng.uniform(0.0, 2.0 * np.pi, (period_y + 1, period_x + 1))
    gradients = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    def tile(grad_slice):
        g = gradients[grad_slice[0], grad_slice[1]]
        return np.repeat(np.repeat(g, dy, axis=0), dx, axis=1)

    ys = np.arange(canvas) % dy / dy
    xs = np.arange(canvas) % dx / dx
    local = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1)   # offsets in cell units

    def dot(grad, shift_y, shift_x):
        off = local - np.array([shift_y, shift_x])
        return (off * grad).sum(axis=-1)

    n00 = dot(tile((slice(0, -1), slice(0, -1))), 0.0, 0.0)
    n10 = dot(tile((slice(1, None), slice(0, -1))), 1.0, 0.0)
    n01 = dot(tile((slice(0, -1), slice(1, None))), 0.0, 1.0)
    n11 = dot(tile((slice(1, None), slice(1, None))), 1.0, 1.0)

    w = _fade(local)
    wy, wx = w[..., 0], w[..., 1]
    top = n00 * (1 - wx) + n01 * wx
    bottom = n10 * (1 - wx) + n11 * wx
    return np.sqrt(2.0) * (top * (1 - wy) + bottom * wy)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def fractal_perlin(height: int, width: int, period_y: int, period_x: int,
                   octaves: int, rng: np.random.Generator) -> np.ndarray:
    """Multi-octave Perlin field of shape (height, width), persistence 0.5.

    Octave o doubles both periods (capped at the canvas size) and halves the
    amplitude.
    """
    canvas = _next_pow2(max(height, width))
    field = np.zeros((canvas, canvas), dtype=np.float64)
    amplitude = 1.0
    for o in range(octaves):
        py = min(period_y << o, canvas)
        px = min(period_x << o, canvas)
        field += amplitude * _perlin_grid(canvas, py, px, rng)
        amplitude *= 0.5
    return field[:height, :width]


def perlin_mask(height: int, width: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Binary blob mask: normalized fractal noise thresholded at cfg.perlin_threshold.

    Per-axis base periods are drawn uniformly from cfg.perlin_periods.
    Deterministic given (rng state, cfg, dims). Returns a bool (height, width)
    array; strictly-greater thresholding, so a threshold above 1 yields an
    all-zero mask.
    """
    if height < 8 or width < 8:
        raise ConfigError(f"mask dims must be >= 8, got {height}x{width}")
    if max(cfg.perlin_periods) > min(height, width):
        raise ConfigError(
            f"dims {height}x{width} are smaller than the largest perlin period "
            f"{max(cfg.perlin_periods)}")
    period_y = int(rng.choice(cfg.perlin_periods))
    period_x = int(rng.choice(cfg.perlin_periods))
    field = fractal_perlin(height, width, period_y, period_x, cfg.perlin_octaves, rng)
    lo, hi = field.min(), field.max()
    if hi > lo:
        field = (field - lo) / (hi - lo)
    else:
        field = np.zeros_like(field)
    return field > cfg.perlin_threshold
