"""Deterministic binary rasterization of scenes.

Shape membership is decided per pixel center on the fixed 32-pixel base
grid, with no anti-aliasing. Higher resolutions replicate base-grid pixels
(2x2 blocks at 64 px), so block-downsampling a 64 px render reproduces the
32 px render exactly.
"""

import numpy as np

from .scenes import BACKGROUNDS, BASE_RESOLUTION, COLORS, Scene

SUPPORTED_RESOLUTIONS = (32, 64)


class RenderError(Exception):
    pass


def _shape_mask(shape: str, cx: float, cy: float, h: float, px, py):
    dx = px - cx
    dy = py - cy
    if shape == "circle":
        return dx * dx + dy * dy <= h * h
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= h
    if shape == "triangle":
        # upward triangle inscribed in the bbox
        inside_y = (dy >= -h) & (dy <= h)
        half_width = (dy + h) / 2.0
        return inside_y & (np.abs(dx) <= half_width)
    if shape == "cross":
        bar = 0.4 * h
        horiz = (np.abs(dy) <= bar) & (np.abs(dx) <= h)
        vert = (np.abs(dx) <= bar) & (np.abs(dy) <= h)
        return horiz | vert
    if shape == "star":
        # spiky radial profile with five points
        rho = np.sqrt(dx * dx + dy * dy)
        theta = np.arctan2(dy, dx)
        wave = (np.cos(5.0 * (theta - np.pi / 2.0)) + 1.0) / 2.0
        radius = h * (0.35 + 0.65 * wave**1.5)
        return rho <= radius
    raise RenderError(f"unknown shape {shape!r}")


def render_u8(scene: Scene, resolution: int = BASE_RESOLUTION) -> np.ndarray:
    """Render to an HxWx3 u8 image."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise RenderError(
            f"unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS}"
        )
    base = BASE_RESOLUTION
    img = np.empty((base, base, 3), dtype=np.uint8)
    img[:] = np.array(BACKGROUNDS[scene.background], dtype=np.uint8)
    coords = np.arange(base, dtype=np.float64) + 0.5
    px, py = np.meshgrid(coords, coords, indexing="xy")
    for obj in scene.objects:
        mask = _shape_mask(obj.shape, obj.x + 0.5, obj.y + 0.5, obj.half, px, py)
        img[mask] = np.array(COLORS[obj.color], dtype=np.uint8)
    if resolution != base:
        factor = resolution // base
        img = np.kron(img, np.ones((factor, factor, 1), dtype=np.uint8))
    return img


def render(scene: Scene, resolution: int = BASE_RESOLUTION) -> np.ndarray:
    """Render to an HxWx3 float32 image with values in [0, 1]."""
    return render_u8(scene, resolution).astype(np.float32) / 255.0
