"""Attention heatmaps blended over the input image."""
from __future__ import annotations

import numpy as np
from PIL import Image

OPACITY = 0.6


def heatmap(image: np.ndarray, extent, alpha: np.ndarray) -> np.ndarray:
    """RGB uint8 overlay of ``alpha`` (nearest-neighbour upsampled) on the ink image."""
    h, w = image.shape
    fy, fx = h // alpha.shape[0], w // alpha.shape[1]
    up = np.kron(alpha, np.ones((fy, fx)))[:h, :w]
    peak = up.max()
    if peak > 0:
        up = up / peak
    eh, ew = extent
    blank = 1.0 - image[:eh, :ew]
    a = OPACITY * up[:eh, :ew]
    rgb = np.stack([blank * (1 - a) + a, blank * (1 - a), blank * (1 - a)], axis=-1)
    return (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)


def save_heatmap(path, image, extent, alpha):
    Image.fromarray(heatmap(image, extent, alpha), mode="RGB").save(path)
