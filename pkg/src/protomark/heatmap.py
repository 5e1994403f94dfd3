"""Gaussian target heatmaps and argmax landmark decoding."""

import numpy as np

from .core import DatasetError

TRUNCATE_BELOW = 1e-6


def render_heatmaps(coords, height: int, width: int, sigma_px: float) -> np.ndarray:
    """Render one peak-normalized Gaussian per landmark.

    Returns a (K, H, W) array with ``exp(-((i - y)^2 + (j - x)^2) / (2 sigma^2))``
    at row i, column j; values under 1e-6 are set to zero.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if not sigma_px > 0:
        raise ValueError("sigma_px must be positive")
    x, y = coords[:, 0], coords[:, 1]
    if np.any((x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)):
        raise DatasetError(f"landmark outside the {width}x{height} grid: {coords.tolist()}")
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    # separable: outer product of the row and column factors
    gy = np.exp(-((rows[None, :] - y[:, None]) ** 2) / (2 * sigma_px**2))
    gx = np.exp(-((cols[None, :] - x[:, None]) ** 2) / (2 * sigma_px**2))
    maps = gy[:, :, None] * gx[:, None, :]
    maps[maps < TRUNCATE_BELOW] = 0.0
    return maps


def decode_landmarks(sim) -> np.ndarray:
    """Per-channel argmax of a (K, H, W) stack, returned as (K, 2) (x, y).

    Ties resolve to the smallest row-major index.
    """
    s = sim.detach().cpu().numpy() if hasattr(sim, "detach") else np.asarray(sim)
    if s.ndim != 3:
        raise ValueError(f"similarity stack must be (K, H, W), got {s.shape}")
    k, h, w = s.shape
    flat = s.reshape(k, h * w).argmax(axis=1)
    rows, cols = np.divmod(flat, w)
    return np.stack([cols, rows], axis=1).astype(np.float64)
