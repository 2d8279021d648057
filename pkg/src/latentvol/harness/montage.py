"""Slice montage PNG for eyeballing generated volumes (display only)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def montage_array(vols: np.ndarray, n_slices: int = 5, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Grid with one row per volume and ``n_slices`` evenly spaced depth slices per row, as uint8."""
    vols = np.asarray(vols)
    if vols.ndim == 5:
        vols = vols[:, 0]
    if vols.ndim != 4:
        raise ValueError(f"expected (N, D, H, W) or (N, 1, D, H, W), got {vols.shape}")
    depth = vols.shape[1]
    picks = np.linspace(0, depth - 1, n_slices + 2)[1:-1].round().astype(int)
    rows = [np.concatenate([v[k] for k in picks], axis=1) for v in vols]
    grid = np.concatenate(rows, axis=0)
    return (np.clip((grid - lo) / (hi - lo), 0.0, 1.0) * 255).round().astype(np.uint8)


def save_montage(vols: np.ndarray, path, n_slices: int = 5) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(montage_array(vols, n_slices)).save(path)
    return path
