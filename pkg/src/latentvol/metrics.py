"""Volume similarity metrics: slice-wise SSIM / MS-SSIM, PSNR, set-level MMD.

SSIM and MS-SSIM are computed on every depth slice of every channel and
averaged. Windows are 7x7 Gaussian (sigma 1.5) applied without padding.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume_io import DatasetManifest, SegMask3D, Volume3D, _atomic_write

WINDOW = 7
SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MMD_GRID = 8


class PairingError(ValueError):
    pass


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """'valid' correlation of the last two axes with ``win``."""
    views = sliding_window_view(img, win.shape, axis=(-2, -1))
    return np.einsum("...ijkl,kl->...ij", views, win)


def _ssim_maps(x: np.ndarray, y: np.ndarray, data_range: float, win: np.ndarray):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x * mu_x
    syy = _filter(y * y, win) - mu_y * mu_y
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return lum * cs, cs


def _as_array(v) -> np.ndarray:
    data = v.data if isinstance(v, Volume3D) else np.asarray(v)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ValueError(f"expected a (C, D, H, W) volume, got shape {data.shape}")
    return data


def _data_range(a, b, data_range: float | None) -> float:
    if data_range is not None:
        return float(data_range)
    ranges = {tuple(v.intensity_range) for v in (a, b) if isinstance(v, Volume3D)}
    if len(ranges) > 1:
        raise ValueError(f"volumes declare different intensity ranges: {sorted(ranges)}")
    if ranges:
        lo, hi = ranges.pop()
        return hi - lo
    return 2.0


def _pair(a, b):
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def ssim_slices(a, b, data_range: float | None = None) -> np.ndarray:
    """SSIM of every (channel, depth) slice, shape ``(C, D)``."""
    x, y = _pair(a, b)
    if min(x.shape[-2:]) < WINDOW:
        raise ValueError(f"slices of {x.shape[-2:]} are smaller than the {WINDOW}x{WINDOW} window")
    ssim_map, _ = _ssim_maps(x, y, _data_range(a, b, data_range), gaussian_window())
    return ssim_map.mean(axis=(-2, -1))


def ssim_volume(a, b, data_range: float | None = None) -> float:
    """Mean SSIM over depth slices."""
    return float(ssim_slices(a, b, data_range).mean())


def ms_ssim_scales(slice_shape: Sequence[int], window: int = WINDOW, max_scales: int = len(MS_WEIGHTS)) -> int:
    """Largest scale count with ``min(slice_shape) >= 2**(scales-1) * window``."""
    side = min(slice_shape)
    scales = 0
    while scales < max_scales and side >= 2 ** scales * window:
        scales += 1
    return scales


def _avg2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim_slices(a, b, data_range: float | None = None, scales: int | None = None) -> np.ndarray:
    x, y = _pair(a, b)
    dr = _data_range(a, b, data_range)
    m = ms_ssim_scales(x.shape[-2:]) if scales is None else scales
    if m < 2:
        raise ValueError(f"slices of {x.shape[-2:]} are too small for two MS-SSIM scales")
    weights = np.asarray(MS_WEIGHTS[:m])
    weights = weights / weights.sum()
    win = gaussian_window()
    out = np.ones(x.shape[:2])
    for j in range(m):
        ssim_map, cs_map = _ssim_maps(x, y, dr, win)
        term = ssim_map if j == m - 1 else cs_map
        # negative contrast terms are clipped so fractional powers stay real
        out = out * np.maximum(term.mean(axis=(-2, -1)), 0.0) ** weights[j]
        if j < m - 1:
            x, y = _avg2(x), _avg2(y)
    return out


def ms_ssim_volume(a, b, data_range: float | None = None, scales: int | None = None) -> float:
    """Mean multi-scale SSIM over depth slices; the scale count shrinks for small slices."""
    return float(ms_ssim_slices(a, b, data_range, scales).mean())


def psnr_volume(a, b, data_range: float | None = None) -> float:
    """``10 log10(range**2 / MSE)`` over all voxels; ``inf`` for identical inputs."""
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(_data_range(a, b, data_range) ** 2 / mse)


def _box_features(vols, grid: int = MMD_GRID) -> np.ndarray:
    feats = []
    for v in vols:
        x = _as_array(v)
        c, *spatial = x.shape
        for n in spatial:
            if n % grid:
                raise ValueError(f"spatial size {n} is not a multiple of the {grid}^3 MMD grid")
        f = [n // grid for n in spatial]
        x = x.reshape(c, grid, f[0], grid, f[1], grid, f[2]).mean(axis=(2, 4, 6))
        feats.append(x.ravel())
    return np.stack(feats)


def median_bandwidth(features: np.ndarray) -> float:
    d = np.sqrt(((features[:, None] - features[None]) ** 2).sum(-1))
    iu = np.triu_indices(len(features), 1)
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


def mmd_sets(gen: Sequence, real: Sequence, bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with an RBF kernel on volumes box-averaged to 8^3.

    The bandwidth defaults to the median pairwise distance of the pooled
    sample. With equal set sizes the cross term omits the diagonal pairs
    (the U-statistic form), so a set compared with itself scores exactly 0.
    """
    if len(gen) < 2 or len(real) < 2:
        raise ValueError("each set needs at least 2 volumes")
    x, y = _box_features(gen), _box_features(real)
    if x.shape[1] != y.shape[1]:
        raise ValueError("sets have different volume shapes")
    sigma = median_bandwidth(np.concatenate([x, y])) if bandwidth is None else float(bandwidth)

    def k(p, q):
        d2 = ((p[:, None] - q[None]) ** 2).sum(-1)
        return np.exp(-d2 / (2.0 * sigma * sigma))

    kxx, kyy, kxy = k(x, x), k(y, y), k(x, y)
    m, n = len(x), len(y)
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        xy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        xy = kxy.mean()
    return float(xx + yy - 2.0 * xy)


# -- conditional fidelity ------------------------------------------------------

def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * np.logical_and(a, b).sum() / denom)


def bright_region(v, background_margin: float = 0.25) -> np.ndarray:
    """Voxels above the Otsu level computed over the head (non-background) voxels."""
    from skimage.filters import threshold_otsu

    x = _as_array(v)[0]
    lo = v.intensity_range[0] if isinstance(v, Volume3D) else -1.0
    head = x > lo + background_margin
    if head.sum() < 2:
        return np.zeros_like(head)
    level = threshold_otsu(x[head])
    return head & (x > level)


def otsu_dice(v, mask) -> float:
    labels = mask.labels if isinstance(mask, SegMask3D) else np.asarray(mask)
    return dice(bright_region(v), labels > 0)


# -- reports -----------------------------------------------------------------

def _fmt(x: float):
    return "inf" if math.isinf(x) else x


@dataclass
class MetricReport:
    ssim: tuple[float, float]
    ms_ssim: tuple[float, float]
    psnr: tuple[float, float]
    mmd: float
    n_pairs: int
    params: dict = field(default_factory=dict)
    dice: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        out = {}
        for name in ("ssim", "ms_ssim", "psnr"):
            mean, std = getattr(self, name)
            out[name] = {"mean": _fmt(mean), "std": _fmt(std)}
        out["mmd"] = self.mmd
        out["n_pairs"] = self.n_pairs
        out["params"] = self.params
        if self.dice is not None:
            out["dice"] = {"mean": self.dice[0], "std": self.dice[1]}
        return out

    def csv_row(self) -> dict:
        row = {}
        for name in ("ssim", "ms_ssim", "psnr"):
            mean, std = getattr(self, name)
            row[f"{name}_mean"], row[f"{name}_std"] = _fmt(mean), _fmt(std)
        row["mmd"] = self.mmd
        row["n_pairs"] = self.n_pairs
        if self.dice is not None:
            row["dice_mean"], row["dice_std"] = self.dice
        return row

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        _atomic_write(out / "report.json", json.dumps(self.to_dict(), indent=2, sort_keys=True).encode("utf-8"))
        buf = io.StringIO()
        row = self.csv_row()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        _atomic_write(out / "report.csv", buf.getvalue().encode("utf-8"))


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if np.any(np.isinf(arr)):
        finite = arr[np.isfinite(arr)]
        return math.inf, float(finite.std()) if finite.size else 0.0
    return float(arr.mean()), float(arr.std())


def report_from_pairs(gen: Sequence, real: Sequence, data_range: float = 2.0, masks: Sequence | None = None) -> MetricReport:
    """Mean/std of SSIM, MS-SSIM and PSNR over pairs plus set-level MMD.

    With ``masks`` (one per pair) the report also carries the Otsu Dice of
    each generated volume against its conditioning mask.
    """
    if len(gen) != len(real) or not gen:
        raise PairingError("need equally many generated and real volumes")
    ssims = [ssim_volume(g, r, data_range) for g, r in zip(gen, real)]
    shape = _as_array(gen[0]).shape[-2:]
    scales = ms_ssim_scales(shape)
    msss = [ms_ssim_volume(g, r, data_range, scales) for g, r in zip(gen, real)]
    psnrs = [psnr_volume(g, r, data_range) for g, r in zip(gen, real)]
    mmd = mmd_sets(gen, real) if len(gen) >= 2 else float("nan")
    params = {
        "window": WINDOW, "sigma": SIGMA, "k1": K1, "k2": K2, "data_range": data_range,
        "ms_ssim_scales": scales, "ms_ssim_weights": list(MS_WEIGHTS[:scales]),
        "mmd_grid": MMD_GRID, "mmd_bandwidth": "median", "slice_axis": "depth",
    }
    dices = None
    if masks is not None:
        if len(masks) != len(gen):
            raise PairingError("need one mask per pair")
        dices = _mean_std([otsu_dice(g, m) for g, m in zip(gen, masks)])
    return MetricReport(_mean_std(ssims), _mean_std(msss), _mean_std(psnrs), mmd, len(gen), params, dices)


def _mask_key(manifest: DatasetManifest, i: int) -> str:
    m = manifest.load_pair(i)[1]
    return hashlib.sha256(m.labels.tobytes() + repr(m.labels.shape).encode()).hexdigest()


def evaluate(gen_manifest: DatasetManifest, real_manifest: DatasetManifest, out_dir=None) -> MetricReport:
    """Pair generated and real volumes by identical masks and aggregate metrics."""
    gen_keys = {_mask_key(gen_manifest, i): i for i in range(len(gen_manifest))}
    real_keys = {_mask_key(real_manifest, i): i for i in range(len(real_manifest))}
    orphans = [gen_manifest.entries[i].volume_path for k, i in gen_keys.items() if k not in real_keys]
    orphans += [real_manifest.entries[i].volume_path for k, i in real_keys.items() if k not in gen_keys]
    if orphans:
        raise PairingError(f"unpaired entries: {orphans}")
    gen, real, masks = [], [], []
    for key, gi in sorted(gen_keys.items(), key=lambda kv: kv[1]):
        g, m = gen_manifest.load_pair(gi)
        gen.append(g)
        masks.append(m)
        real.append(real_manifest.load_pair(real_keys[key])[0])
    report = report_from_pairs(gen, real, _data_range(gen[0], real[0], None), masks)
    if out_dir is not None:
        report.save(out_dir)
    return report
