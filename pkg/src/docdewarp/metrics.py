"""Rectification quality metrics: SSIM, Gaussian-pyramid SSIM, MS-SSIM and
grid-space Local Distortion."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d

from docdewarp.errors import DimensionError, MetricError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
FALLBACK_WINDOW = 3
K1, K2 = 0.01, 0.03
_PYR_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def to_gray(img: np.ndarray) -> np.ndarray:
    """Float grayscale in [0, 1]; RGB goes through ITU-R 601 luma."""
    a = np.asarray(img)
    scale = 255.0 if a.dtype == np.uint8 else 1.0
    a = a.astype(np.float64) / scale
    if a.ndim == 3:
        if a.shape[2] == 1:
            return a[..., 0]
        a = a[..., :3] @ np.array([0.299, 0.587, 0.114])
    return a


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def _window_for(h: int, w: int) -> np.ndarray:
    side = min(h, w)
    if side >= WINDOW:
        return gaussian_window(WINDOW, SIGMA)
    if side >= FALLBACK_WINDOW:
        return gaussian_window(FALLBACK_WINDOW, SIGMA)
    raise MetricError(f"image of {h}x{w} is smaller than the {FALLBACK_WINDOW}x{FALLBACK_WINDOW} fallback window")


def ssim_maps(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-window SSIM and contrast-structure maps over valid positions."""
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: image sizes differ, {x.shape} vs {y.shape}")
    g = _window_for(*x.shape)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return lum * cs, cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Images smaller than 11 px on a side use a 3x3 window instead.
    """
    return float(ssim_maps(a, b)[0].mean())


def pyramid_down(img: np.ndarray) -> np.ndarray:
    """5-tap Gaussian low-pass (reflect borders) then 2x decimation."""
    x = correlate1d(img, _PYR_TAPS, axis=0, mode="reflect")
    x = correlate1d(x, _PYR_TAPS, axis=1, mode="reflect")
    return x[::2, ::2]


def _pyramid_components(a, b, levels: int):
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: image sizes differ, {x.shape} vs {y.shape}")
    ssims, css = [], []
    for lvl in range(levels):
        if lvl:
            x, y = pyramid_down(x), pyramid_down(y)
        s_map, cs_map = ssim_maps(x, y)
        ssims.append(float(s_map.mean()))
        css.append(float(cs_map.mean()))
    return ssims, css


def pyramid_ssim(a: np.ndarray, b: np.ndarray, levels: int = 5) -> list[float]:
    """SSIM at each Gaussian pyramid level; level 1 is the original image."""
    return _pyramid_components(a, b, levels)[0]


def combine_levels(levels: list[float], weights=MS_SSIM_WEIGHTS) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, levels) / w.sum())


def ms_ssim(a: np.ndarray, b: np.ndarray, mode: str = "weighted") -> float:
    """Multi-scale SSIM over 5 pyramid levels.

    ``mode="weighted"`` is the weighted average of the per-level SSIM values
    divided by the weight sum (the weights add up to 1.0001).
    ``mode="product"`` is the exponent-product form: contrast-structure terms
    of levels 1-4 and full SSIM at level 5, each raised to its weight
    (negative terms clamp to 0).
    """
    if mode not in ("weighted", "product"):
        raise ValueError(f"unknown ms_ssim mode {mode!r}")
    ssims, css = _pyramid_components(a, b, len(MS_SSIM_WEIGHTS))
    if mode == "weighted":
        return combine_levels(ssims)
    terms = np.maximum(np.array(css[:-1] + ssims[-1:]), 0.0)
    return float(np.prod(terms ** np.asarray(MS_SSIM_WEIGHTS)))


def local_distortion(pred_grid: np.ndarray, gt_grid: np.ndarray, mask: np.ndarray | None = None,
                     source_size: tuple[int, int] | None = None) -> float:
    """Mean Euclidean distance, in source pixels, between two dewarp grids.

    Normalized coordinates convert with the align-corners convention
    (``(W - 1) / 2`` pixels per unit). ``source_size`` defaults to the grid
    size; ``mask`` restricts the mean to the document region.
    """
    if pred_grid.shape != gt_grid.shape:
        raise DimensionError(f"grid shapes differ: {pred_grid.shape} vs {gt_grid.shape}")
    h, w = source_size if source_size is not None else gt_grid.shape[:2]
    d = pred_grid.astype(np.float64) - gt_grid.astype(np.float64)
    dist = np.hypot(d[..., 0] * (w - 1) / 2.0, d[..., 1] * (h - 1) / 2.0)
    if mask is not None:
        dist = dist[mask.astype(bool)]
    return float(dist.mean()) if dist.size else 0.0


# -------------------------------------------------------------------- reports

@dataclass
class SampleMetrics:
    sample: str
    ssim_levels: list[float]
    ms_ssim: float
    ld: float | None = None


@dataclass
class MetricsReport:
    samples: list[SampleMetrics] = field(default_factory=list)
    skipped: int = 0

    def add(self, m: SampleMetrics) -> None:
        self.samples.append(m)

    @property
    def mean_ssim_levels(self) -> list[float]:
        if not self.samples:
            return [float("nan")] * len(MS_SSIM_WEIGHTS)
        return list(np.mean([s.ssim_levels for s in self.samples], axis=0))

    @property
    def mean_ms_ssim(self) -> float:
        return float(np.mean([s.ms_ssim for s in self.samples])) if self.samples else float("nan")

    @property
    def mean_ld(self) -> float | None:
        lds = [s.ld for s in self.samples if s.ld is not None]
        return float(np.mean(lds)) if lds else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample", "ssim_l1", "ssim_l2", "ssim_l3", "ssim_l4", "ssim_l5", "ms_ssim", "ld"])
        for s in self.samples:
            writer.writerow([s.sample, *(f"{v:.6f}" for v in s.ssim_levels), f"{s.ms_ssim:.6f}",
                             "" if s.ld is None else f"{s.ld:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'sample':<16}" + "".join(f"{'L' + str(i + 1):>8}" for i in range(5)) + f"{'MS-SSIM':>9}{'LD(px)':>9}"
        rows = [head]
        for s in self.samples:
            ld = "-" if s.ld is None else f"{s.ld:.3f}"
            rows.append(f"{s.sample:<16}" + "".join(f"{v:>8.4f}" for v in s.ssim_levels) + f"{s.ms_ssim:>9.4f}{ld:>9}")
        mean_ld = self.mean_ld
        rows.append(f"{'mean':<16}" + "".join(f"{v:>8.4f}" for v in self.mean_ssim_levels)
                    + f"{self.mean_ms_ssim:>9.4f}" + (f"{mean_ld:>9.3f}" if mean_ld is not None else f"{'-':>9}"))
        if self.skipped:
            rows.append(f"skipped {self.skipped} sample(s) without ground truth")
        return "\n".join(rows)
