"""Image quality metrics and error-vs-uncertainty calibration curves."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ConfigError, ShapeError
from .imaging import DatasetManifest, TrainingPair, as_image, load_pairs
from .uncertainty import SampleStack, aggregate_mean, aggregate_std

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEFAULT_BINS = 10
DEFAULT_THRESHOLDS = 50

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def to_luminance(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == 1:
        return img
    return (img @ LUMA_WEIGHTS)[:, :, None]


def _channels(a, b, luminance: bool):
    a, b = _pair(a, b)
    if luminance:
        a, b = to_luminance(a), to_luminance(b)
    return a, b


def psnr(a, b, data_range: float = 1.0, luminance: bool = False) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    a, b = _channels(a, b, luminance)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(x, g.size, axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM of two 2-D arrays over every fully contained window."""
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, k1: float = SSIM_K1,
         k2: float = SSIM_K2, data_range: float = 1.0, luminance: bool = False) -> float:
    """Mean SSIM over Gaussian windows, averaged over channels."""
    a, b = _channels(a, b, luminance)
    if min(a.shape[:2]) < window:
        raise ConfigError(f"image {a.shape[0]}x{a.shape[1]} smaller than the {window}px SSIM window")
    vals = [ssim_map(a[:, :, c], b[:, :, c], window, sigma, k1, k2, data_range).mean()
            for c in range(a.shape[2])]
    return float(np.mean(vals))


def mae_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return np.abs(a - b)


def mae(a, b) -> float:
    return float(mae_map(a, b).mean())


# -- calibration ------------------------------------------------------------------


@dataclass
class CalibrationCurve:
    """Ordered ``(level, mean_error, count)`` points."""

    points: list[tuple[float, float, int]]
    kind: str

    def __post_init__(self):
        levels = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigError("calibration levels must be strictly increasing")

    @property
    def levels(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def errors(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def counts(self) -> np.ndarray:
        return np.array([p[2] for p in self.points], dtype=np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "mean_error", "count"])
        for level, err, count in self.points:
            w.writerow([repr(float(level)), repr(float(err)), int(count)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, kind: str) -> "CalibrationCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([(float(r["level"]), float(r["mean_error"]), int(r["count"])) for r in rows], kind)


def binned_calibration(records: Iterable[tuple[float, float]], n_bins: int = DEFAULT_BINS) -> CalibrationCurve:
    """Equal-width bins over ``[min sigma, max sigma]``; empty bins are dropped.

    Each point is ``(bin center, mean error of members, member count)``.
    """
    recs = np.asarray(sorted(records), dtype=np.float64).reshape(-1, 2)
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if len(recs) < n_bins:
        raise ConfigError(f"{len(recs)} records cannot fill {n_bins} bins")
    sig, err = recs[:, 0], recs[:, 1]
    lo, hi = sig.min(), sig.max()
    if hi == lo:
        return CalibrationCurve([(float(lo), float(err.mean()), len(err))], "binned_images")
    width = (hi - lo) / n_bins
    idx = np.minimum(((sig - lo) / width).astype(np.int64), n_bins - 1)
    points = []
    for k in range(n_bins):
        members = err[idx == k]
        if members.size:
            points.append((float(lo + (k + 0.5) * width), float(members.mean()), int(members.size)))
    return CalibrationCurve(points, "binned_images")


def threshold_sweep(umap, err_map, n_thresholds: int = DEFAULT_THRESHOLDS) -> CalibrationCurve:
    """Mean error of the pixels whose sigma is at least each threshold.

    Thresholds are linearly spaced from the smallest to the largest sigma.
    """
    sigma = np.asarray(getattr(umap, "sigma", umap), dtype=np.float64)
    err = np.asarray(err_map, dtype=np.float64)
    if sigma.shape != err.shape:
        raise ShapeError(f"sigma {sigma.shape} and error {err.shape} maps differ")
    if n_thresholds < 2:
        raise ConfigError("n_thresholds must be >= 2")
    sigma, err = sigma.ravel(), err.ravel()
    order = np.lexsort((err, sigma))
    sigma, err = sigma[order], err[order]
    suffix = np.cumsum(err[::-1])[::-1]
    thresholds = np.unique(np.linspace(sigma[0], sigma[-1], n_thresholds))
    points = []
    for t in thresholds:
        start = int(np.searchsorted(sigma, t, side="left"))
        count = sigma.size - start
        if count:
            points.append((float(t), float(suffix[start] / count), int(count)))
    return CalibrationCurve(points, "threshold_sweep")


# -- set evaluation ---------------------------------------------------------------


@dataclass
class MetricReport:
    image_id: str
    psnr_db: float
    ssim: float
    mae: float
    sigma_mean: float = 0.0

    def __post_init__(self):
        if self.mae < 0:
            raise ConfigError("mae must be non-negative")


REPORT_COLUMNS = ("image_id", "psnr_db", "ssim", "mae", "sigma_mean")


def _fmt(x: float) -> str:
    return "inf" if x == math.inf else repr(float(x))


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([r.image_id, _fmt(r.psnr_db), _fmt(r.ssim), _fmt(r.mae), _fmt(r.sigma_mean)])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricReport]:
    rows = csv.DictReader(io.StringIO(text))
    return [MetricReport(r["image_id"], float(r["psnr_db"]), float(r["ssim"]), float(r["mae"]),
                         float(r["sigma_mean"])) for r in rows]


@dataclass
class SetEvaluation:
    reports: list[MetricReport]
    curve: CalibrationCurve
    sweeps: dict[str, CalibrationCurve] = field(default_factory=dict)

    @property
    def summary(self) -> dict[str, float]:
        cols = list(zip(*(astuple(r)[1:] for r in self.reports)))
        return {name: float(np.mean(vals)) for name, vals in zip(REPORT_COLUMNS[1:], cols)}


def evaluate_set(
    sampler: Callable[[np.ndarray], SampleStack],
    dataset: DatasetManifest | Sequence[TrainingPair],
    mode: str = "paper_eq7",
    n_bins: int = DEFAULT_BINS,
    n_thresholds: int = DEFAULT_THRESHOLDS,
    luminance: bool = False,
) -> SetEvaluation:
    """Run ``sampler`` on every LR input and score the mean prediction.

    Metrics are computed on the aggregated mean; sigma-tilde (the mean of
    the per-pixel sigma) is recorded per image and binned against per-image
    MAE. A per-image threshold sweep is kept in ``sweeps``.
    """
    pairs = load_pairs(dataset) if isinstance(dataset, DatasetManifest) else list(dataset)
    if not pairs:
        raise ConfigError("cannot evaluate an empty dataset")
    reports, sweeps = [], {}
    for i, pair in enumerate(pairs):
        image_id = pair.source_id or f"img{i:04d}"
        stack = sampler(pair.lr)
        mean = aggregate_mean(stack)
        umap = aggregate_std(stack, mode)
        reports.append(MetricReport(
            image_id,
            psnr(mean, pair.hr, luminance=luminance),
            ssim(mean, pair.hr, luminance=luminance),
            mae(mean, pair.hr),
            umap.sigma_mean,
        ))
        sweeps[image_id] = threshold_sweep(umap, mae_map(mean, pair.hr), n_thresholds)
    curve = binned_calibration([(r.sigma_mean, r.mae) for r in reports], min(n_bins, len(reports)))
    return SetEvaluation(reports, curve, sweeps)
