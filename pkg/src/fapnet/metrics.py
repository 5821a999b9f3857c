"""Evaluation suite: pixel errors, p_k rates, density bins, CDF curves.

Predictions and labels arrive in normalized [0,1] coordinates and are
rescaled per axis to an explicit evaluation resolution before distances
are taken. Table-style summaries report both the mean Euclidean distance
(px) and the mean squared distance (px^2) under separate names, since the
two are easy to conflate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class EvalConfig:
    resolution: tuple[int, int] | None = None  # None: caller supplies data resolution
    thresholds: tuple[float, ...] = (3.0, 5.0, 10.0)
    density_bins: int = 10
    exceed_px: float = 3.0  # strict ">" exceedance level for density bins
    cdf_points: int = 101
    cdf_max: float | None = None  # None: max observed error

    def __post_init__(self) -> None:
        t = self.thresholds
        if not t or any(x <= 0 for x in t) or list(t) != sorted(t):
            raise ValueError("thresholds must be positive and ascending")
        if self.density_bins < 1 or self.cdf_points < 2:
            raise ValueError("density_bins >= 1 and cdf_points >= 2 required")


def errors(
    preds_norm: np.ndarray, labels_norm: np.ndarray, resolution: tuple[int, int]
) -> np.ndarray:
    """Euclidean distances in pixels after rescaling both to `resolution`."""
    preds_norm = np.asarray(preds_norm, dtype=np.float64)
    labels_norm = np.asarray(labels_norm, dtype=np.float64)
    if preds_norm.shape != labels_norm.shape:
        raise ValueError(
            f"prediction shape {preds_norm.shape} != label shape {labels_norm.shape}"
        )
    scale = np.array(resolution, dtype=np.float64)
    d = (preds_norm - labels_norm) * scale
    return np.hypot(d[..., 0], d[..., 1])


def p_at(err: np.ndarray, threshold: float) -> float:
    """Fraction of errors within `threshold` pixels, boundary inclusive."""
    err = np.asarray(err)
    if err.size == 0:
        raise ValueError("p_at over an empty error set")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return float(np.mean(err <= threshold))


def density_analysis(
    counts: np.ndarray, err: np.ndarray, config: EvalConfig
) -> list[dict]:
    """Equal-population bins by event count, with >exceed_px counts per bin.

    Samples are sorted by event count (stable, so ties keep input order)
    and split into ``density_bins`` bins whose populations differ by at
    most one. Bin 0 is the lowest-density decile.
    """
    counts = np.asarray(counts)
    err = np.asarray(err)
    if counts.shape != err.shape:
        raise ValueError("counts and errors must align")
    if len(counts) < config.density_bins:
        raise ValueError(
            f"{len(counts)} samples cannot fill {config.density_bins} bins"
        )
    order = np.argsort(counts, kind="stable")
    bins = []
    for b, idx in enumerate(np.array_split(order, config.density_bins)):
        bins.append(
            {
                "bin": b,
                "n": int(len(idx)),
                "mean_count": float(counts[idx].mean()),
                "mean_error_px": float(err[idx].mean()),
                "exceed": int(np.sum(err[idx] > config.exceed_px)),
            }
        )
    return bins


def cumulative_curve(
    err: np.ndarray, max_error: float | None = None, points: int = 101
) -> np.ndarray:
    """Empirical CDF sampled on an even grid: (points, 2) of (error, frac<=)."""
    err = np.asarray(err, dtype=np.float64)
    if points < 2:
        raise ValueError("points must be >= 2")
    if max_error is None:
        max_error = float(err.max()) if err.size else 1.0
    xs = np.linspace(0.0, max_error, points)
    if err.size == 0:
        return np.stack([xs, np.ones_like(xs)], axis=1)
    ys = np.searchsorted(np.sort(err), xs, side="right") / err.size
    return np.stack([xs, ys], axis=1)


@dataclass
class MetricsReport:
    label: str
    eval_resolution: tuple[int, int]
    n: int
    thresholds: list[float]
    p_rates: list[float]
    mean_distance_px: float
    mean_squared_px2: float
    density_bins: list[dict]
    cdf: np.ndarray  # (points, 2)
    errors_px: np.ndarray  # (n,)
    counts: np.ndarray  # (n,) event counts aligned with errors
    centers_us: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "eval_resolution": list(self.eval_resolution),
            "n": self.n,
            "thresholds": self.thresholds,
            "p_rates": self.p_rates,
            "mean_distance_px": self.mean_distance_px,
            "mean_squared_px2": self.mean_squared_px2,
            "density_bins": self.density_bins,
            "cdf": [[float(a), float(b)] for a, b in self.cdf],
            "meta": self.meta,
        }

    def write(self, out_dir: str | Path) -> Path:
        """Emit report.json + errors.csv + density_bins.csv + cdf.csv."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "report.json"
        report_path.write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")
        with open(out_dir / "errors.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "t_center_us", "event_count", "error_px"])
            centers = (
                self.centers_us
                if self.centers_us is not None
                else np.full(self.n, -1, dtype=np.int64)
            )
            for i in range(self.n):
                writer.writerow(
                    [i, int(centers[i]), int(self.counts[i]), repr(float(self.errors_px[i]))]
                )
        with open(out_dir / "density_bins.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin", "n", "mean_count", "mean_error_px", "exceed"])
            for row in self.density_bins:
                writer.writerow(
                    [row["bin"], row["n"], row["mean_count"], row["mean_error_px"], row["exceed"]]
                )
        with open(out_dir / "cdf.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["error_px", "fraction"])
            for x, y in self.cdf:
                writer.writerow([repr(float(x)), repr(float(y))])
        return report_path


def load_report(path: str | Path) -> dict:
    with open(path) as f:
        report = json.load(f)
    required = {"label", "thresholds", "p_rates", "density_bins", "cdf", "eval_resolution"}
    missing = required - set(report)
    if missing:
        raise ValueError(f"{path}: not a metrics report, missing keys {sorted(missing)}")
    return report


def build_report(
    preds_norm: np.ndarray,
    labels_norm: np.ndarray,
    counts: np.ndarray,
    config: EvalConfig,
    data_resolution: tuple[int, int],
    label: str = "eval",
    centers_us: np.ndarray | None = None,
    meta: dict | None = None,
) -> MetricsReport:
    """Assemble the full metric suite from aligned prediction/label arrays."""
    resolution = config.resolution or data_resolution
    err = errors(preds_norm, labels_norm, resolution)
    if err.size == 0:
        raise ValueError("cannot build a report from zero samples")
    rates = [p_at(err, t) for t in config.thresholds]
    return MetricsReport(
        label=label,
        eval_resolution=tuple(resolution),
        n=int(err.size),
        thresholds=[float(t) for t in config.thresholds],
        p_rates=rates,
        mean_distance_px=float(err.mean()),
        mean_squared_px2=float(np.mean(err**2)),
        density_bins=density_analysis(np.asarray(counts), err, config),
        cdf=cumulative_curve(err, config.cdf_max, config.cdf_points),
        errors_px=err,
        counts=np.asarray(counts),
        centers_us=centers_us,
        meta=meta or {},
    )
