"""Point-cloud primitives over event windows.

A window becomes a fixed-size point set: random downsampling to N points,
per-window coordinate normalization into the unit cube, then a hierarchy of
farthest-point-sampled centroids with KNN groups whose features are
standardized per group. Everything here is plain numpy and deterministic
given an explicit rng; geometry (FPS/KNN) depends only on coordinates, so
callers can compute it once per sample and reuse it across training epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fapnet.events import PointSample, Window


@dataclass(frozen=True)
class PointSet:
    """Raw downsampled points plus the index map back to source events.

    ``points`` columns are (t_us, x, y, p) in source units; ``source_idx``
    holds positions within the window's event slice, -1 for sentinel rows.
    """

    points: np.ndarray  # (N, 4) float64
    source_idx: np.ndarray  # (N,) int64
    valid: bool

    def __post_init__(self) -> None:
        if self.points.shape != (len(self.source_idx), 4):
            raise ValueError("points must be (N, 4) with matching index map")
        self.points.setflags(write=False)
        self.source_idx.setflags(write=False)


@dataclass(frozen=True)
class Grouping:
    """FPS centroids with standardized KNN groups.

    ``features`` is (M, K, C+3): per-group standardized channels with the
    centroid's absolute normalized coordinates appended to every member.
    """

    centroid_idx: np.ndarray  # (M,) int64
    neighbor_idx: np.ndarray  # (M, K) int64, row m starts with centroid_idx[m]
    features: np.ndarray  # (M, K, C+3) float64

    def __post_init__(self) -> None:
        m, k = self.neighbor_idx.shape
        if len(self.centroid_idx) != m or self.features.shape[:2] != (m, k):
            raise ValueError("centroid/neighbor/feature shapes disagree")


def downsample(window: Window, n: int, rng: np.random.Generator) -> PointSet:
    """Select exactly ``n`` events from a window.

    With >= n events: a uniform subset without replacement. With fewer (but
    at least one): all events kept, deficit filled by draws with
    replacement. Either way rows are re-sorted into temporal order. An
    empty window yields n copies of a sentinel at the window's
    spatio-temporal center with the validity bit cleared.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    count = window.count
    if count == 0:
        w, h = window.stream.resolution
        sentinel = [(window.t_start + window.t_end) / 2, w / 2, h / 2, 0.0]
        return PointSet(
            np.tile(np.array(sentinel), (n, 1)), np.full(n, -1, dtype=np.int64), False
        )
    if count >= n:
        idx = rng.choice(count, size=n, replace=False)
    else:
        idx = np.concatenate(
            [np.arange(count), rng.integers(0, count, size=n - count)]
        )
    idx = np.sort(idx).astype(np.int64)
    points = np.stack(
        [
            window.ts[idx].astype(np.float64),
            window.xs[idx].astype(np.float64),
            window.ys[idx].astype(np.float64),
            window.ps[idx].astype(np.float64),
        ],
        axis=1,
    )
    return PointSet(points, idx, True)


def normalize(
    points: np.ndarray,
    w: int,
    h: int,
    t_min: float,
    t_max: float,
    include_polarity: bool = False,
) -> np.ndarray:
    """Map raw (t, x, y, p) rows into the unit cube: x/w, y/h, scaled t.

    ``t' = (t - t_min) / (t_max - t_min)``; a single-timestamp window
    (t_max == t_min) maps every t' to 0.5 rather than dividing by zero.
    Polarity passes through unscaled as an optional fourth channel.
    """
    if w <= 0 or h <= 0:
        raise ValueError("resolution must be positive")
    if t_max < t_min:
        raise ValueError("t_max must be >= t_min")
    points = np.asarray(points, dtype=np.float64)
    xs = points[:, 1] / w
    ys = points[:, 2] / h
    if t_max == t_min:
        ts = np.full(len(points), 0.5)
    else:
        ts = (points[:, 0] - t_min) / (t_max - t_min)
    cols = [xs, ys, ts]
    if include_polarity:
        cols.append(points[:, 3])
    return np.stack(cols, axis=1)


def prepare_sample(
    window: Window, n: int, rng: np.random.Generator, include_polarity: bool = False
) -> PointSample:
    """Window -> normalized fixed-size PointSample (label in pixel space)."""
    ps = downsample(window, n, rng)
    t_min, t_max = ps.points[:, 0].min(), ps.points[:, 0].max()
    w, h = window.stream.resolution
    feats = normalize(ps.points, w, h, t_min, t_max, include_polarity)
    if window.label is not None:
        label = (window.label.x, window.label.y)
        label_valid = window.label.valid
    else:
        label = (np.nan, np.nan)
        label_valid = False
    return PointSample(feats, label, ps.valid and label_valid)


def fps(coords: np.ndarray, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling over Euclidean distance.

    Starts at ``start_index``; each next pick maximizes the minimum
    distance to everything already chosen, ties broken by lowest index.
    Squared distances are used throughout (monotone in the metric). Chosen
    points are masked with distance -1 so duplicates never repeat a pick.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start_index
    d2 = np.sum((coords - coords[start_index]) ** 2, axis=1)
    d2[start_index] = -1.0
    for j in range(1, m):
        nxt = int(np.argmax(d2))  # first occurrence of the max = lowest index
        chosen[j] = nxt
        d2 = np.minimum(d2, np.sum((coords - coords[nxt]) ** 2, axis=1))
        d2[nxt] = -1.0
    return chosen


def knn(coords: np.ndarray, centroid_idx: np.ndarray, k: int) -> np.ndarray:
    """K nearest neighbors of each centroid, self always first.

    Remaining slots are filled in order of (squared distance, index); the
    stable argsort breaks distance ties by lowest point index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    centroid_idx = np.asarray(centroid_idx, dtype=np.int64)
    n = len(coords)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    diff = coords[centroid_idx][:, None, :] - coords[None, :, :]
    d2 = np.sum(diff * diff, axis=2)  # (M, N)
    d2[np.arange(len(centroid_idx)), centroid_idx] = -1.0  # pin self to front
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)


def standardize_group(group: np.ndarray, centroid_coords: np.ndarray) -> np.ndarray:
    """Standardize each group per channel and append centroid context.

    ``group`` is (..., K, C); mean and *population* std are taken over the
    K members. Zero-variance channels divide by 1, leaving centered zeros.
    ``centroid_coords`` (..., 3) — the centroid's absolute normalized
    coordinates — are broadcast onto every member as extra channels.
    """
    group = np.asarray(group, dtype=np.float64)
    centroid_coords = np.asarray(centroid_coords, dtype=np.float64)
    mean = group.mean(axis=-2, keepdims=True)
    std = group.std(axis=-2, keepdims=True)
    z = (group - mean) / np.where(std == 0.0, 1.0, std)
    ctx = np.broadcast_to(
        centroid_coords[..., None, :], z.shape[:-1] + (centroid_coords.shape[-1],)
    )
    return np.concatenate([z, ctx], axis=-1)


def build_grouping(
    coords: np.ndarray, features: np.ndarray, m: int, k: int, start_index: int = 0
) -> Grouping:
    """FPS + KNN + per-group standardization in one step.

    ``coords`` (N, 3) drives the geometry; ``features`` (N, C) supplies the
    channels that get standardized (for the first hierarchy stage these are
    simply the coordinates again).
    """
    centroid_idx = fps(coords, m, start_index)
    neighbor_idx = knn(coords, centroid_idx, k)
    grouped = features[neighbor_idx]  # (M, K, C)
    feats = standardize_group(grouped, coords[centroid_idx])
    return Grouping(centroid_idx, neighbor_idx, feats)
