"""Event-stream windowing: fixed tiling, density-adaptive expansion, sequences.

A stream is first tiled into fixed non-overlapping windows (default 10 ms).
Sparse windows — too few events for a stable point-cloud sample — are then
grown symmetrically in time until they reach an event-count threshold or a
maximum span, which trades temporal resolution for sample density only
where the event rate demands it. Expanded windows may overlap their
neighbours; the *nominal* tiling stays non-overlapping and each window's
label is always taken at its nominal center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fapnet.data_io import labels_at
from fapnet.events import EventStream, PupilLabel, Window

MS = 1000  # microseconds per millisecond


@dataclass(frozen=True)
class WindowingConfig:
    """Windowing and sequence-building settings.

    ``window_ms`` is the fixed tiling width; adaptive expansion grows a
    sparse window by ``expand_step_ms`` on *each* side per iteration until
    it holds ``adaptive_threshold`` events or spans
    ``min(max_window_ms, stream duration)``.
    """

    window_ms: int = 10
    max_window_ms: int = 100
    expand_step_ms: int = 5
    adaptive_threshold: int = 1024
    seq_len: int = 20

    def __post_init__(self) -> None:
        if self.window_ms <= 0:
            raise ValueError("window_ms must be > 0")
        if self.max_window_ms < self.window_ms:
            raise ValueError("max_window_ms must be >= window_ms")
        if self.expand_step_ms <= 0:
            raise ValueError("expand_step_ms must be > 0")
        if self.adaptive_threshold <= 0 or self.seq_len <= 0:
            raise ValueError("adaptive_threshold and seq_len must be > 0")


def _window_label(labels: list[PupilLabel] | None, t: int) -> PupilLabel | None:
    if labels is None:
        return None
    coords, valid = labels_at(labels, np.array([t]))
    return PupilLabel(t, float(coords[0, 0]), float(coords[0, 1]), bool(valid[0]))


def split_fixed(
    stream: EventStream,
    labels: list[PupilLabel] | None,
    config: WindowingConfig,
    duration_us: int | None = None,
) -> list[Window]:
    """Tile ``[0, duration)`` into non-overlapping ``window_ms`` windows.

    ``duration_us`` defaults to the stream's inferred duration (last
    timestamp + 1). The final partial window is kept, so every event lands
    in exactly one window. Windows with no events are kept too — the
    count-based expansion and the model's sentinel handling deal with them.
    """
    if duration_us is None:
        duration_us = stream.duration_us
    if duration_us < 0:
        raise ValueError("duration_us must be >= 0")
    width = config.window_ms * MS
    n_windows = math.ceil(duration_us / width) if duration_us else 0
    edges = [min(k * width, duration_us) for k in range(n_windows + 1)]
    bounds = np.searchsorted(stream.ts, edges)  # left side: first i with ts >= edge
    windows = []
    for k in range(n_windows):
        t0, t1 = edges[k], edges[k + 1]
        center = (t0 + t1) // 2
        windows.append(
            Window(stream, t0, t1, int(bounds[k]), int(bounds[k + 1]),
                   _window_label(labels, center), center)
        )
    return windows


def expand_adaptive(
    window: Window,
    config: WindowingConfig,
    duration_us: int | None = None,
) -> Window:
    """Grow a sparse window symmetrically until dense enough or at max span.

    Each iteration adds ``expand_step_ms`` to both sides, clamped to
    ``[0, duration_us]``; budget that would cross a boundary is transferred
    to the open side, so the window keeps growing toward
    ``min(max_window_ms, duration)`` even near the stream edges. Already
    dense windows are returned unchanged. The nominal center and label are
    preserved.
    """
    if window.count >= config.adaptive_threshold:
        return window
    stream = window.stream
    if duration_us is None:
        # An empty stream has no intrinsic duration: treat the right edge
        # as unbounded so the span can still reach the max-window cap.
        duration_us = stream.duration_us if len(stream) else None
    if duration_us is not None:
        upper = max(duration_us, window.t_end)
        target_span = min(config.max_window_ms * MS, upper)
    else:
        upper = None
        target_span = config.max_window_ms * MS
    t0, t1 = window.t_start, window.t_end
    i0, i1 = window.i0, window.i1
    step = config.expand_step_ms * MS
    ts = stream.ts
    while i1 - i0 < config.adaptive_threshold and t1 - t0 < target_span:
        grow = min(2 * step, target_span - (t1 - t0))
        gs = min(grow // 2, t0)  # clamp left growth at 0
        ge = grow - gs if upper is None else min(grow - gs, upper - t1)
        gs = min(grow - ge, t0)  # budget blocked on the right returns left
        if gs == 0 and ge == 0:
            break
        t0, t1 = t0 - gs, t1 + ge
        i0 = int(np.searchsorted(ts, t0, side="left"))
        i1 = int(np.searchsorted(ts, t1, side="left"))
    return Window(stream, t0, t1, i0, i1, window.label, window.nominal_center)


def augment_invert(windows: list[Window]) -> list[Window]:
    """Trajectory inversion: reverse window order and each window's time axis.

    With ``[T0, T1]`` the covered span (first window start, last window
    end), every timestamp maps ``t -> T0 + T1 - t`` and window bounds
    ``[a, b)`` map to ``[T0+T1-b, T0+T1-a]``; applying the augmentation
    twice restores the originals exactly. An event exactly at a window
    start lands on the reflected window's *closed* right edge — the only
    place the half-open convention is relaxed. Spatial coordinates are
    untouched; labels ride along in reversed order.
    """
    if not windows:
        return []
    t_lo = min(w.t_start for w in windows)
    t_hi = max(w.t_end for w in windows)
    pivot = t_lo + t_hi
    resolution = windows[0].stream.resolution
    out = []
    for w in reversed(windows):
        sub = EventStream(
            np.ascontiguousarray((pivot - w.ts)[::-1], dtype=np.int64),
            np.ascontiguousarray(w.xs[::-1], dtype=np.int32),
            np.ascontiguousarray(w.ys[::-1], dtype=np.int32),
            np.ascontiguousarray(w.ps[::-1], dtype=np.int8),
            resolution,
        )
        center = pivot - w.nominal_center
        label = None
        if w.label is not None:
            label = PupilLabel(center, w.label.x, w.label.y, w.label.valid)
        out.append(
            Window(sub, pivot - w.t_end, pivot - w.t_start, 0, len(sub), label, center)
        )
    return out


@dataclass(frozen=True)
class SequenceWindows:
    """``seq_len`` consecutive windows destined for one model sequence.

    ``mask[i]`` is False for entries that are repetition padding (eval
    mode only) and must be excluded from losses and metrics.
    """

    windows: list[Window]
    mask: np.ndarray  # (seq_len,) bool

    def __post_init__(self) -> None:
        if len(self.windows) != len(self.mask):
            raise ValueError("mask length must match window count")
        self.mask.setflags(write=False)

    def __len__(self) -> int:
        return len(self.windows)


def make_sequences(
    windows: list[Window], config: WindowingConfig, mode: str = "train"
) -> list[SequenceWindows]:
    """Chunk consecutive windows into non-overlapping length-``seq_len`` runs.

    In ``"train"`` mode a trailing remainder shorter than ``seq_len`` is
    dropped; in ``"eval"`` mode it is padded by repeating its last window,
    with the mask marking the real entries, so every window gets scored.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    s = config.seq_len
    out = []
    for i in range(0, len(windows), s):
        chunk = windows[i : i + s]
        if len(chunk) < s:
            if mode == "train" or not chunk:
                break
            mask = np.arange(s) < len(chunk)
            chunk = chunk + [chunk[-1]] * (s - len(chunk))
        else:
            mask = np.ones(s, dtype=bool)
        out.append(SequenceWindows(chunk, mask))
    return out
