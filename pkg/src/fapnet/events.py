"""Shared domain types: events, streams, labels, windows, samples, sequences.

Timestamps are integer microseconds since stream start everywhere; labels
interpolated off the 100 Hz grid use real-valued coordinates but keep
integer query times. All types are immutable after construction (array
fields are marked read-only), so they can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class Event:
    """Single sensor event. ``polarity`` is +1 (brightness up) or -1 (down)."""

    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class EventStream:
    """Time-ordered event arrays plus the sensor resolution ``(w, h)``.

    Events are stored as parallel column arrays rather than a list of
    `Event` objects so that slicing and windowing stay O(1)/vectorized.
    """

    ts: np.ndarray  # (n,) int64, non-decreasing, microseconds
    xs: np.ndarray  # (n,) int32
    ys: np.ndarray  # (n,) int32
    ps: np.ndarray  # (n,) int8, values in {-1, +1}
    resolution: tuple[int, int]  # (w, h) pixels

    def __post_init__(self) -> None:
        for name in ("ts", "xs", "ys", "ps"):
            arr = getattr(self, name)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
            arr.setflags(write=False)
        n = len(self.ts)
        if not (len(self.xs) == len(self.ys) == len(self.ps) == n):
            raise ValueError("event column arrays must have equal length")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ValueError(f"resolution components must be > 0, got {self.resolution}")

    @classmethod
    def from_events(cls, events: list[Event], resolution: tuple[int, int]) -> "EventStream":
        ts = np.array([e.t for e in events], dtype=np.int64)
        xs = np.array([e.x for e in events], dtype=np.int32)
        ys = np.array([e.y for e in events], dtype=np.int32)
        ps = np.array([e.polarity for e in events], dtype=np.int8)
        return cls(ts, xs, ys, ps, resolution)

    @classmethod
    def from_arrays(
        cls,
        ts: np.ndarray,
        xs: np.ndarray,
        ys: np.ndarray,
        ps: np.ndarray,
        resolution: tuple[int, int],
    ) -> "EventStream":
        return cls(
            np.ascontiguousarray(ts, dtype=np.int64),
            np.ascontiguousarray(xs, dtype=np.int32),
            np.ascontiguousarray(ys, dtype=np.int32),
            np.ascontiguousarray(ps, dtype=np.int8),
            resolution,
        )

    def __len__(self) -> int:
        return len(self.ts)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self.event(i)

    def event(self, i: int) -> Event:
        return Event(int(self.ts[i]), int(self.xs[i]), int(self.ys[i]), int(self.ps[i]))

    @property
    def duration_us(self) -> int:
        """Span covered by the stream, inferred as last timestamp + 1 (0 if empty)."""
        return int(self.ts[-1]) + 1 if len(self.ts) else 0


@dataclass(frozen=True)
class PupilLabel:
    """Pupil center annotation; ``valid=False`` marks closed/unlabelable states."""

    t: int
    x: float
    y: float
    valid: bool = True


@dataclass(frozen=True)
class Window:
    """Half-open temporal slice ``[t_start, t_end)`` of a stream.

    ``i0:i1`` is the contiguous index range of contained events.
    ``nominal_center`` is the center of the original fixed window and is
    preserved by adaptive expansion; the label is always evaluated there.
    """

    stream: EventStream
    t_start: int
    t_end: int
    i0: int
    i1: int
    label: PupilLabel | None  # None when tracking without ground truth
    nominal_center: int

    def __post_init__(self) -> None:
        if not (self.t_start <= self.nominal_center <= self.t_end):
            raise ValueError(
                f"nominal_center {self.nominal_center} outside [{self.t_start}, {self.t_end}]"
            )

    @property
    def count(self) -> int:
        return self.i1 - self.i0

    @property
    def ts(self) -> np.ndarray:
        return self.stream.ts[self.i0 : self.i1]

    @property
    def xs(self) -> np.ndarray:
        return self.stream.xs[self.i0 : self.i1]

    @property
    def ys(self) -> np.ndarray:
        return self.stream.ys[self.i0 : self.i1]

    @property
    def ps(self) -> np.ndarray:
        return self.stream.ps[self.i0 : self.i1]

    @property
    def span_us(self) -> int:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class PointSample:
    """Fixed-size normalized point set for one window.

    ``points`` is (N, C) with columns (x', y', t') in [0, 1], plus polarity
    in {-1, +1} as a fourth column when configured. ``label`` is the pupil
    center in label pixel space.
    """

    points: np.ndarray
    label: tuple[float, float]
    valid: bool = True  # cleared for windows that contained no events

    def __post_init__(self) -> None:
        self.points.setflags(write=False)


@dataclass(frozen=True)
class Sequence:
    """S consecutive samples fed jointly through the inter-sample recurrence.

    Samples are ordered by their nominal window centers; the nominal
    (pre-expansion) windows tile time without overlap, though adaptively
    expanded spans may overlap their neighbors.
    """

    samples: list[PointSample]
    labels: np.ndarray  # (S, 2) label pixel space
    mask: np.ndarray = field(default=None)  # (S,) bool, False for padded entries

    def __post_init__(self) -> None:
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(len(self.samples), dtype=bool))
        if len(self.samples) != len(self.labels) or len(self.samples) != len(self.mask):
            raise ValueError("samples, labels and mask must have equal length")
        self.labels.setflags(write=False)
        self.mask.setflags(write=False)

    def __len__(self) -> int:
        return len(self.samples)


def validate_stream(stream: EventStream) -> list[str]:
    """Check EventStream invariants; return one message per violation.

    Diagnostic only: never raises. Messages carry the offending event index.
    """
    violations: list[str] = []
    w, h = stream.resolution
    ts, xs, ys, ps = stream.ts, stream.xs, stream.ys, stream.ps

    for i in np.flatnonzero(ts < 0):
        violations.append(f"event {i}: negative timestamp {ts[i]}")
    bad_order = np.flatnonzero(np.diff(ts) < 0) + 1
    for i in bad_order:
        violations.append(f"event {i}: timestamp {ts[i]} decreases from {ts[i - 1]}")
    for i in np.flatnonzero((xs < 0) | (xs >= w)):
        violations.append(f"event {i}: x={xs[i]} out of bounds [0, {w})")
    for i in np.flatnonzero((ys < 0) | (ys >= h)):
        violations.append(f"event {i}: y={ys[i]} out of bounds [0, {h})")
    for i in np.flatnonzero(~np.isin(ps, (-1, 1))):
        violations.append(f"event {i}: polarity {ps[i]} not in {{-1, +1}}")

    violations.sort(key=lambda m: int(m.split()[1].rstrip(":")))
    return violations
