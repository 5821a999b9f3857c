"""File I/O and synthetic pupil-event generation.

Formats:
  * event CSV: header ``t_us,x,y,p`` with p in {0,1} mapped to {-1,+1}
  * label CSV: header ``t_us,x,y,valid``
  * binary events: magic ``EVC1``, u32 w, u32 h, u64 count, then ``count``
    packed little-endian records of (u64 t_us, u16 x, u16 y, i8 p).

The synthetic generator stands in for simulator-derived datasets at desk
scale: a pupil ring emits events at a rate proportional to pupil speed,
which is the density structure the adaptive windowing exploits.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fapnet.events import EventStream, PupilLabel, validate_stream

log = logging.getLogger(__name__)

EVENT_CSV_HEADER = ["t_us", "x", "y", "p"]
LABEL_CSV_HEADER = ["t_us", "x", "y", "valid"]
BINARY_MAGIC = b"EVC1"
_BINARY_HEADER = struct.Struct("<4sIIQ")
_BINARY_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

LABEL_HZ = 100
LABEL_PERIOD_US = 1_000_000 // LABEL_HZ


class FormatError(ValueError):
    """Malformed input file; message names the file and offending line."""


def load_events(path: str | Path, format: str = "csv") -> EventStream:
    """Read an event file into a validated EventStream.

    Unsorted rows are re-sorted by timestamp with a logged warning counting
    the out-of-order rows. Coordinates outside the declared resolution are
    a hard error.
    """
    path = Path(path)
    if format == "csv":
        stream = _read_events_csv(path)
    elif format == "binary":
        stream = _read_events_binary(path)
    else:
        raise ValueError(f"unknown event format {format!r} (expected 'csv' or 'binary')")

    n_unsorted = int(np.sum(np.diff(stream.ts) < 0))
    if n_unsorted:
        log.warning("%s: %d out-of-order rows, re-sorting by timestamp", path, n_unsorted)
        order = np.argsort(stream.ts, kind="stable")
        stream = EventStream(
            stream.ts[order], stream.xs[order], stream.ys[order], stream.ps[order],
            stream.resolution,
        )
    violations = validate_stream(stream)
    if violations:
        raise FormatError(f"{path}: invalid stream: {violations[0]}")
    return stream


def _read_events_csv(path: Path) -> EventStream:
    ts, xs, ys, ps = [], [], [], []
    w = h = 0
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != EVENT_CSV_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(EVENT_CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, x, y, p = (int(v) for v in row)
            except (ValueError, TypeError):
                raise FormatError(f"{path}:{line_no}: malformed event row {row!r}") from None
            if p not in (0, 1):
                raise FormatError(f"{path}:{line_no}: polarity {p} not in {{0, 1}}")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(2 * p - 1)
            w = max(w, x + 1)
            h = max(h, y + 1)
    # CSV carries no resolution; infer the tightest bounding box.
    return EventStream.from_arrays(
        np.array(ts, dtype=np.int64),
        np.array(xs, dtype=np.int32),
        np.array(ys, dtype=np.int32),
        np.array(ps, dtype=np.int8),
        (max(w, 1), max(h, 1)),
    )


def _read_events_binary(path: Path) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < _BINARY_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h, count = _BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {BINARY_MAGIC!r}")
    body = raw[_BINARY_HEADER.size :]
    expected = count * _BINARY_RECORD.itemsize
    if len(body) != expected:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    rec = np.frombuffer(body, dtype=_BINARY_RECORD)
    return EventStream.from_arrays(
        rec["t"].astype(np.int64), rec["x"].astype(np.int32),
        rec["y"].astype(np.int32), rec["p"].astype(np.int8), (int(w), int(h)),
    )


def save_events(stream: EventStream, path: str | Path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(EVENT_CSV_HEADER)
            for t, x, y, p in zip(stream.ts, stream.xs, stream.ys, stream.ps):
                writer.writerow([int(t), int(x), int(y), (int(p) + 1) // 2])
    elif format == "binary":
        w, h = stream.resolution
        rec = np.empty(len(stream), dtype=_BINARY_RECORD)
        rec["t"] = stream.ts
        rec["x"] = stream.xs
        rec["y"] = stream.ys
        rec["p"] = stream.ps
        with open(path, "wb") as f:
            f.write(_BINARY_HEADER.pack(BINARY_MAGIC, w, h, len(stream)))
            f.write(rec.tobytes())
    else:
        raise ValueError(f"unknown event format {format!r}")


def load_labels(path: str | Path) -> list[PupilLabel]:
    """Read a label CSV; timestamps must be strictly increasing."""
    path = Path(path)
    labels: list[PupilLabel] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != LABEL_CSV_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(LABEL_CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = int(row[0])
                x, y = float(row[1]), float(row[2])
                valid = int(row[3])
            except (ValueError, IndexError):
                raise FormatError(f"{path}:{line_no}: malformed label row {row!r}") from None
            if valid not in (0, 1):
                raise FormatError(f"{path}:{line_no}: valid flag {valid} not in {{0, 1}}")
            if x < 0 or y < 0:
                raise FormatError(f"{path}:{line_no}: negative coordinates ({x}, {y})")
            if labels and t <= labels[-1].t:
                raise FormatError(
                    f"{path}:{line_no}: timestamp {t} not increasing (previous {labels[-1].t})"
                )
            labels.append(PupilLabel(t, x, y, bool(valid)))
    return labels


def save_labels(labels: list[PupilLabel], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LABEL_CSV_HEADER)
        for lab in labels:
            # str() keeps the shortest round-trip float representation
            writer.writerow([lab.t, str(lab.x), str(lab.y), int(lab.valid)])


def label_at(labels: list[PupilLabel], t: int) -> PupilLabel:
    """Interpolate the pupil label at time ``t``.

    Linear interpolation between the bracketing labels; validity is the AND
    of both brackets. Outside the labeled range the nearest endpoint is
    returned (clamped).
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    ts = np.array([lab.t for lab in labels], dtype=np.int64)
    if t <= ts[0]:
        first = labels[0]
        return PupilLabel(int(t), first.x, first.y, first.valid)
    if t >= ts[-1]:
        last = labels[-1]
        return PupilLabel(int(t), last.x, last.y, last.valid)
    hi = int(np.searchsorted(ts, t, side="right"))
    lo = hi - 1
    if ts[lo] == t:
        return labels[lo]
    a, b = labels[lo], labels[hi]
    frac = (t - a.t) / (b.t - a.t)
    return PupilLabel(
        int(t), a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y), a.valid and b.valid
    )


def labels_at(labels: list[PupilLabel], ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `label_at`: returns ((n, 2) coordinates, (n,) validity)."""
    if not labels:
        raise ValueError("labels must be non-empty")
    lt = np.array([lab.t for lab in labels], dtype=np.float64)
    lx = np.array([lab.x for lab in labels])
    ly = np.array([lab.y for lab in labels])
    lv = np.array([lab.valid for lab in labels])
    ts = np.asarray(ts, dtype=np.float64)
    xs = np.interp(ts, lt, lx)  # np.interp clamps at the endpoints
    ys = np.interp(ts, lt, ly)
    last = len(labels) - 1
    idx = np.searchsorted(lt, ts, side="right") - 1  # left bracket, -1 below range
    lo = np.clip(idx, 0, last)
    hi = np.clip(idx + 1, 0, last)
    valid = np.where(lt[lo] == ts, lv[lo], lv[lo] & lv[hi])
    valid = np.where(ts <= lt[0], lv[0], np.where(ts >= lt[-1], lv[last], valid))
    return np.stack([xs, ys], axis=1), valid.astype(bool)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic pupil-event generator settings.

    The pupil center follows a per-axis sum of sinusoids around the frame
    center plus Poisson-timed saccade jumps. Events are emitted on a ring
    of ``ring_radius`` around the center at rate
    ``rate_gain * |pupil speed| + rate_floor`` (events/s), plus uniform
    noise events over the whole frame at ``noise_rate``.
    """

    resolution: tuple[int, int] = (240, 180)
    duration_ms: int = 1000
    amp_x: tuple[float, ...] = (20.0,)
    freq_x: tuple[float, ...] = (0.7,)  # Hz
    amp_y: tuple[float, ...] = (12.0,)
    freq_y: tuple[float, ...] = (1.1,)
    phase_x: tuple[float, ...] = ()  # radians; zero-padded to len(amp_x)
    phase_y: tuple[float, ...] = ()
    saccade_rate: float = 0.0  # saccades per second
    saccade_magnitude: float = 0.0  # pixels per jump
    ring_radius: float = 8.0
    rate_gain: float = 200.0  # events emitted per pixel of pupil travel
    rate_floor: float = 1000.0  # events/s emitted regardless of speed
    noise_rate: float = 0.0  # uniform background events/s
    seed: int = 0

    def __post_init__(self) -> None:
        w, h = self.resolution
        if min(self.saccade_rate, self.rate_gain, self.rate_floor, self.noise_rate) < 0:
            raise ValueError("rates must be >= 0")
        if not self.ring_radius < min(w, h) / 2:
            raise ValueError(f"ring_radius {self.ring_radius} must be < min(w, h)/2")
        if len(self.amp_x) != len(self.freq_x) or len(self.amp_y) != len(self.freq_y):
            raise ValueError("amplitude and frequency tuples must have equal length")


def synth_generate(config: SynthConfig) -> tuple[EventStream, list[PupilLabel]]:
    """Generate a seeded synthetic event stream and its 100 Hz labels.

    The center trajectory is sampled at the 100 Hz label grid and events are
    emitted around the *piecewise-linear interpolation of those knots*, so
    with zero noise every event lies within ``ring_radius + 1`` px of the
    interpolated label at its timestamp, saccades included. Identical seeds
    give bit-identical output.
    """
    rng = np.random.default_rng(config.seed)
    w, h = config.resolution
    duration_us = config.duration_ms * 1000
    n_knots = duration_us // LABEL_PERIOD_US + 1
    knot_t = np.arange(n_knots, dtype=np.int64) * LABEL_PERIOD_US
    t_s = knot_t / 1e6

    def axis_path(center, amps, freqs, phases):
        out = np.full(n_knots, center, dtype=np.float64)
        phases = tuple(phases) + (0.0,) * (len(amps) - len(phases))
        for a, f, ph in zip(amps, freqs, phases):
            out += a * np.sin(2 * np.pi * f * t_s + ph)
        return out

    cx = axis_path(w / 2, config.amp_x, config.freq_x, config.phase_x)
    cy = axis_path(h / 2, config.amp_y, config.freq_y, config.phase_y)

    # Saccades: persistent jumps applied at every knot after the saccade time.
    if config.saccade_rate > 0:
        n_sac = rng.poisson(config.saccade_rate * duration_us / 1e6)
        sac_t = np.sort(rng.uniform(0, duration_us, size=n_sac))
        sac_theta = rng.uniform(0, 2 * np.pi, size=n_sac)
        for st, th in zip(sac_t, sac_theta):
            after = knot_t >= st
            cx[after] += config.saccade_magnitude * np.cos(th)
            cy[after] += config.saccade_magnitude * np.sin(th)

    # Keep the whole ring inside the frame so rounded events never clamp.
    margin = config.ring_radius + 1.0
    cx = np.clip(cx, margin, w - 1 - margin)
    cy = np.clip(cy, margin, h - 1 - margin)

    seg_dt = LABEL_PERIOD_US / 1e6
    speed = np.hypot(np.diff(cx), np.diff(cy)) / seg_dt  # px/s per segment
    rates = config.rate_gain * speed + config.rate_floor

    all_t, all_x, all_y = [], [], []
    for k in range(n_knots - 1):
        n_ev = rng.poisson(rates[k] * seg_dt)
        if n_ev == 0:
            continue
        t = rng.integers(knot_t[k], knot_t[k + 1], size=n_ev)
        frac = (t - knot_t[k]) / LABEL_PERIOD_US
        ex = cx[k] + frac * (cx[k + 1] - cx[k])
        ey = cy[k] + frac * (cy[k + 1] - cy[k])
        theta = rng.uniform(0, 2 * np.pi, size=n_ev)
        all_t.append(t)
        all_x.append(np.rint(ex + config.ring_radius * np.cos(theta)))
        all_y.append(np.rint(ey + config.ring_radius * np.sin(theta)))

    if config.noise_rate > 0:
        n_noise = rng.poisson(config.noise_rate * duration_us / 1e6)
        if n_noise:
            all_t.append(rng.integers(0, duration_us, size=n_noise))
            all_x.append(rng.integers(0, w, size=n_noise).astype(np.float64))
            all_y.append(rng.integers(0, h, size=n_noise).astype(np.float64))

    if all_t:
        ts = np.concatenate(all_t).astype(np.int64)
        xs = np.clip(np.concatenate(all_x), 0, w - 1).astype(np.int32)
        ys = np.clip(np.concatenate(all_y), 0, h - 1).astype(np.int32)
        ps = (2 * rng.integers(0, 2, size=len(ts)) - 1).astype(np.int8)
        order = np.argsort(ts, kind="stable")
        stream = EventStream(ts[order], xs[order], ys[order], ps[order], (w, h))
    else:
        stream = EventStream.from_arrays(
            np.empty(0), np.empty(0), np.empty(0), np.empty(0), (w, h)
        )

    labels = [
        PupilLabel(int(t), float(x), float(y), True) for t, x, y in zip(knot_t, cx, cy)
    ]
    return stream, labels
