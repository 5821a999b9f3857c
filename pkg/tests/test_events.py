import numpy as np
import pytest

from fapnet.events import EventStream, PupilLabel, Sequence, PointSample, Window, validate_stream

from conftest import make_stream


def test_stream_columns_and_len():
    s = make_stream([1, 2, 3], xs=[4, 5, 6], ys=[7, 8, 9], ps=[1, -1, 1])
    assert len(s) == 3
    assert s.event(1).x == 5 and s.event(1).polarity == -1
    assert [e.t for e in s] == [1, 2, 3]


def test_stream_arrays_read_only():
    s = make_stream([1, 2])
    with pytest.raises(ValueError):
        s.ts[0] = 5


def test_stream_rejects_ragged_columns():
    with pytest.raises(ValueError):
        EventStream(
            np.array([1, 2], dtype=np.int64),
            np.array([0], dtype=np.int32),
            np.array([0, 0], dtype=np.int32),
            np.array([1, 1], dtype=np.int8),
            (10, 10),
        )


def test_duration_is_last_timestamp_plus_one():
    assert make_stream([0, 5, 41]).duration_us == 42
    assert make_stream([]).duration_us == 0


def test_validate_stream_clean():
    s = make_stream([0, 1, 1, 2], xs=[0, 1, 2, 3], ys=[0, 0, 1, 1])
    assert validate_stream(s) == []


def test_validate_stream_reports_violations_by_index():
    s = make_stream(
        [5, 3, 10],
        xs=[0, 500, 1],
        ys=[0, 0, 0],
        ps=[1, 1, 3],
        resolution=(240, 180),
    )
    msgs = validate_stream(s)
    assert any("event 1" in m and "decreases" in m for m in msgs)
    assert any("event 1" in m and "x=500" in m for m in msgs)
    assert any("event 2" in m and "polarity" in m for m in msgs)
    indices = [int(m.split()[1].rstrip(":")) for m in msgs]
    assert indices == sorted(indices)


def test_window_slices_and_count():
    s = make_stream([0, 2, 4, 9, 12], xs=[1, 2, 3, 4, 5])
    w = Window(s, 0, 10, 0, 4, PupilLabel(5, 1.0, 1.0), 5)
    assert w.count == 4
    assert list(w.xs) == [1, 2, 3, 4]
    assert w.span_us == 10


def test_window_center_containment_enforced():
    s = make_stream([0])
    with pytest.raises(ValueError):
        Window(s, 0, 10, 0, 1, None, 11)


def test_sequence_default_mask_and_length_checks():
    pts = np.zeros((4, 3))
    samples = [PointSample(pts.copy(), (0.0, 0.0)) for _ in range(3)]
    seq = Sequence(samples, np.zeros((3, 2)))
    assert seq.mask.all() and len(seq) == 3
    with pytest.raises(ValueError):
        Sequence(samples, np.zeros((2, 2)))
