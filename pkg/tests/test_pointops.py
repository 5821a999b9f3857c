import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fapnet.events import PupilLabel, Window
from fapnet.pointops import (
    build_grouping,
    downsample,
    fps,
    knn,
    normalize,
    prepare_sample,
    standardize_group,
)

from conftest import make_stream


def make_window(ts, xs=None, ys=None, ps=None, t0=0, t1=10_000,
                resolution=(16, 12), label=True):
    s = make_stream(ts, xs=xs, ys=ys, ps=ps, resolution=resolution)
    center = (t0 + t1) // 2
    lab = PupilLabel(center, 3.0, 4.0, True) if label else None
    return Window(s, t0, t1, 0, len(s), lab, center)


def fps_oracle(coords, m, start_index=0):
    """Exhaustive greedy max-min reference, ties to the lowest index."""
    coords = np.asarray(coords, dtype=np.float64)
    chosen = [start_index]
    for _ in range(m - 1):
        best_i, best_d = -1, -np.inf
        for i in range(len(coords)):
            if i in chosen:
                continue
            d = min(float(np.sum((coords[i] - coords[j]) ** 2)) for j in chosen)
            if d > best_d:
                best_i, best_d = i, d
        chosen.append(best_i)
    return np.array(chosen, dtype=np.int64)


def knn_oracle(coords, centroid_idx, k):
    """Sort-based reference: self first, then by (squared distance, index)."""
    coords = np.asarray(coords, dtype=np.float64)
    rows = []
    for c in centroid_idx:
        order = sorted(
            (float(np.sum((coords[i] - coords[c]) ** 2)), i)
            for i in range(len(coords))
            if i != c
        )
        rows.append([c] + [i for _, i in order[: k - 1]])
    return np.array(rows, dtype=np.int64)


class TestDownsample:
    def test_more_events_than_n_unique_subset_in_time_order(self, rng):
        w = make_window(np.arange(0, 10_000, 100))
        ps = downsample(w, 16, rng)
        assert ps.valid
        assert len(np.unique(ps.source_idx)) == 16
        assert np.all(np.diff(ps.points[:, 0]) >= 0)

    def test_fewer_events_keeps_all_and_fills(self, rng):
        w = make_window([100, 200, 300])
        ps = downsample(w, 8, rng)
        assert ps.valid
        assert set(ps.source_idx.tolist()) == {0, 1, 2}
        assert len(ps.source_idx) == 8
        assert np.all(np.diff(ps.points[:, 0]) >= 0)

    def test_exact_count_is_identity_up_to_order(self, rng):
        w = make_window([100, 200, 300])
        ps = downsample(w, 3, rng)
        assert ps.source_idx.tolist() == [0, 1, 2]

    def test_empty_window_sentinels(self, rng):
        w = make_window([], resolution=(16, 12))
        ps = downsample(w, 4, rng)
        assert not ps.valid
        assert ps.source_idx.tolist() == [-1] * 4
        assert np.allclose(ps.points, [[5_000.0, 8.0, 6.0, 0.0]] * 4)

    def test_deterministic_given_seed(self):
        w = make_window(np.arange(0, 10_000, 50))
        a = downsample(w, 32, np.random.default_rng(9))
        b = downsample(w, 32, np.random.default_rng(9))
        assert np.array_equal(a.source_idx, b.source_idx)

    def test_rejects_nonpositive_n(self, rng):
        with pytest.raises(ValueError):
            downsample(make_window([1]), 0, rng)

    def test_points_carry_event_values(self, rng):
        w = make_window([500], xs=[7], ys=[3], ps=[-1])
        ps = downsample(w, 2, rng)
        assert np.allclose(ps.points, [[500.0, 7.0, 3.0, -1.0]] * 2)


class TestNormalize:
    def test_basic_scaling(self):
        pts = np.array([[0.0, 8.0, 6.0, 1.0], [1_000.0, 16.0, 0.0, -1.0]])
        out = normalize(pts, 16, 12, 0.0, 1_000.0)
        assert np.allclose(out, [[0.5, 0.5, 0.0], [1.0, 0.0, 1.0]])

    def test_degenerate_time_span_maps_to_half(self):
        pts = np.array([[42.0, 0.0, 0.0, 1.0]])
        out = normalize(pts, 10, 10, 42.0, 42.0)
        assert out[0, 2] == 0.5

    def test_polarity_channel_passthrough(self):
        pts = np.array([[0.0, 1.0, 2.0, -1.0]])
        out = normalize(pts, 4, 4, 0.0, 1.0, include_polarity=True)
        assert out.shape == (1, 4) and out[0, 3] == -1.0

    def test_validation(self):
        pts = np.zeros((1, 4))
        with pytest.raises(ValueError):
            normalize(pts, 0, 4, 0.0, 1.0)
        with pytest.raises(ValueError):
            normalize(pts, 4, 4, 1.0, 0.0)


class TestPrepareSample:
    def test_shapes_and_unit_range(self, rng):
        w = make_window(np.arange(0, 10_000, 7), xs=np.arange(1429) % 16,
                        ys=np.arange(1429) % 12)
        s = prepare_sample(w, 64, rng)
        assert s.points.shape == (64, 3)
        assert s.points.min() >= 0.0 and s.points.max() <= 1.0
        assert s.label == (3.0, 4.0)
        assert s.valid

    def test_empty_window_invalid(self, rng):
        s = prepare_sample(make_window([]), 8, rng)
        assert not s.valid
        assert s.points.shape == (8, 3)

    def test_missing_label_invalid_with_nan(self, rng):
        s = prepare_sample(make_window([100], label=False), 4, rng)
        assert not s.valid
        assert np.isnan(s.label).all()

    def test_time_rescaled_to_downsampled_extent(self, rng):
        w = make_window([2_000, 4_000, 6_000])
        s = prepare_sample(w, 3, rng)
        assert np.allclose(s.points[:, 2], [0.0, 0.5, 1.0])

    def test_polarity_adds_channel(self, rng):
        s = prepare_sample(make_window([100, 200]), 4, rng, include_polarity=True)
        assert s.points.shape == (4, 4)


class TestFps:
    def test_line_picks_extremes_first(self):
        coords = np.array([[0.0], [1.0], [2.0], [10.0]])
        coords = np.hstack([coords, np.zeros((4, 2))])
        assert fps(coords, 3).tolist() == [0, 3, 2]

    def test_duplicates_never_repeat(self):
        coords = np.zeros((5, 3))
        assert sorted(fps(coords, 5).tolist()) == [0, 1, 2, 3, 4]

    def test_tie_break_lowest_index(self):
        # 1 and 2 are equidistant from 0; lowest index wins
        coords = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        assert fps(coords, 2).tolist() == [0, 1]

    def test_start_index_respected(self):
        coords = np.array([[0.0, 0, 0], [5.0, 0, 0], [9.0, 0, 0]])
        assert fps(coords, 2, start_index=2)[0] == 2

    def test_m_equals_n_is_permutation(self, rng):
        coords = rng.random((12, 3))
        assert sorted(fps(coords, 12).tolist()) == list(range(12))

    def test_validation(self):
        coords = np.zeros((3, 3))
        with pytest.raises(ValueError):
            fps(coords, 0)
        with pytest.raises(ValueError):
            fps(coords, 4)
        with pytest.raises(ValueError):
            fps(coords, 2, start_index=3)

    def test_matches_oracle_random(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 10))
            coords = rng.random((n, 3))
            m = int(rng.integers(1, n + 1))
            assert np.array_equal(fps(coords, m), fps_oracle(coords, m))


class TestKnn:
    def test_self_always_first(self, rng):
        coords = rng.random((20, 3))
        cidx = np.array([3, 17, 0])
        nn = knn(coords, cidx, 5)
        assert np.array_equal(nn[:, 0], cidx)

    def test_simple_line(self):
        coords = np.array([[0.0], [1.0], [3.0], [7.0]])
        coords = np.hstack([coords, np.zeros((4, 2))])
        nn = knn(coords, np.array([0]), 3)
        assert nn[0].tolist() == [0, 1, 2]

    def test_distance_tie_broken_by_index(self):
        coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0.5, 0, 0]])
        nn = knn(coords, np.array([0]), 4)
        assert nn[0].tolist() == [0, 3, 1, 2]

    def test_rows_are_distinct_indices(self, rng):
        coords = rng.random((16, 3))
        nn = knn(coords, np.arange(16), 16)
        for row in nn:
            assert sorted(row.tolist()) == list(range(16))

    def test_validation(self):
        coords = np.zeros((3, 3))
        with pytest.raises(ValueError):
            knn(coords, np.array([0]), 0)
        with pytest.raises(ValueError):
            knn(coords, np.array([0]), 4)

    def test_matches_oracle_random(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 12))
            coords = rng.random((n, 3))
            m = int(rng.integers(1, n + 1))
            cidx = rng.choice(n, size=m, replace=False)
            k = int(rng.integers(1, n + 1))
            assert np.array_equal(knn(coords, cidx, k), knn_oracle(coords, cidx, k))


class TestStandardizeGroup:
    def test_zero_mean_unit_population_std(self, rng):
        group = rng.random((6, 8, 3))
        ctx = rng.random((6, 3))
        out = standardize_group(group, ctx)
        assert out.shape == (6, 8, 6)
        assert np.allclose(out[..., :3].mean(axis=1), 0.0, atol=1e-12)
        assert np.allclose(out[..., :3].std(axis=1), 1.0, atol=1e-12)

    def test_zero_variance_channel_centered_not_scaled(self):
        group = np.ones((1, 4, 2))
        out = standardize_group(group, np.zeros((1, 3)))
        assert np.allclose(out[..., :2], 0.0)

    def test_centroid_context_broadcast(self):
        group = np.zeros((2, 3, 1))
        ctx = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
        out = standardize_group(group, ctx)
        assert np.allclose(out[0, :, 1:], [0.1, 0.2, 0.3])
        assert np.allclose(out[1, :, 1:], [0.4, 0.5, 0.6])


class TestBuildGrouping:
    def test_composition_matches_manual_steps(self, rng):
        coords = rng.random((32, 3))
        g = build_grouping(coords, coords, m=8, k=4)
        cidx = fps(coords, 8)
        nidx = knn(coords, cidx, 4)
        assert np.array_equal(g.centroid_idx, cidx)
        assert np.array_equal(g.neighbor_idx, nidx)
        assert np.allclose(
            g.features, standardize_group(coords[nidx], coords[cidx])
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            from fapnet.pointops import Grouping

            Grouping(np.arange(3), np.zeros((2, 4), dtype=np.int64), np.zeros((2, 4, 6)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30), data=st.data())
def test_fps_indices_distinct_and_start_first(seed, n, data):
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 3))
    m = data.draw(st.integers(1, n))
    start = data.draw(st.integers(0, n - 1))
    out = fps(coords, m, start)
    assert out[0] == start
    assert len(np.unique(out)) == m


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30), data=st.data())
def test_knn_rows_distinct_and_within_range(seed, n, data):
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 3))
    k = data.draw(st.integers(1, n))
    cidx = rng.choice(n, size=min(5, n), replace=False)
    out = knn(coords, cidx, k)
    assert out.shape == (len(cidx), k)
    assert np.all((out >= 0) & (out < n))
    for row in out:
        assert len(np.unique(row)) == k


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), count=st.integers(0, 50), n=st.integers(1, 32))
def test_downsample_always_returns_n_time_ordered_rows(seed, count, n):
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.integers(0, 10_000, size=count))
    w = make_window(ts)
    ps = downsample(w, n, rng)
    assert ps.points.shape == (n, 4)
    assert np.all(np.diff(ps.points[:, 0]) >= 0)
    assert ps.valid == (count > 0)
