import numpy as np
import pytest

from fapnet.data_io import SynthConfig, synth_generate
from fapnet.model import ModelConfig
from fapnet.pipeline import batch_iter, collate, prepare_stream
from fapnet.windowing import WindowingConfig

MODEL = ModelConfig(
    n_points=32,
    stage_centroids=(16, 8),
    knn_k=8,
    dims=(8, 8),
    ig_hidden=4,
    is_hidden=8,
    seq_len=4,
    resolution=(64, 48),
)
WIN = WindowingConfig(window_ms=10, max_window_ms=40, expand_step_ms=5,
                      adaptive_threshold=64, seq_len=4)


@pytest.fixture(scope="module")
def synth():
    cfg = SynthConfig(resolution=(64, 48), duration_ms=400, rate_gain=300.0,
                      rate_floor=800.0, seed=12)
    return synth_generate(cfg)


def prep(synth, mode="train", augment=False, adaptive=True, seed=0,
         duration=400_000):
    stream, labels = synth
    return prepare_stream(stream, labels, WIN, MODEL,
                          np.random.default_rng(seed), adaptive=adaptive,
                          mode=mode, augment=augment, duration_us=duration)


class TestPrepareStream:
    def test_shapes_and_dtypes(self, synth):
        seqs = prep(synth)
        assert len(seqs) == 10  # 400 ms / 10 ms / seq_len 4
        q = seqs[0]
        assert q.points.shape == (4, 32, 3) and q.points.dtype == np.float32
        assert [n.shape for n in q.neighbors] == [(4, 16, 8), (4, 8, 8)]
        assert [c.shape for c in q.coords] == [(4, 16, 3), (4, 8, 3)]
        assert q.sort_idx.shape == (4, 8)
        assert q.labels_norm.shape == (4, 2)
        assert q.mask.shape == (4,) and q.real.shape == (4,)

    def test_labels_normalized_to_unit_square(self, synth):
        for q in prep(synth):
            assert np.all(q.labels_norm[q.mask] >= 0.0)
            assert np.all(q.labels_norm[q.mask] <= 1.0)

    def test_centers_follow_nominal_tiling(self, synth):
        seqs = prep(synth)
        centers = np.concatenate([q.centers for q in seqs])
        assert np.array_equal(centers, np.arange(40) * 10_000 + 5_000)

    def test_sort_idx_orders_final_centroids_by_time(self, synth):
        for q in prep(synth)[:3]:
            for s in range(len(q)):
                t_sorted = q.coords[-1][s][q.sort_idx[s], 2]
                assert np.all(np.diff(t_sorted) >= 0)

    def test_base_counts_are_pre_expansion(self, synth):
        stream, labels = synth
        from fapnet.windowing import split_fixed

        fixed = split_fixed(stream, labels, WIN, duration_us=400_000)
        counts = np.concatenate([q.base_counts for q in prep(synth)])
        assert np.array_equal(counts, [w.count for w in fixed][: len(counts)])

    def test_deterministic_given_seed(self, synth):
        a = prep(synth, seed=3)
        b = prep(synth, seed=3)
        for qa, qb in zip(a, b):
            assert np.array_equal(qa.points, qb.points)
            assert np.array_equal(qa.sort_idx, qb.sort_idx)

    def test_train_mode_all_real(self, synth):
        for q in prep(synth):
            assert q.real.all()

    def test_eval_mode_marks_padding(self):
        cfg = SynthConfig(resolution=(64, 48), duration_ms=90, rate_gain=300.0,
                          rate_floor=800.0, seed=12)
        seqs = prepare_stream(*synth_generate(cfg), WIN, MODEL,
                              np.random.default_rng(0), mode="eval",
                              duration_us=90_000)
        assert len(seqs) == 3  # ceil(9 / 4)
        assert seqs[-1].real.tolist() == [True, False, False, False]
        assert not seqs[-1].mask[1:].any()

    def test_augment_requires_train_mode(self, synth):
        with pytest.raises(ValueError):
            prep(synth, mode="eval", augment=True)

    def test_augment_interleaves_inverted_copies(self, synth):
        plain = prep(synth)
        both = prep(synth, augment=True)
        assert len(both) == 2 * len(plain)
        for orig, inv in zip(both[0::2], both[1::2]):
            assert np.array_equal(inv.base_counts, orig.base_counts[::-1])
            assert np.allclose(inv.labels_norm, orig.labels_norm[::-1])
            assert np.array_equal(inv.mask, orig.mask[::-1])

    def test_adaptive_toggle_changes_sparse_windows(self):
        cfg = SynthConfig(resolution=(64, 48), duration_ms=400, rate_gain=20.0,
                          rate_floor=100.0, seed=12)
        stream, labels = synth_generate(cfg)
        on = prepare_stream(stream, labels, WIN, MODEL, np.random.default_rng(0))
        off = prepare_stream(stream, labels, WIN, MODEL, np.random.default_rng(0),
                             adaptive=False)
        spans_on = np.concatenate([q.points[:, :, 2] for q in on])
        spans_off = np.concatenate([q.points[:, :, 2] for q in off])
        assert not np.array_equal(spans_on, spans_off)


class TestCollate:
    def test_batch_shapes(self, synth):
        seqs = prep(synth)[:3]
        batch = collate(seqs)
        assert batch.points.shape == (3, 4, 32, 3)
        assert batch.geometry[0][0].shape == (12, 16, 8)
        assert batch.geometry[1][1].shape == (12, 8, 3)
        assert batch.sort_idx.shape == (12, 8)
        assert batch.labels_sb.shape == (4, 3, 2)
        assert batch.mask_sb.shape == (4, 3)

    def test_transposition_keeps_pairing(self, synth):
        seqs = prep(synth)[:2]
        batch = collate(seqs)
        for b, q in enumerate(seqs):
            assert np.array_equal(batch.labels_sb[:, b], q.labels_norm)
            assert np.array_equal(batch.mask_sb[:, b], q.mask)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            collate([])


class TestBatchIter:
    def test_preserves_order_without_rng(self, synth):
        seqs = prep(synth)
        batches = list(batch_iter(seqs, 4))
        assert len(batches) == 3
        assert [b.points.shape[0] for b in batches] == [4, 4, 2]
        assert np.array_equal(batches[0].points[0], seqs[0].points)

    def test_shuffles_with_rng(self, synth):
        seqs = prep(synth)
        plain = np.concatenate([b.points for b in batch_iter(seqs, 4)])
        mixed = np.concatenate(
            [b.points for b in batch_iter(seqs, 4, np.random.default_rng(1))]
        )
        assert not np.array_equal(plain, mixed)
        # same multiset of sequences, just reordered
        key = lambda arr: tuple(np.round(arr.ravel()[:8], 6).tolist())
        assert sorted(map(key, plain)) == sorted(map(key, mixed))
