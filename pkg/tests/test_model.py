import numpy as np
import pytest

from fapnet.autodiff import AdamW, Tensor, load_checkpoint, save_checkpoint
from fapnet.model import (
    FapNet,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    count_params_flops,
    fit,
    wmse_loss,
)
from fapnet.pipeline import Batch, _sequence_geometry

TINY = ModelConfig(
    n_points=16,
    stage_centroids=(8, 4),
    knn_k=4,
    dims=(8, 8),
    ig_hidden=4,
    is_hidden=6,
    seq_len=3,
    resolution=(64, 48),
)


def random_batch(rng, config=TINY, b=2, labels=None):
    """Synthetic Batch with genuine FPS/KNN geometry over random points."""
    s, n = config.seq_len, config.n_points
    pts = rng.random((b, s, n, config.point_channels)).astype(np.float32)
    stages = [[] for _ in config.stage_centroids]
    coords = [[] for _ in config.stage_centroids]
    sort = []
    for bi in range(b):
        nb, cc, si = _sequence_geometry(pts[bi], config)
        for st in range(len(nb)):
            stages[st].append(nb[st])
            coords[st].append(cc[st])
        sort.append(si)
    geometry = [
        (np.concatenate(stages[st]), np.concatenate(coords[st]))
        for st in range(len(stages))
    ]
    if labels is None:
        labels = rng.random((s, b, 2))
    return Batch(pts, geometry, np.concatenate(sort), labels, np.ones((s, b), bool))


class TestModelConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(dims=(32, 64), stage_centroids=(256, 64, 16))
        with pytest.raises(ValueError):
            ModelConfig(n_points=64, stage_centroids=(128,), dims=(32,))
        with pytest.raises(ValueError):
            ModelConfig(n_points=64, stage_centroids=(8,), dims=(32,), knn_k=65)
        with pytest.raises(ValueError):
            ModelConfig(seq_len=0)

    def test_feature_width_follows_inter_sample_toggle(self):
        assert ModelConfig(is_hidden=128).feature_width == 128
        assert ModelConfig(use_inter_sample=False, ig_hidden=64).feature_width == 128

    def test_point_channels(self):
        assert ModelConfig().point_channels == 3
        assert ModelConfig(include_polarity=True).point_channels == 4

    def test_presets(self):
        assert ModelConfig.preset("fapnet") == ModelConfig()
        pep = ModelConfig.preset("pepnet")
        assert not pep.use_inter_sample and pep.dims == (64, 128, 256)
        tiny = ModelConfig.preset("pepnet_tiny", seq_len=5)
        assert tiny.dims == (16, 32, 64) and tiny.seq_len == 5
        with pytest.raises(ValueError):
            ModelConfig.preset("resnet")

    def test_dict_round_trip(self):
        cfg = ModelConfig.preset("fapnet", n_points=512, resolution=(346, 260))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestTrainConfig:
    def test_stepped_lr(self):
        cfg = TrainConfig(lr=1e-2, lr_drop_epochs=(3, 5), lr_drop_factor=0.1)
        assert cfg.lr_at(1) == pytest.approx(1e-2)
        assert cfg.lr_at(3) == pytest.approx(1e-3)
        assert cfg.lr_at(4) == pytest.approx(1e-3)
        assert cfg.lr_at(5) == pytest.approx(1e-4)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_drop_factor=1.0)
        with pytest.raises(ValueError):
            TrainConfig(weight_decay=-1.0)


class TestWmseLoss:
    def _pred(self, arr):
        return np.asarray(arr, dtype=np.float64)

    def test_constant_offset(self):
        pred = Tensor(self._pred([[[2.0, 2.0]]]))
        labels = np.zeros((1, 1, 2))
        assert wmse_loss(pred, labels).values == pytest.approx(8.0)
        assert wmse_loss(pred, labels, w_x=0.5, w_y=0.5).values == pytest.approx(4.0)

    def test_axis_weights_separate(self):
        pred = Tensor(self._pred([[[1.0, 0.0]]]))
        labels = np.array([[[0.0, 1.0]]])
        assert wmse_loss(pred, labels, w_x=2.0, w_y=3.0).values == pytest.approx(5.0)

    def test_perfect_prediction_is_zero(self, rng):
        labels = rng.random((3, 2, 2))
        assert wmse_loss(Tensor(labels.copy()), labels).values == pytest.approx(0.0)

    def test_mask_excludes_entries(self):
        pred = Tensor(self._pred([[[1.0, 1.0]], [[9.0, 9.0]]]))
        labels = np.zeros((2, 1, 2))
        mask = np.array([[True], [False]])
        assert wmse_loss(pred, labels, mask=mask).values == pytest.approx(2.0)

    def test_all_masked_is_error(self):
        with pytest.raises(ValueError):
            wmse_loss(Tensor(np.zeros((1, 1, 2))), np.zeros((1, 1, 2)),
                      mask=np.zeros((1, 1), bool))

    def test_shape_mismatch_is_error(self):
        with pytest.raises(ValueError):
            wmse_loss(Tensor(np.zeros((2, 1, 2))), np.zeros((1, 1, 2)))


class TestForward:
    def test_output_shape(self, rng):
        model = FapNet(TINY, np.random.default_rng(0))
        batch = random_batch(rng)
        out = model.forward(batch)
        assert out.shape == (TINY.seq_len, 2, 2)

    def test_predict_clamps_and_transposes(self, rng):
        model = FapNet(TINY, np.random.default_rng(0))
        batch = random_batch(rng)
        pred = model.predict(batch)
        assert pred.shape == (2, TINY.seq_len, 2)
        assert pred.min() >= 0.0 and pred.max() <= 1.0

    def test_inter_sample_recurrence_is_causal(self, rng):
        model = FapNet(TINY, np.random.default_rng(0))
        base = random_batch(np.random.default_rng(1), b=1)
        # perturb only the final sample's points; earlier steps must not move
        pts = base.points.copy()
        pts[0, -1] = np.random.default_rng(2).random(pts.shape[2:]).astype(np.float32)
        changed_geo = _sequence_geometry(pts[0], TINY)
        changed = Batch(
            pts,
            [(nb, cc) for nb, cc in zip(changed_geo[0], changed_geo[1])],
            changed_geo[2],
            base.labels_sb,
            base.mask_sb,
        )
        out_a = model.forward(base).values
        out_b = model.forward(changed).values
        assert np.allclose(out_a[:-1], out_b[:-1], atol=1e-7)
        assert not np.allclose(out_a[-1], out_b[-1])

    def test_without_inter_sample_steps_are_independent(self, rng):
        cfg = ModelConfig(
            n_points=16, stage_centroids=(8, 4), knn_k=4, dims=(8, 8),
            ig_hidden=4, use_inter_sample=False, seq_len=3, resolution=(64, 48),
        )
        model = FapNet(cfg, np.random.default_rng(0))
        base = random_batch(np.random.default_rng(1), config=cfg, b=1)
        pts = base.points.copy()
        pts[0, 0] = np.random.default_rng(2).random(pts.shape[2:]).astype(np.float32)
        geo = _sequence_geometry(pts[0], cfg)
        changed = Batch(pts, list(zip(geo[0], geo[1])), geo[2],
                        base.labels_sb, base.mask_sb)
        out_a = model.forward(base).values
        out_b = model.forward(changed).values
        assert not np.allclose(out_a[0], out_b[0])
        assert np.allclose(out_a[1:], out_b[1:], atol=1e-7)

    def test_forward_deterministic(self, rng):
        batch = random_batch(rng)
        a = FapNet(TINY, np.random.default_rng(3)).forward(batch).values
        b = FapNet(TINY, np.random.default_rng(3)).forward(batch).values
        assert np.array_equal(a, b)

    def test_prediction_rescales_to_pixels(self):
        model = FapNet(TINY, np.random.default_rng(0))
        p = model.prediction(np.array([[0.5, 0.5]]))
        assert np.allclose(p.pixels, [[32.0, 24.0]])


class TestCheckpointIntegration:
    def test_save_load_round_trip_preserves_forward(self, tmp_path, rng):
        model = FapNet(TINY, np.random.default_rng(0))
        batch = random_batch(rng)
        before = model.forward(batch).values.copy()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.named_params(), {"note": "t"})
        fresh = FapNet(TINY, np.random.default_rng(99))
        _, arrays = load_checkpoint(path)
        fresh.load_arrays(arrays)
        assert np.allclose(fresh.forward(batch).values, before, atol=1e-7)

    def test_load_rejects_mismatched_keys(self, tmp_path):
        model = FapNet(TINY, np.random.default_rng(0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.named_params())
        _, arrays = load_checkpoint(path)
        del arrays["regressor.bias"]
        with pytest.raises(ValueError, match="missing"):
            model.load_arrays(arrays)
        _, arrays = load_checkpoint(path)
        arrays["bogus"] = np.zeros(1, dtype=np.float32)
        with pytest.raises(ValueError, match="extra"):
            model.load_arrays(arrays)

    def test_load_rejects_wrong_shape(self, tmp_path):
        model = FapNet(TINY, np.random.default_rng(0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.named_params())
        _, arrays = load_checkpoint(path)
        arrays["regressor.bias"] = np.zeros(7, dtype=np.float32)
        with pytest.raises(ValueError, match="shape"):
            model.load_arrays(arrays)


class TestCostModel:
    @pytest.mark.parametrize(
        "config",
        [
            TINY,
            ModelConfig.preset("fapnet"),
            ModelConfig.preset("pepnet_tiny"),
            ModelConfig(include_polarity=True),
            ModelConfig(use_inter_sample=False),
        ],
        ids=["tiny", "fapnet", "pepnet_tiny", "polarity", "no_inter_sample"],
    )
    def test_analytic_params_match_actual(self, config):
        analytic, _ = count_params_flops(config)
        model = FapNet(config, np.random.default_rng(0))
        actual = sum(p.values.size for _, p in model.named_params())
        assert analytic == actual

    def test_resolution_never_enters_counts(self):
        a = count_params_flops(ModelConfig(resolution=(180, 240)))
        b = count_params_flops(ModelConfig(resolution=(640, 480)))
        assert a == b

    def test_flops_scale_with_group_size_not_raw_points(self):
        base = count_params_flops(ModelConfig())[1]
        assert count_params_flops(ModelConfig(knn_k=32))[1] > base
        # geometry is precomputed outside the network, so the raw point
        # count affects preprocessing only, never the counted forward pass
        assert count_params_flops(ModelConfig(n_points=2048))[1] == base


class TestTraining:
    def _one_batch(self):
        rng = np.random.default_rng(42)
        labels = np.tile(np.array([[[0.3, 0.6]]]), (TINY.seq_len, 1, 1))
        return random_batch(rng, b=1, labels=labels)

    def test_single_batch_overfit(self):
        batch = self._one_batch()
        model = FapNet(TINY, np.random.default_rng(0))
        opt = AdamW([p for _, p in model.named_params()], lr=5e-3)
        loss_val = np.inf
        for _ in range(300):
            loss = wmse_loss(model.forward(batch), batch.labels_sb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_val = float(loss.values)
        assert loss_val < 1e-4

    def test_fit_is_deterministic(self, tmp_path, rng):
        batches = [random_batch(np.random.default_rng(s), b=2) for s in range(3)]
        tcfg = TrainConfig(lr=1e-3, epochs=3, batch_size=2, seed=5,
                           lr_drop_epochs=(), weight_decay=0.0)

        def run():
            return fit(lambda r: iter(batches), batches[:1], TINY, tcfg)

        log_a = [r["train_wmse"] for r in run().log]
        log_b = [r["train_wmse"] for r in run().log]
        assert log_a == log_b

    def test_fit_writes_log_and_best_checkpoint(self, tmp_path):
        batches = [random_batch(np.random.default_rng(s), b=2) for s in range(2)]
        tcfg = TrainConfig(lr=1e-3, epochs=3, batch_size=2, seed=5, lr_drop_epochs=())
        result = fit(lambda r: iter(batches), batches[:1], TINY, tcfg,
                     out_dir=tmp_path, meta={"tag": "unit"})
        assert (tmp_path / "train_log.jsonl").exists()
        lines = (tmp_path / "train_log.jsonl").read_text().strip().split("\n")
        assert len(lines) == 3
        assert result.checkpoint_path.exists()
        header, _ = load_checkpoint(result.checkpoint_path)
        assert header["meta"]["epoch"] == result.best_epoch
        assert header["meta"]["tag"] == "unit"
        assert header["meta"]["model_config"]["n_points"] == TINY.n_points
        for key in ("epoch", "lr", "train_wmse", "val_wmse", "p3", "p5", "p10",
                    "mean_px", "mean_sq_px2", "wall_s"):
            assert key in result.log[0]

    def test_divergence_aborts(self):
        batch = self._one_batch()
        bad = Batch(batch.points, batch.geometry, batch.sort_idx,
                    np.full_like(batch.labels_sb, np.inf), batch.mask_sb)
        tcfg = TrainConfig(lr=1e-3, epochs=1, batch_size=1, lr_drop_epochs=())
        with pytest.raises(TrainingDiverged):
            fit(lambda r: iter([bad]), [batch], TINY, tcfg)

    def test_lr_schedule_applied_during_fit(self):
        batches = [random_batch(np.random.default_rng(0), b=1)]
        tcfg = TrainConfig(lr=1e-2, epochs=3, batch_size=1, seed=1,
                           lr_drop_epochs=(3,), lr_drop_factor=0.5)
        result = fit(lambda r: iter(batches), batches, TINY, tcfg)
        assert [r["lr"] for r in result.log] == [1e-2, 1e-2, 5e-3]
