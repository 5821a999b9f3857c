"""The point-network model, its loss, training loop, and cost accounting.

Per sample (one event window): a hierarchy of FPS/KNN stages turns N
normalized points into M_last centroid features (per-group standardize ->
member MLP -> attention pool), a bidirectional LSTM over the time-sorted
centroids plus attention pooling gives one sample feature, and a causal
LSTM across the S samples of a sequence feeds a linear regressor that
predicts normalized pupil coordinates.

Geometry (FPS/KNN indices, centroid coordinates, temporal sort) depends
only on the input points, never on parameters, so it is precomputed by the
pipeline module and consumed here as constants.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from fapnet.autodiff import (
    AdamW,
    AttentionPool,
    BiLstm,
    Linear,
    LstmParams,
    MlpBlock,
    Parameter,
    Tensor,
    concat,
    lstm_forward,
    no_grad,
    save_checkpoint,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``resolution`` is the label coordinate space (w, h); it scales targets
    and predictions but never enters parameter or FLOP counts. Stage s
    samples ``stage_centroids[s]`` centroids with ``knn_k`` neighbors and
    an extractor of width ``dims[s]``.
    """

    n_points: int = 1024
    stage_centroids: tuple[int, ...] = (256, 64, 16)
    knn_k: int = 16
    dims: tuple[int, ...] = (32, 64, 128)
    ig_hidden: int = 64  # per-direction hidden size of the inter-group BiLSTM
    is_hidden: int = 128  # inter-sample LSTM hidden size
    use_inter_sample: bool = True
    seq_len: int = 20
    include_polarity: bool = False
    activation: str = "relu"
    resolution: tuple[int, int] = (240, 180)
    clamp_eval: bool = True  # clamp eval predictions into [0,1] normalized space

    def __post_init__(self) -> None:
        if not self.dims or len(self.dims) != len(self.stage_centroids):
            raise ValueError("dims and stage_centroids must be nonempty, equal length")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        pool = self.n_points
        for m in self.stage_centroids:
            if not 1 <= m <= pool:
                raise ValueError(f"stage centroid count {m} exceeds available {pool}")
            if self.knn_k > pool:
                raise ValueError(f"knn_k {self.knn_k} exceeds available points {pool}")
            pool = m
        if min(self.n_points, self.knn_k, self.ig_hidden, self.is_hidden) < 1:
            raise ValueError("sizes must be >= 1")

    @property
    def point_channels(self) -> int:
        return 4 if self.include_polarity else 3

    @property
    def feature_width(self) -> int:
        """Width of the per-sample feature entering the regressor head."""
        return self.is_hidden if self.use_inter_sample else 2 * self.ig_hidden

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            "fapnet": {},
            # larger no-recurrence-across-samples variant
            "pepnet": {
                "dims": (64, 128, 256),
                "ig_hidden": 128,
                "use_inter_sample": False,
            },
            "pepnet_tiny": {
                "dims": (16, 32, 64),
                "ig_hidden": 32,
                "use_inter_sample": False,
            },
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("stage_centroids", "dims", "resolution"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("stage_centroids", "dims", "resolution"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (100, 120)
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 256
    epochs: int = 140
    seed: int = 0
    w_x: float = 1.0
    w_y: float = 1.0
    grad_clip: float | None = None  # global-norm clip; off by default
    augment_invert: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not 0 < self.lr_drop_factor < 1:
            raise ValueError("lr_drop_factor must be in (0, 1)")
        if self.w_x < 0 or self.w_y < 0 or self.weight_decay < 0:
            raise ValueError("loss weights and weight decay must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Stepped learning rate for a 1-based epoch index."""
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr * self.lr_drop_factor**drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(d["lr_drop_epochs"])
        return d


@dataclass(frozen=True)
class Prediction:
    """Per-sequence output: normalized coordinates plus the pixel rescale."""

    normalized: np.ndarray  # (S, 2) in [0, 1] when clamped
    pixels: np.ndarray  # (S, 2) = normalized * (w, h)

    def __post_init__(self) -> None:
        self.normalized.setflags(write=False)
        self.pixels.setflags(write=False)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch}, batch {batch}; aborting"
        )
        self.epoch, self.batch = epoch, batch


def _standardize_groups(grouped: Tensor, centroid_coords: np.ndarray) -> Tensor:
    """In-graph per-group standardization with centroid context channels.

    ``grouped`` is (..., K, C); population std over K; zero-variance
    channels divide by 1 (the mask is a constant of the input values, which
    is consistent under differentiation because identical members stay
    identical under any parameter perturbation). ``centroid_coords``
    (..., 3) are appended to every member as constants.
    """
    mean = grouped.mean(axis=-2, keepdims=True)
    centered = grouped - mean
    var = (centered * centered).mean(axis=-2, keepdims=True)
    nz = (var.values > 0).astype(grouped.dtype.type)
    safe_var = var * Tensor(nz) + Tensor(1.0 - nz)
    z = centered / safe_var.sqrt()
    k = grouped.shape[-2]
    ctx = np.broadcast_to(
        centroid_coords[..., None, :].astype(grouped.dtype.type),
        grouped.shape[:-1] + (centroid_coords.shape[-1],),
    )
    return concat([z, Tensor(np.ascontiguousarray(ctx))], axis=-1)


class _Stage:
    """One sampling/grouping level: member MLP + attention pool."""

    def __init__(self, d_in: int, d_out: int, activation: str, rng, dtype):
        self.mlp = MlpBlock([d_in, d_out, d_out], rng, activation, dtype)
        self.pool = AttentionPool(d_out, rng, dtype)

    def params(self):
        return [(f"mlp.{n}", p) for n, p in self.mlp.params()] + [
            (f"pool.{n}", p) for n, p in self.pool.params()
        ]


class FapNet:
    """Hierarchical point network with long/short temporal aggregation."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.stages: list[_Stage] = []
        d_prev = config.point_channels
        for d in config.dims:
            self.stages.append(_Stage(d_prev + 3, d, config.activation, rng, dtype))
            d_prev = d
        self.ig = BiLstm(d_prev, config.ig_hidden, rng, dtype)
        self.ig_pool = AttentionPool(2 * config.ig_hidden, rng, dtype)
        self.is_lstm = None
        if config.use_inter_sample:
            self.is_lstm = LstmParams(2 * config.ig_hidden, config.is_hidden, rng, dtype)
        width = config.feature_width
        self.head_proj = Linear(width, width, rng, dtype)
        self.regressor = Linear(width, 2, rng, dtype)

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for i, st in enumerate(self.stages):
            out += [(f"stages.{i}.{n}", p) for n, p in st.params()]
        out += [(f"ig.{n}", p) for n, p in self.ig.params()]
        out += [(f"ig_pool.{n}", p) for n, p in self.ig_pool.params()]
        if self.is_lstm is not None:
            out += [(f"is_lstm.{n}", p) for n, p in self.is_lstm.params()]
        out += [(f"head_proj.{n}", p) for n, p in self.head_proj.params()]
        out += [(f"regressor.{n}", p) for n, p in self.regressor.params()]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Install checkpoint arrays; mismatched key sets or shapes error."""
        own = dict(self.named_params())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(
                f"checkpoint/model parameter mismatch: missing={missing} extra={extra}"
            )
        for name, p in own.items():
            if tuple(arrays[name].shape) != p.shape:
                raise ValueError(
                    f"parameter {name!r} shape {arrays[name].shape} != {p.shape}"
                )
            p.values = arrays[name].astype(self.dtype)

    # -- forward --------------------------------------------------------------

    def forward(self, batch) -> Tensor:
        """Batch of B sequences -> (S, B, 2) normalized predictions.

        ``batch`` supplies ``points`` (B, S, N, C) and the precomputed
        geometry: per stage ``neighbor_idx`` (B*S, M, K) into the previous
        level's rows and ``centroid_coords`` (B*S, M, 3); plus ``sort_idx``
        (B*S, M_last) ordering final centroids by time.
        """
        b, s, n, c = batch.points.shape
        rows = b * s
        feats = Tensor(batch.points.reshape(rows, n, c).astype(self.dtype))
        row_idx3 = np.arange(rows)[:, None, None]
        for stage, (neighbor_idx, centroid_coords) in zip(self.stages, batch.geometry):
            grouped = feats[row_idx3, neighbor_idx]  # (rows, M, K, C)
            std = _standardize_groups(grouped, centroid_coords)
            members = stage.mlp(std)  # (rows, M, K, d)
            feats = stage.pool(members)  # (rows, M, d)
        feats = feats[np.arange(rows)[:, None], batch.sort_idx]  # time-sorted
        steps = feats.transpose((1, 0, 2))  # (M, rows, d)
        ig_out = self.ig(steps)  # (M, rows, 2H)
        sample_feat = self.ig_pool(ig_out.transpose((1, 0, 2)))  # (rows, 2H)
        seq = sample_feat.reshape(b, s, sample_feat.shape[-1]).transpose((1, 0, 2))
        if self.is_lstm is not None:
            seq, _ = lstm_forward(seq, self.is_lstm)  # (S, B, H), causal
        return self.regressor(self.head_proj(seq))  # (S, B, 2)

    def predict(self, batch) -> np.ndarray:
        """Inference: (B, S, 2) normalized predictions, no graph, clamped."""
        with no_grad():
            out = self.forward(batch).values
        out = np.transpose(out, (1, 0, 2))
        if self.config.clamp_eval:
            out = np.clip(out, 0.0, 1.0)
        return out

    def prediction(self, normalized: np.ndarray) -> Prediction:
        w, h = self.config.resolution
        return Prediction(
            np.array(normalized, dtype=np.float64),
            np.array(normalized, dtype=np.float64) * np.array([w, h]),
        )


def wmse_loss(
    pred: Tensor,
    labels: np.ndarray,
    w_x: float = 1.0,
    w_y: float = 1.0,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Per-axis weighted MSE over masked entries, in normalized space.

    loss = w_x * mean(dx^2) + w_y * mean(dy^2), means over entries where
    ``mask`` is true. An all-masked batch is an error, not a zero.
    """
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"pred shape {pred.shape} != labels shape {labels.shape}")
    if mask is None:
        mask = np.ones(labels.shape[:-1], dtype=bool)
    count = float(mask.sum())
    if count == 0:
        raise ValueError("wmse_loss: every entry is masked out")
    m = Tensor(mask.astype(pred.dtype.type))
    diff = pred - Tensor(labels.astype(pred.dtype.type))
    mean_dx2 = ((diff[..., 0] ** 2) * m).sum() / count
    mean_dy2 = ((diff[..., 1] ** 2) * m).sum() / count
    return w_x * mean_dx2 + w_y * mean_dy2


# -- training loop ----------------------------------------------------------------


@dataclass
class FitResult:
    model: "FapNet"
    log: list[dict]
    best_epoch: int
    best_val: float
    checkpoint_path: Path | None


def _val_stats(model: FapNet, batches, w_x, w_y, eval_resolution) -> dict:
    """WMSE + pixel metrics over validation batches (no graph)."""
    wx, hy = eval_resolution
    losses, weights, dists = [], [], []
    for batch in batches:
        with no_grad():
            pred = model.forward(batch)
        mask = batch.mask_sb
        losses.append(
            float(wmse_loss(pred, batch.labels_sb, w_x, w_y, mask).values)
        )
        weights.append(int(mask.sum()))
        p = pred.values
        if model.config.clamp_eval:
            p = np.clip(p, 0.0, 1.0)
        d = (p - batch.labels_sb) * np.array([wx, hy], dtype=p.dtype)
        dists.append(np.hypot(d[..., 0], d[..., 1])[mask])
    dist = np.concatenate(dists)
    total = sum(weights)
    loss = float(np.dot(losses, weights) / total) if total else float("nan")
    return {
        "val_wmse": loss,
        "p3": float(np.mean(dist <= 3.0)),
        "p5": float(np.mean(dist <= 5.0)),
        "p10": float(np.mean(dist <= 10.0)),
        "mean_px": float(dist.mean()),
        "mean_sq_px2": float(np.mean(dist**2)),
    }


def fit(
    train_batches_fn,
    val_batches,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    eval_resolution: tuple[int, int] | None = None,
    meta: dict | None = None,
) -> FitResult:
    """Mini-batch AdamW training with the stepped lr schedule.

    ``train_batches_fn(rng)`` yields the epoch's batches (the callable
    owns shuffling, so data order is reproducible from the seed);
    ``val_batches`` is a fixed list. Emits one JSON log record per epoch;
    aborts on non-finite loss; keeps the best-validation checkpoint.
    """
    rng = np.random.default_rng(train_config.seed)
    model = FapNet(model_config, rng)
    params = model.named_params()
    opt = AdamW(
        [p for _, p in params],
        lr=train_config.lr,
        weight_decay=train_config.weight_decay,
    )
    eval_resolution = eval_resolution or model_config.resolution
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "best.ckpt" if out_dir else None
    log_path = out_dir / "train_log.jsonl" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    log: list[dict] = []
    best_val, best_epoch = float("inf"), 0
    ckpt_meta = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        **(meta or {}),
    }
    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = train_config.lr_at(epoch)
        batch_losses, batch_sizes = [], []
        for b_idx, batch in enumerate(train_batches_fn(rng)):
            out = model.forward(batch)
            loss = wmse_loss(
                out, batch.labels_sb, train_config.w_x, train_config.w_y, batch.mask_sb
            )
            loss_val = float(loss.values)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, b_idx, loss_val)
            opt.zero_grad()
            loss.backward()
            if train_config.grad_clip is not None:
                total = np.sqrt(
                    sum(float((p.grad**2).sum()) for p in opt.params if p.grad is not None)
                )
                if total > train_config.grad_clip:
                    scale = train_config.grad_clip / total
                    for p in opt.params:
                        if p.grad is not None:
                            p.grad = p.grad * scale
            opt.step()
            batch_losses.append(loss_val)
            batch_sizes.append(int(batch.mask_sb.sum()))
        stats = _val_stats(
            model, val_batches, train_config.w_x, train_config.w_y, eval_resolution
        )
        record = {
            "epoch": epoch,
            "lr": opt.lr,
            "train_wmse": float(np.dot(batch_losses, batch_sizes) / sum(batch_sizes)),
            **stats,
            "wall_s": round(time.perf_counter() - t0, 4),
        }
        log.append(record)
        if log_path:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if stats["val_wmse"] < best_val:
            best_val, best_epoch = stats["val_wmse"], epoch
            if ckpt_path:
                save_checkpoint(
                    ckpt_path,
                    params,
                    {**ckpt_meta, "epoch": epoch, "val_wmse": best_val},
                )
    return FitResult(model, log, best_epoch, best_val, ckpt_path)


# -- analytic cost model ------------------------------------------------------------


def count_params_flops(config: ModelConfig) -> tuple[int, int]:
    """Analytic parameter and forward-FLOP counts for one sample.

    Conventions: a multiply-add is 2 FLOPs; activations and other
    elementwise ops are 1 FLOP per element. The sensor resolution never
    appears below, so counts are resolution-independent by construction.
    """

    def linear_p(d, e):
        return d * e + e

    def linear_f(rows, d, e):
        return rows * (2 * d * e + e)

    def lstm_p(d, h):
        return 4 * h * d + 4 * h * h + 4 * h

    def lstm_f_step(d, h):
        # gates (two matmuls + bias) then 4 nonlinearities + cell/output arith
        return 8 * h * (d + h) + 4 * h + 9 * h

    def pool_f(groups, k, d):
        # scorer per member, softmax per group (exp/sub/sum/div), weighted sum
        return groups * (k * (2 * d + 1) + 4 * k + 2 * k * d)

    params = 0
    flops = 0
    k = config.knn_k
    d_prev = config.point_channels
    prev_count = config.n_points
    for d, m in zip(config.dims, config.stage_centroids):
        d_in = d_prev + 3
        # standardize: mean, center, square, var, sqrt, divide per channel
        flops += m * d_prev * (5 * k + 3)
        rows = m * k
        params += linear_p(d_in, d) + linear_p(d, d) + linear_p(d_in, d)  # 2 layers + proj
        flops += linear_f(rows, d_in, d) + linear_f(rows, d, d) + linear_f(rows, d_in, d)
        flops += rows * d * 2  # two activations
        flops += rows * d  # residual add
        params += linear_p(d, 1)  # pool scorer
        flops += pool_f(m, k, d)
        d_prev, prev_count = d, m
    # inter-group BiLSTM + attention pool over final centroids
    h = config.ig_hidden
    params += 2 * lstm_p(d_prev, h)
    flops += 2 * prev_count * lstm_f_step(d_prev, h)
    params += linear_p(2 * h, 1)
    flops += pool_f(1, prev_count, 2 * h)
    d_sample = 2 * h
    # inter-sample LSTM: one step per sample
    if config.use_inter_sample:
        params += lstm_p(d_sample, config.is_hidden)
        flops += lstm_f_step(d_sample, config.is_hidden)
    width = config.feature_width
    params += linear_p(width, width) + linear_p(width, 2)
    flops += linear_f(1, width, width) + linear_f(1, width, 2)
    return params, flops
