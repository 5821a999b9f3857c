"""Stream -> training-ready sequences: windows, point sets, geometry, batches.

FPS/KNN geometry and the temporal sort of final-stage centroids depend only
on point coordinates, never on model parameters, so everything here is
computed once per sequence and reused across epochs. A PreparedSequence
also keeps each window's *pre-expansion* event count — the density axis of
the adaptive-vs-fixed analysis — and the nominal window centers for
trajectory output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fapnet.events import EventStream, PupilLabel
from fapnet.model import ModelConfig
from fapnet.pointops import fps, knn, prepare_sample
from fapnet.windowing import (
    SequenceWindows,
    WindowingConfig,
    augment_invert,
    expand_adaptive,
    make_sequences,
    split_fixed,
)


@dataclass(frozen=True)
class PreparedSequence:
    """One model-ready sequence of S samples with precomputed geometry."""

    points: np.ndarray  # (S, N, C) float32 normalized features
    neighbors: list[np.ndarray]  # per stage: (S, M, K) int64 into previous level
    coords: list[np.ndarray]  # per stage: (S, M, 3) float64 centroid coordinates
    sort_idx: np.ndarray  # (S, M_last) int64, final centroids by ascending t'
    labels_norm: np.ndarray  # (S, 2) float64, labels / stream resolution
    mask: np.ndarray  # (S,) bool: real window AND usable label/sample
    real: np.ndarray  # (S,) bool: not eval padding (label validity ignored)
    centers: np.ndarray  # (S,) int64 nominal window centers, µs
    base_counts: np.ndarray  # (S,) int64 pre-expansion event counts
    resolution: tuple[int, int]

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Batch:
    """Collated sequences with geometry folded to one leading (B*S) axis."""

    points: np.ndarray  # (B, S, N, C) float32
    geometry: list[tuple[np.ndarray, np.ndarray]]  # per stage (neighbors, coords)
    sort_idx: np.ndarray  # (B*S, M_last)
    labels_sb: np.ndarray  # (S, B, 2)
    mask_sb: np.ndarray  # (S, B) bool


def _sequence_geometry(
    points: np.ndarray, config: ModelConfig
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Per-sample FPS/KNN hierarchy over (S, N, C) normalized points."""
    s = len(points)
    coords = points[:, :, :3].astype(np.float64)
    neighbors, stage_coords = [], []
    for m in config.stage_centroids:
        nb = np.empty((s, m, config.knn_k), dtype=np.int64)
        cc = np.empty((s, m, 3), dtype=np.float64)
        for i in range(s):
            cent = fps(coords[i], m)
            nb[i] = knn(coords[i], cent, config.knn_k)
            cc[i] = coords[i][cent]
        neighbors.append(nb)
        stage_coords.append(cc)
        coords = cc
    sort_idx = np.argsort(coords[:, :, 2], axis=1, kind="stable").astype(np.int64)
    return neighbors, stage_coords, sort_idx


def prepare_sequence(
    seq: SequenceWindows,
    base_counts: np.ndarray,
    model_config: ModelConfig,
    rng: np.random.Generator,
) -> PreparedSequence:
    samples = [
        prepare_sample(w, model_config.n_points, rng, model_config.include_polarity)
        for w in seq.windows
    ]
    points = np.stack([s.points for s in samples]).astype(np.float32)
    neighbors, coords, sort_idx = _sequence_geometry(points, model_config)
    resolution = seq.windows[0].stream.resolution
    w, h = resolution
    labels = np.array([s.label for s in samples], dtype=np.float64)
    labels_norm = labels / np.array([w, h], dtype=np.float64)
    mask = seq.mask & np.array([s.valid for s in samples])
    centers = np.array([win.nominal_center for win in seq.windows], dtype=np.int64)
    return PreparedSequence(
        points,
        neighbors,
        coords,
        sort_idx,
        labels_norm,
        mask,
        seq.mask.copy(),
        centers,
        np.asarray(base_counts, dtype=np.int64),
        resolution,
    )


def prepare_stream(
    stream: EventStream,
    labels: list[PupilLabel] | None,
    windowing: WindowingConfig,
    model_config: ModelConfig,
    rng: np.random.Generator,
    adaptive: bool = True,
    mode: str = "train",
    augment: bool = False,
    duration_us: int | None = None,
) -> list[PreparedSequence]:
    """Full preprocessing for one stream.

    ``adaptive`` toggles window expansion (threshold from the windowing
    config); ``augment`` (training only) appends a trajectory-inverted copy
    of every sequence alongside the original.
    """
    if augment and mode != "train":
        raise ValueError("trajectory inversion is a training-only augmentation")
    fixed = split_fixed(stream, labels, windowing, duration_us)
    base_counts = np.array([w.count for w in fixed], dtype=np.int64)
    windows = (
        [expand_adaptive(w, windowing, duration_us) for w in fixed] if adaptive else fixed
    )
    seqs = make_sequences(windows, windowing, mode)
    out: list[PreparedSequence] = []
    s_len = windowing.seq_len
    for i, seq in enumerate(seqs):
        counts = base_counts[i * s_len : (i + 1) * s_len]
        if len(counts) < s_len:  # eval padding repeats the last window
            counts = np.concatenate([counts, np.repeat(counts[-1], s_len - len(counts))])
        out.append(prepare_sequence(seq, counts, model_config, rng))
        if augment:
            inv = SequenceWindows(augment_invert(seq.windows), seq.mask[::-1].copy())
            out.append(prepare_sequence(inv, counts[::-1], model_config, rng))
    return out


def collate(seqs: list[PreparedSequence]) -> Batch:
    if not seqs:
        raise ValueError("cannot collate an empty sequence list")
    b = len(seqs)
    s = len(seqs[0])
    points = np.stack([q.points for q in seqs])  # (B, S, N, C)
    n_stages = len(seqs[0].neighbors)
    geometry = []
    for st in range(n_stages):
        nb = np.stack([q.neighbors[st] for q in seqs]).reshape(b * s, *seqs[0].neighbors[st].shape[1:])
        cc = np.stack([q.coords[st] for q in seqs]).reshape(b * s, *seqs[0].coords[st].shape[1:])
        geometry.append((nb, cc))
    sort_idx = np.stack([q.sort_idx for q in seqs]).reshape(b * s, -1)
    labels_sb = np.stack([q.labels_norm for q in seqs]).transpose(1, 0, 2)
    mask_sb = np.stack([q.mask for q in seqs]).transpose(1, 0)
    return Batch(points, geometry, sort_idx, labels_sb, mask_sb)


def batch_iter(
    seqs: list[PreparedSequence],
    batch_size: int,
    rng: np.random.Generator | None = None,
):
    """Yield collated batches; shuffles sequence order when given an rng."""
    order = np.arange(len(seqs))
    if rng is not None:
        order = rng.permutation(len(seqs))
    for i in range(0, len(seqs), batch_size):
        yield collate([seqs[j] for j in order[i : i + batch_size]])
