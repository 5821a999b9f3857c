#!/usr/bin/env python3
"""Desk-scale end-to-end run: synthesize a recording, train, report accuracy.

Everything fits in a few minutes on a laptop CPU. The defaults reproduce the
configuration used by the acceptance suite's training gate: a noiseless
64x48 recording of 6.4 s, 64 training / 16 validation sequences, 50 epochs.

    python3 scripts/run_desk_experiment.py --out runs/desk
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from fapnet.data_io import SynthConfig, save_events, save_labels, synth_generate
from fapnet.model import ModelConfig, TrainConfig, fit
from fapnet.pipeline import batch_iter, prepare_stream
from fapnet.windowing import WindowingConfig


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk", help="output directory")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--duration-ms", type=int, default=6400)
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--synth-seed", type=int, default=7)
    ap.add_argument("--noise-rate", type=float, default=0.0, help="background events/s")
    ap.add_argument("--fixed-windows", action="store_true", help="disable expansion")
    args = ap.parse_args()

    synth = SynthConfig(
        resolution=(64, 48),
        duration_ms=args.duration_ms,
        amp_x=(18.0, 4.0),
        freq_x=(0.6, 1.7),
        amp_y=(10.0, 3.0),
        freq_y=(0.9, 2.3),
        ring_radius=6.0,
        rate_gain=400.0,
        rate_floor=500.0,
        noise_rate=args.noise_rate,
        seed=args.synth_seed,
    )
    windowing = WindowingConfig(
        window_ms=10, max_window_ms=100, expand_step_ms=5,
        adaptive_threshold=128, seq_len=8,
    )
    model_config = ModelConfig(
        n_points=128, stage_centroids=(32, 8), knn_k=8, dims=(16, 32),
        ig_hidden=16, is_hidden=32, seq_len=8, resolution=synth.resolution,
    )
    train_config = TrainConfig(
        lr=2e-3, lr_drop_epochs=(max(1, args.epochs * 4 // 5),), lr_drop_factor=0.1,
        weight_decay=1e-4, batch_size=8, epochs=args.epochs, seed=args.seed,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream, labels = synth_generate(synth)
    save_events(stream, out / "events.csv")
    save_labels(labels, out / "labels.csv")
    print(f"synth: {len(stream)} events over {synth.duration_ms} ms -> {out}")

    seqs = prepare_stream(
        stream, labels, windowing, model_config, np.random.default_rng(0),
        adaptive=not args.fixed_windows, mode="train",
        duration_us=synth.duration_ms * 1000,
    )
    n_val = max(1, len(seqs) // 5)
    train_seqs, val_seqs = seqs[:-n_val], seqs[-n_val:]
    print(f"prepared {len(train_seqs)} train / {len(val_seqs)} val sequences")

    t0 = time.perf_counter()
    result = fit(
        lambda r: batch_iter(train_seqs, train_config.batch_size, r),
        list(batch_iter(val_seqs, train_config.batch_size)),
        model_config,
        train_config,
        out_dir=out,
        meta={
            "windowing": {
                "window_ms": windowing.window_ms,
                "max_window_ms": windowing.max_window_ms,
                "expand_step_ms": windowing.expand_step_ms,
                "adaptive_threshold": windowing.adaptive_threshold,
                "seq_len": windowing.seq_len,
            },
            "adaptive": not args.fixed_windows,
        },
    )
    wall = time.perf_counter() - t0
    final = result.log[-1]
    print(
        f"trained {train_config.epochs} epochs in {wall:.0f}s; "
        f"best val wmse {result.best_val:.6f} at epoch {result.best_epoch}"
    )
    print(
        f"final val: p3={final['p3']:.3f} p5={final['p5']:.3f} "
        f"p10={final['p10']:.3f} mean={final['mean_px']:.3f}px"
    )
    print(f"checkpoint -> {result.checkpoint_path}")
    (out / "summary.json").write_text(json.dumps(final, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
