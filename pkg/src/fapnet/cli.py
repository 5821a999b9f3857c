"""Command-line pipeline driver: synth / train / eval / track / analyze.

Configuration comes from an optional TOML file with sections [synth],
[windowing], [model], [train], [eval]; command-line flags override file
values, unknown keys are errors, and a short sha256 hash of the merged
effective configuration is stamped into checkpoints, logs and reports so
artifacts can be traced back to exact settings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - environment dependent
    import tomli as tomllib

from fapnet.autodiff import load_checkpoint
from fapnet.data_io import (
    SynthConfig,
    load_events,
    load_labels,
    save_events,
    save_labels,
    synth_generate,
)
from fapnet.metrics import EvalConfig, build_report, load_report
from fapnet.model import FapNet, ModelConfig, TrainConfig, fit
from fapnet.pipeline import batch_iter, prepare_stream
from fapnet.windowing import WindowingConfig

_SECTIONS = ("synth", "windowing", "model", "train", "eval")


class CliError(RuntimeError):
    """User-facing error; message printed without a traceback."""


# -- config assembly -----------------------------------------------------------


def _load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    with open(p, "rb") as f:
        data = tomllib.load(f)
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise CliError(f"{p}: unknown config sections {unknown}; expected {_SECTIONS}")
    return data


def _build(cls, section: dict, overrides: dict, where: str):
    """Instantiate a config dataclass from TOML + flag overrides.

    Rejects unknown keys; converts lists to tuples where the dataclass
    expects tuples. ``preset`` is allowed for the model section only.
    """
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    preset = merged.pop("preset", None)
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(merged) - allowed)
    if unknown:
        raise CliError(f"unknown {where} keys {unknown}; allowed: {sorted(allowed)}")
    for key, value in merged.items():
        if isinstance(value, list):
            merged[key] = tuple(value)
    try:
        if cls is ModelConfig and preset is not None:
            return ModelConfig.preset(preset, **merged)
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {where} config: {e}") from None


def _config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _windowing_dict(w: WindowingConfig) -> dict:
    return {f.name: getattr(w, f.name) for f in fields(w)}


# -- data discovery -------------------------------------------------------------


def _find_recordings(data_dir: str) -> list[tuple[Path, Path | None, str]]:
    """Locate (events, labels, format) triples in a directory.

    Recognizes ``<stem>.events.csv`` / ``<stem>.events.bin`` paired with
    ``<stem>.labels.csv``, plus the bare ``events.csv`` + ``labels.csv``
    convention. Labels may be absent (tracking-only data).
    """
    d = Path(data_dir)
    if not d.is_dir():
        raise CliError(f"data directory not found: {d}")
    out = []
    for ev in sorted(list(d.glob("*.events.csv")) + list(d.glob("*.events.bin"))):
        fmt = "csv" if ev.suffix == ".csv" else "binary"
        stem = ev.name[: -len(".events" + ev.suffix)]
        lab = d / f"{stem}.labels.csv"
        out.append((ev, lab if lab.is_file() else None, fmt))
    bare = d / "events.csv"
    if bare.is_file():
        lab = d / "labels.csv"
        out.append((bare, lab if lab.is_file() else None, "csv"))
    if not out:
        raise CliError(f"no event files found in {d} (expected *.events.csv or events.csv)")
    return out


def _prepare_dir(
    data_dir: str,
    wconfig: WindowingConfig,
    mconfig: ModelConfig,
    rng: np.random.Generator,
    adaptive: bool,
    mode: str,
    augment: bool = False,
    require_labels: bool = True,
):
    sequences = []
    for ev_path, lab_path, fmt in _find_recordings(data_dir):
        if require_labels and lab_path is None:
            raise CliError(f"{ev_path}: no matching labels file")
        stream = load_events(ev_path, fmt)
        labels = load_labels(lab_path) if lab_path else None
        sequences.extend(
            prepare_stream(
                stream, labels, wconfig, mconfig, rng,
                adaptive=adaptive, mode=mode, augment=augment,
            )
        )
    if not sequences:
        raise CliError(
            f"{data_dir}: no sequences produced; streams shorter than "
            f"seq_len*window ({wconfig.seq_len * wconfig.window_ms} ms)?"
        )
    return sequences


def _predict_flat(model: FapNet, sequences, batch_size: int = 64):
    """Predictions for every *real* window, in input order.

    Returns dict of flat arrays: preds (n,2), labels (n,2), counts, centers,
    and the per-entry loss mask (real AND labeled).
    """
    preds, labels, counts, centers, masks = [], [], [], [], []
    i = 0
    for batch in batch_iter(sequences, batch_size):
        out = model.predict(batch)  # (B, S, 2)
        for b in range(out.shape[0]):
            seq = sequences[i]
            keep = seq.real
            preds.append(out[b][keep])
            labels.append(seq.labels_norm[keep])
            counts.append(seq.base_counts[keep])
            centers.append(seq.centers[keep])
            masks.append(seq.mask[keep])
            i += 1
    return {
        "preds": np.concatenate(preds),
        "labels": np.concatenate(labels),
        "counts": np.concatenate(counts),
        "centers": np.concatenate(centers),
        "mask": np.concatenate(masks),
    }


# -- checkpoint compatibility -----------------------------------------------------


def _model_from_checkpoint(path: str) -> tuple[FapNet, WindowingConfig, dict]:
    header, arrays = load_checkpoint(path)
    meta = header.get("meta", {})
    if "model_config" not in meta or "windowing" not in meta:
        raise CliError(f"{path}: checkpoint lacks embedded configuration")
    mconfig = ModelConfig.from_dict(meta["model_config"])
    wconfig = WindowingConfig(**meta["windowing"])
    model = FapNet(mconfig, np.random.default_rng(0))
    try:
        model.load_arrays(arrays)
    except ValueError as e:
        raise CliError(f"{path}: {e}") from None
    return model, wconfig, meta


def _check_flag_conflicts(stored: dict, requested: dict, source: str) -> None:
    """Error if explicitly requested keys differ from checkpoint values."""
    diffs = {
        k: (stored.get(k), v)
        for k, v in requested.items()
        if v is not None and stored.get(k) != v
    }
    if diffs:
        listing = ", ".join(
            f"{k} (checkpoint={a!r}, requested={b!r})" for k, (a, b) in diffs.items()
        )
        raise CliError(f"{source} conflicts with checkpoint configuration: {listing}")


# -- commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    toml = _load_toml(args.config)
    sconfig = _build(
        SynthConfig, toml.get("synth", {}), {"seed": args.seed}, "synth"
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream, labels = synth_generate(sconfig)
    wrote = []
    if args.format in ("csv", "both"):
        save_events(stream, out / "events.csv", "csv")
        wrote.append(str(out / "events.csv"))
    if args.format in ("binary", "both"):
        save_events(stream, out / "events.bin", "binary")
        wrote.append(str(out / "events.bin"))
    save_labels(labels, out / "labels.csv")
    wrote.append(str(out / "labels.csv"))
    dur_ms = sconfig.duration_ms
    rate = len(stream) / (dur_ms / 1000.0) if dur_ms else 0.0
    print(
        f"synth: {len(stream)} events over {dur_ms} ms "
        f"({rate:.0f} ev/s) at {sconfig.resolution[0]}x{sconfig.resolution[1]} "
        f"[config {_config_hash(vars(sconfig))}] -> {', '.join(wrote)}"
    )
    return 0


def cmd_train(args) -> int:
    toml = _load_toml(args.config)
    wconfig = _build(
        WindowingConfig,
        toml.get("windowing", {}),
        {
            "window_ms": args.window_ms,
            "adaptive_threshold": args.adaptive_threshold,
            "max_window_ms": args.max_window_ms,
            "seq_len": args.seq_len,
        },
        "windowing",
    )
    mconfig = _build(
        ModelConfig,
        toml.get("model", {}),
        {"preset": args.preset, "seq_len": wconfig.seq_len},
        "model",
    )
    tconfig = _build(
        TrainConfig,
        toml.get("train", {}),
        {
            "seed": args.seed,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "augment_invert": True if args.augment_invert else None,
        },
        "train",
    )
    econfig = _build(EvalConfig, toml.get("eval", {}), {}, "eval")
    adaptive = not args.fixed_windows
    cfg_hash = _config_hash(
        _windowing_dict(wconfig), mconfig.to_dict(), tconfig.to_dict(),
        {"adaptive": adaptive},
    )

    rng = np.random.default_rng(tconfig.seed)
    prepared = _prepare_dir(
        args.data, wconfig, mconfig, rng,
        adaptive=adaptive, mode="train", augment=tconfig.augment_invert,
    )
    if tconfig.augment_invert:  # originals and inverted copies interleave
        originals, copies = prepared[0::2], prepared[1::2]
    else:
        originals, copies = prepared, []
    n_val = max(1, int(round(args.val_fraction * len(originals))))
    if len(originals) - n_val < 1:
        raise CliError(
            f"dataset has {len(originals)} sequences; too few for a "
            f"{args.val_fraction} validation split"
        )
    val_seqs = originals[-n_val:]
    train_seqs = originals[: -n_val] + copies[: len(originals) - n_val]
    data_resolution = originals[0].resolution
    eval_res = econfig.resolution or data_resolution

    out = Path(args.out)
    result = fit(
        lambda r: batch_iter(train_seqs, tconfig.batch_size, r),
        list(batch_iter(val_seqs, tconfig.batch_size)),
        mconfig,
        tconfig,
        out_dir=out,
        eval_resolution=eval_res,
        meta={
            "windowing": _windowing_dict(wconfig),
            "adaptive": adaptive,
            "config_hash": cfg_hash,
            "data_resolution": list(data_resolution),
        },
    )
    flat = _predict_flat(result.model, val_seqs)
    keep = flat["mask"]
    report = build_report(
        flat["preds"][keep],
        flat["labels"][keep],
        flat["counts"][keep],
        econfig,
        data_resolution,
        label="val",
        centers_us=flat["centers"][keep],
        meta={"config_hash": cfg_hash, "checkpoint": str(result.checkpoint_path)},
    )
    report.write(out)
    last = result.log[-1]
    print(
        f"train: {len(train_seqs)} train / {len(val_seqs)} val sequences, "
        f"{tconfig.epochs} epochs [config {cfg_hash}]\n"
        f"  best val wmse {result.best_val:.6f} (epoch {result.best_epoch}); "
        f"final p3={last['p3']:.3f} p5={last['p5']:.3f} p10={last['p10']:.3f} "
        f"mean={last['mean_px']:.3f}px\n"
        f"  checkpoint -> {result.checkpoint_path}"
    )
    return 0


def _eval_requested_overrides(args) -> dict:
    return {
        "window_ms": args.window_ms,
        "adaptive_threshold": args.adaptive_threshold,
        "max_window_ms": args.max_window_ms,
        "seq_len": args.seq_len,
    }


def cmd_eval(args) -> int:
    toml = _load_toml(args.config)
    model, wconfig, meta = _model_from_checkpoint(args.checkpoint)
    stored = dict(meta["windowing"])
    requested = {**toml.get("windowing", {}), **_eval_requested_overrides(args)}
    _check_flag_conflicts(stored, requested, "windowing flags/config")
    econfig = _build(EvalConfig, toml.get("eval", {}), {}, "eval")
    adaptive = bool(meta.get("adaptive", True)) and not args.fixed_windows
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    sequences = _prepare_dir(
        args.data, wconfig, model.config, rng, adaptive=adaptive, mode="eval"
    )
    flat = _predict_flat(model, sequences)
    keep = flat["mask"]
    if not keep.any():
        raise CliError("no labeled windows to evaluate")
    data_resolution = sequences[0].resolution
    label = args.label or ("adaptive" if adaptive else "fixed")
    report = build_report(
        flat["preds"][keep],
        flat["labels"][keep],
        flat["counts"][keep],
        econfig,
        data_resolution,
        label=label,
        centers_us=flat["centers"][keep],
        meta={
            "checkpoint": args.checkpoint,
            "adaptive": adaptive,
            "config_hash": meta.get("config_hash", ""),
        },
    )
    path = report.write(Path(args.out))
    rates = " ".join(
        f"p{int(t)}={r:.4f}" for t, r in zip(report.thresholds, report.p_rates)
    )
    print(
        f"eval[{label}]: n={report.n} {rates} mean={report.mean_distance_px:.3f}px "
        f"@{report.eval_resolution[0]}x{report.eval_resolution[1]} -> {path}"
    )
    return 0


def cmd_track(args) -> int:
    toml = _load_toml(args.config)
    model, wconfig, meta = _model_from_checkpoint(args.checkpoint)
    stored = dict(meta["windowing"])
    requested = {**toml.get("windowing", {}), **_eval_requested_overrides(args)}
    _check_flag_conflicts(stored, requested, "tracking flags/config")
    if args.track_hz is not None:
        # sanctioned re-windowing: the model is window-agnostic (points are
        # normalized per window), only the output rate changes
        wconfig = replace(wconfig, window_ms={100: 10, 20: 50}[args.track_hz])
    adaptive = bool(meta.get("adaptive", True)) and not args.fixed_windows
    fmt = "binary" if args.events.endswith(".bin") else "csv"
    stream = load_events(args.events, fmt)
    labels = load_labels(args.labels) if args.labels else None
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    sequences = prepare_stream(
        stream, labels, wconfig, model.config, rng, adaptive=adaptive, mode="eval"
    )
    if not sequences:
        raise CliError("stream too short to form any sequence")
    flat = _predict_flat(model, sequences)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w, h = stream.resolution
    traj_path = out / "trajectory.csv"
    with open(traj_path, "w", newline="") as f:
        f.write("t_center_us,x_pred,y_pred\n")
        for t, (px, py) in zip(flat["centers"], flat["preds"] * np.array([w, h])):
            f.write(f"{int(t)},{float(px)!r},{float(py)!r}\n")
    print(f"track: {len(flat['centers'])} windows -> {traj_path}")
    if labels is not None:
        econfig = _build(EvalConfig, toml.get("eval", {}), {}, "eval")
        keep = flat["mask"]
        report = build_report(
            flat["preds"][keep],
            flat["labels"][keep],
            flat["counts"][keep],
            econfig,
            stream.resolution,
            label=args.label or "track",
            centers_us=flat["centers"][keep],
            meta={"checkpoint": args.checkpoint, "adaptive": adaptive},
        )
        path = report.write(out)
        rates = " ".join(
            f"p{int(t)}={r:.4f}" for t, r in zip(report.thresholds, report.p_rates)
        )
        print(f"track report: n={report.n} {rates} -> {path}")
    return 0


def cmd_analyze(args) -> int:
    reports = [load_report(p) for p in args.reports]
    labels = []
    for i, r in enumerate(reports):
        base = r.get("label", f"report{i}")
        label = base
        k = 2
        while label in labels:
            label = f"{base}{k}"
            k += 1
        labels.append(label)
    first = reports[0]
    for r, label in zip(reports[1:], labels[1:]):
        if r["thresholds"] != first["thresholds"]:
            raise CliError(f"report {label}: thresholds differ from {labels[0]}")
        if len(r["density_bins"]) != len(first["density_bins"]):
            raise CliError(f"report {label}: density bin count differs from {labels[0]}")
        if [row[0] for row in r["cdf"]] != [row[0] for row in first["cdf"]]:
            raise CliError(f"report {label}: cdf grid differs from {labels[0]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    density_path = out / "density_combined.csv"
    with open(density_path, "w", newline="") as f:
        cols = ["bin"]
        for label in labels:
            cols += [f"mean_count_{label}", f"mean_error_px_{label}", f"exceed_{label}"]
        f.write(",".join(cols) + "\n")
        for b in range(len(first["density_bins"])):
            row = [str(b)]
            for r in reports:
                rb = r["density_bins"][b]
                row += [repr(rb["mean_count"]), repr(rb["mean_error_px"]), str(rb["exceed"])]
            f.write(",".join(row) + "\n")

    cdf_path = out / "cdf_combined.csv"
    with open(cdf_path, "w", newline="") as f:
        f.write(",".join(["error_px"] + [f"fraction_{label}" for label in labels]) + "\n")
        for i, x in enumerate([row[0] for row in first["cdf"]]):
            vals = [repr(float(r["cdf"][i][1])) for r in reports]
            f.write(",".join([repr(float(x))] + vals) + "\n")

    lows = {label: r["density_bins"][0]["exceed"] for label, r in zip(labels, reports)}
    summary = ", ".join(f"{label}={n}" for label, n in lows.items())
    print(f"analyze: lowest-density-bin >3px exceedances: {summary}")
    print(f"analyze: wrote {density_path} and {cdf_path}")
    return 0


# -- argument parsing -----------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")


def _add_windowing_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-ms", type=int, help="fixed tiling width, ms")
    p.add_argument("--adaptive-threshold", type=int, help="event-count target")
    p.add_argument("--max-window-ms", type=int, help="expansion cap, ms")
    p.add_argument("--seq-len", type=int, help="samples per sequence")
    p.add_argument(
        "--fixed-windows", action="store_true",
        help="disable adaptive expansion (fixed windows only)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fapnet",
        description="Event-camera pupil tracking: synthesize, train, evaluate, track.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic recording")
    _add_common(p)
    p.add_argument("--format", choices=("csv", "binary", "both"), default="csv")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a directory of recordings")
    _add_common(p)
    _add_windowing_flags(p)
    p.add_argument("--data", required=True, help="directory with events+labels files")
    p.add_argument("--preset", choices=("fapnet", "pepnet", "pepnet_tiny"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--augment-invert", action="store_true",
                   help="add trajectory-inverted copies of training sequences")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled recordings")
    _add_common(p)
    _add_windowing_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", help="report label (default: adaptive/fixed)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("track", help="run tracking over one event stream")
    _add_common(p)
    _add_windowing_flags(p)
    p.add_argument("--events", required=True, help="event file (.csv or .bin)")
    p.add_argument("--labels", help="optional label file for a metrics report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--track-hz", type=int, choices=(100, 20),
                   help="output rate: 100 Hz = 10 ms windows, 20 Hz = 50 ms")
    p.add_argument("--label", help="report label")
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("analyze", help="merge metric reports into combined tables")
    p.add_argument("reports", nargs="+", help="report.json paths")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
