"""Event-camera pupil tracking with point-cloud networks.

Pipeline: event streams -> adaptive temporal windows -> fixed-size
normalized point samples -> hierarchical point network with long/short
temporal recurrence -> per-sample pupil coordinates.
"""

from fapnet.events import (
    Event,
    EventStream,
    PupilLabel,
    Window,
    PointSample,
    Sequence,
    validate_stream,
)
from fapnet.data_io import SynthConfig, load_events, load_labels, synth_generate
from fapnet.windowing import WindowingConfig, split_fixed, expand_adaptive
from fapnet.model import FapNet, ModelConfig, TrainConfig, count_params_flops, fit
from fapnet.metrics import EvalConfig, build_report

__all__ = [
    "Event",
    "EventStream",
    "PupilLabel",
    "Window",
    "PointSample",
    "Sequence",
    "validate_stream",
    "SynthConfig",
    "load_events",
    "load_labels",
    "synth_generate",
    "WindowingConfig",
    "split_fixed",
    "expand_adaptive",
    "FapNet",
    "ModelConfig",
    "TrainConfig",
    "count_params_flops",
    "fit",
    "EvalConfig",
    "build_report",
]

__version__ = "0.1.0"
