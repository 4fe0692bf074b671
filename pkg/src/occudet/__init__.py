"""Occupancy detection from smart-meter load curves.

A self-contained engine: a float64 tensor core with tape-based reverse-mode
differentiation, an attention-gated fully convolutional classifier, the
smart-meter data pipeline, training with validation-F1 model selection, and
evaluation tooling behind the `occudet` CLI.
"""

from .data import (
    CaseWindows,
    DatasetCase,
    MeterSeries,
    aggregate_to_minutes,
    build_windows,
    load_meter_csv,
    prepare_case,
    qualification,
    split_normalize_oversample,
)
from .metrics import ConfusionCounts, MetricsRecord, aggregate, compute_metrics, confusion
from .nn import FcnConfig, OccupancyNet, PaConfig, ParamStore, spectral_normalize
from .synth import PROFILES, SynthProfile, synth_case
from .tensor import Tape, Tensor
from .train import Adam, TrainConfig, TrainResult, lr_schedule, nll_loss, train_case

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CaseWindows",
    "ConfusionCounts",
    "DatasetCase",
    "FcnConfig",
    "MeterSeries",
    "MetricsRecord",
    "OccupancyNet",
    "PaConfig",
    "ParamStore",
    "PROFILES",
    "SynthProfile",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "aggregate",
    "aggregate_to_minutes",
    "build_windows",
    "compute_metrics",
    "confusion",
    "load_meter_csv",
    "lr_schedule",
    "nll_loss",
    "prepare_case",
    "qualification",
    "spectral_normalize",
    "split_normalize_oversample",
    "synth_case",
    "train_case",
]
