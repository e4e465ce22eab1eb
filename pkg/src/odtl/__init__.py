"""Inference and on-device last-layer training for residual 1D CNNs over
multi-channel time series, with a harness that measures accuracy lost to
unseen users and recovered by streaming classifier updates."""

from .errors import (BadMagicError, ChecksumError, DomainError, FormatValidationError,
                     OdtlError, ParseError, ShapeError, TrainingError, TruncatedError,
                     VersionError)
from .numerics import NumericMode, quantize_roundtrip, to_bf16
from .model import ModelParams, Topology, build, deploy, forward, load, save
from .engine import OdtlConfig, OdtlEngine, OdtlState
from .dataset import DriftSpec, WindowedDataset, synth
from .trainer import TrainConfig, TrainReport, train
from .harness import (ExperimentReport, OdtlSchedule, PRESETS, count_macs,
                      count_update_params, run_experiment, run_study, uicd_loss)

__version__ = "0.1.0"
