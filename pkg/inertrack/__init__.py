"""Public API for the :mod:`inertrack` package."""

from .baseline import (
    ComplementaryConfig,
    EkfConfig,
    complementary_corrected_velocity,
    ekf_track,
    gyro_heading,
    heading_drift_report,
    mag_heading,
    ndi_track,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .errors import (
    CheckpointError,
    ConfigError,
    FilterDivergenceError,
    InertrackError,
    SequenceParseError,
    SequenceTooShortError,
    ShapeError,
)
from .ingest import (
    DatasetManifest,
    SequenceRecord,
    SynthParams,
    load_sequence,
    read_manifest,
    save_sequence,
    split_manifest,
    synth_sequence,
    write_manifest,
)
from .loss import LossState, orientation_loss, position_loss, total_loss, velocity_loss
from .metrics import MetricsReport, Trajectory, aggregate, ate, aye, evaluate, integrate_velocity, pde, rte
from .preprocess import (
    DataConfig,
    FeatureWindow,
    NormalizationStats,
    SegmentSample,
    augment_rotation,
    make_segments,
    make_windows,
    mag_body_derivative,
    to_heading_agnostic,
)
from .tensor import Tape, Tensor, backward, grad_check
from .tfbrt import TFBRT, ModelConfig
from .train import PlateauScheduler, TrainConfig, Trainer, adam_step, export_hidden_features

__all__ = [
    "ComplementaryConfig",
    "EkfConfig",
    "complementary_corrected_velocity",
    "ekf_track",
    "gyro_heading",
    "heading_drift_report",
    "mag_heading",
    "ndi_track",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "RunConfig",
    "load_run_config",
    "CheckpointError",
    "ConfigError",
    "FilterDivergenceError",
    "InertrackError",
    "SequenceParseError",
    "SequenceTooShortError",
    "ShapeError",
    "DatasetManifest",
    "SequenceRecord",
    "SynthParams",
    "load_sequence",
    "read_manifest",
    "save_sequence",
    "split_manifest",
    "synth_sequence",
    "write_manifest",
    "LossState",
    "orientation_loss",
    "position_loss",
    "total_loss",
    "velocity_loss",
    "MetricsReport",
    "Trajectory",
    "aggregate",
    "ate",
    "aye",
    "evaluate",
    "integrate_velocity",
    "pde",
    "rte",
    "DataConfig",
    "FeatureWindow",
    "NormalizationStats",
    "SegmentSample",
    "augment_rotation",
    "make_segments",
    "make_windows",
    "mag_body_derivative",
    "to_heading_agnostic",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "TFBRT",
    "ModelConfig",
    "PlateauScheduler",
    "TrainConfig",
    "Trainer",
    "adam_step",
    "export_hidden_features",
]
