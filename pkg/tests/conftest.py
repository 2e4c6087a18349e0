"""Pytest fixtures for the inertial tracking toolkit."""

from pathlib import Path
import sys

import numpy as np
import pytest

sys.path.append(str(Path(__file__).resolve().parents[1]))

from inertrack import ModelConfig, SequenceRecord, SynthParams, TFBRT, synth_sequence
from inertrack.preprocess import DataConfig


@pytest.fixture
def walk_record() -> SequenceRecord:
    """Noise-free 20 s walk at 50 Hz with a gentle tilt."""

    return synth_sequence(
        SynthParams(duration=20.0, fs=50.0, n_waypoints=5, max_speed=1.2, tilt_amplitude=0.05, seed=3),
        sequence_id="walk",
    )


@pytest.fixture
def noisy_record() -> SequenceRecord:
    """Walk with realistic sensor noise and a constant gyro bias."""

    return synth_sequence(
        SynthParams(
            duration=30.0,
            fs=100.0,
            n_waypoints=6,
            tilt_amplitude=0.05,
            acc_noise=0.05,
            gyro_noise=0.002,
            mag_noise=0.3,
            gyro_bias=(0.0, 0.0, 0.01),
            seed=11,
        ),
        sequence_id="noisy",
    )


@pytest.fixture
def stationary_record() -> SequenceRecord:
    """Standing still while the heading oscillates."""

    return synth_sequence(
        SynthParams(duration=10.0, fs=100.0, n_waypoints=1, yaw_oscillation=0.3, seed=5),
        sequence_id="still",
    )


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Small network that keeps gradient checks fast."""

    return ModelConfig(window_length=8, d_hidden=16, n_heads=2, kernel_size=3, depth=1, dropout=0.0, rpe_radius=3)


@pytest.fixture
def tiny_data_config() -> DataConfig:
    return DataConfig(window_length=8, segment_windows=2, segment_step=16, eval_step=8)


@pytest.fixture
def tiny_model(tiny_config) -> TFBRT:
    return TFBRT(tiny_config, seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
