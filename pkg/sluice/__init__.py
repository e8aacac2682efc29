# flake8: noqa
"""Chunked action execution gated by future-reality verification"""
from .cli import app
from .config import RunConfig
from .exceptions import (
    ConfigurationError,
    DatasetError,
    MaskError,
    NonFiniteError,
    SluiceError,
    StageError,
    StaleCacheError,
    TrainingError,
)
from .execution import ExecPolicy, run_benchmark, run_episode
from .simenv import ManipulationEnv, TaskSpec, generate_demos, segment_oracle
from .verdata import VerifierDataset, build_dataset
from .verifier import FFDCVerifier, build_mask, train_verifier
from .wam import WorldActionModel, train_wam

__version__ = "0.1.0"
