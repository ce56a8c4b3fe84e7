"""Desk-scale federated learning simulator with guidance-driven pruning."""

from .data import Dataset, partition_clients, split_train_test, synthetic_blobs
from .errors import ConfigurationError, NumericalError, ParseError
from .federation import FederationConfig, reference_config, run_experiment
from .metrics import RoundReport

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "Dataset",
    "FederationConfig",
    "NumericalError",
    "ParseError",
    "RoundReport",
    "partition_clients",
    "reference_config",
    "run_experiment",
    "split_train_test",
    "synthetic_blobs",
]
