"""Federated GRU forecasting of epidemic trends across simulated city clients."""

from .errors import (CheckFailed, ConfigError, DataError, FedTwinError, FormatError,
                     ProtocolError, RegistrationError, RoundAborted, ShapeError, StateError)
from .federation import ClientNode, FederationConfig, ServerState, fedavg, run_federation, run_round
from .model import ModelConfig, Sample, Seq2seqModel
from .numerics import ParamStore, SeededRng, sgd_step

__version__ = "0.1.0"

__all__ = [
    "CheckFailed", "ClientNode", "ConfigError", "DataError", "FedTwinError", "FederationConfig",
    "FormatError", "ModelConfig", "ParamStore", "ProtocolError", "RegistrationError", "RoundAborted",
    "Sample", "SeededRng", "Seq2seqModel", "ServerState", "ShapeError", "StateError", "fedavg",
    "run_federation", "run_round", "sgd_step",
]
