"""Federated learning with cache-slot aggregation and data-free knowledge fusion."""

from .baselines import ALGORITHMS, AlgorithmSpec
from .client import ClientHyperparams, ClientUpdateResult, client_update
from .config import ExperimentConfig, load_config
from .data import ClientShard, DatasetSource, PartitionSpec, make_synthetic, partition_dirichlet
from .errors import FedKFError, ValidationError
from .metrics import AccuracyProfile, agnostic_mp, amp, check_afl_bounds, fm, wlp
from .models import ArchSpec, ModelWeights
from .server import RoundRecord, ServerState, run_training

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "AccuracyProfile",
    "AlgorithmSpec",
    "ArchSpec",
    "ClientHyperparams",
    "ClientShard",
    "ClientUpdateResult",
    "DatasetSource",
    "ExperimentConfig",
    "FedKFError",
    "ModelWeights",
    "PartitionSpec",
    "RoundRecord",
    "ServerState",
    "ValidationError",
    "agnostic_mp",
    "amp",
    "check_afl_bounds",
    "client_update",
    "fm",
    "load_config",
    "make_synthetic",
    "partition_dirichlet",
    "run_training",
    "wlp",
]
