"""Bias-aware client selection for federated learning, with a numpy MLP backend."""

from .config import ConfigError, ExperimentConfig, dump_config, parse_config, parse_config_text
from .data import LabeledDataset, PartitionSpec, gen_synthetic, load_idx, make_partition
from .engine import POLICIES, FLConfig, Simulation, run
from .estimator import build_profile, estimate_proportions, estimation_error
from .nn import NetworkParams, TrainConfig, init_bacsa, init_glorot, mlp_spec, train_local
from .selector import SelectionState, select_exhaustive, select_greedy_swap

__version__ = "0.1.0"
