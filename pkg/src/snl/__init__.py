"""Budgeted ReLU linearization for private-inference-friendly networks."""

from .capacity import bound_full, bound_pruned, bound_snl, optimal_alphas
from .data import Dataset, DatasetSpec, load_dataset
from .latency import LatencyModel, estimate_online_latency
from .network import GatedNetwork, build_network, cnn_descriptor, mlp_descriptor, relu_count
from .trainer import SnlConfig, pretrain, prune_baseline, snl_run

__version__ = "0.1.0"
