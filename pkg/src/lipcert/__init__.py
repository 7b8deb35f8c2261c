"""Lipschitz-constrained networks: layers, certification, training and data tools."""
from .certify import certify_batch, certify_naive, certify_tight, pgd_attack, vra, vra_grid
from .data import MixSpec, Pool, filter_bottom_scores, mix_batch
from .network import Network, build_liresnet, build_mlp, network_lipschitz
from .train import TrainConfig, TrainLog, train

__all__ = [
    "MixSpec", "Network", "Pool", "TrainConfig", "TrainLog", "build_liresnet", "build_mlp",
    "certify_batch", "certify_naive", "certify_tight", "filter_bottom_scores", "mix_batch",
    "network_lipschitz", "pgd_attack", "train", "vra", "vra_grid",
]
