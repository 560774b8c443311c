"""Cluster-regularized filter pruning for small convolutional networks."""

__version__ = "0.1.0"

from .clusters import (
    ClusterSpec,
    LayerClusters,
    assign_clusters,
    build_cluster_spec,
    centroid,
    cluster_loss,
    cluster_loss_grad,
)
from .data import Dataset, load_idx, synth_dataset
from .graph import ModelGraph, backward, count_costs, desk_cnn, forward, residual_cnn
from .pruner import (
    PruneDecision,
    PruneReport,
    make_report,
    prune,
    prune_and_merge,
    select_apoz,
    select_cluster,
    select_random,
    select_weight_sum,
)
from .rng import Rng
from .serialize import load_model, save_model
from .trainer import TrainConfig, evaluate, finetune, train, train_from_scratch
