"""Cluster-level green-list watermarking for multi-channel (RVQ) token streams.

Watermark generation and detection operate on clusters of mutually confusable
tokens, found by community detection on a retokenization confusion graph, so
the signal survives decode/re-encode round trips that swap tokens within a
cluster.
"""
from ._accel import HAS_NUMBA
from .channel import AttackSpec, PlantedChannel, apply_channel, attack, expected_cluster_match
from .community import Partition, cluster_confusion, leiden, louvain, modularity
from .core import (ClusterMap, GreenSet, TokenStream, WatermarkConfig, cluster_match, green_size,
                   identity_maps, prf_partition, token_match)
from .detect import DetectionReport, count_green, detect, neg_log10_p, p_value, tpr_at_fpr, z_channel, z_total
from .errors import ConfigurationError, DataFormatError, ShapeError, UndefinedEstimateError
from .graph import ConfusionMatrix, WeightedDigraph, build_confusion, to_graph
from .simgen import GenerationTrace, SyntheticModel, estimate_g, generate, pooled_g
from .theory import expected_z, expected_z_cluster, expected_z_total, key_space_ok, p1

__version__ = "0.1.0"

__all__ = [
    "HAS_NUMBA", "AttackSpec", "PlantedChannel", "apply_channel", "attack", "expected_cluster_match",
    "Partition", "cluster_confusion", "leiden", "louvain", "modularity", "ClusterMap", "GreenSet",
    "TokenStream", "WatermarkConfig", "cluster_match", "green_size", "identity_maps", "prf_partition",
    "token_match", "DetectionReport", "count_green", "detect", "neg_log10_p", "p_value", "tpr_at_fpr",
    "z_channel", "z_total", "ConfigurationError", "DataFormatError", "ShapeError",
    "UndefinedEstimateError", "ConfusionMatrix", "WeightedDigraph", "build_confusion", "to_graph",
    "GenerationTrace", "SyntheticModel", "estimate_g", "generate", "pooled_g", "expected_z",
    "expected_z_cluster", "expected_z_total", "key_space_ok", "p1",
]
