"""Bi-level routing attention and a hierarchical vision backbone built on it."""

from .bra import BraConfig, BraParams, bra_forward, random_bra_params, route_regions
from .complexity import flops_bra, flops_model, optimal_partition, scaling_report
from .model import ModelSpec, get_preset, init_params, model_forward, param_count, presets

__version__ = "0.1.0"

__all__ = [
    "BraConfig",
    "BraParams",
    "ModelSpec",
    "bra_forward",
    "flops_bra",
    "flops_model",
    "get_preset",
    "init_params",
    "model_forward",
    "optimal_partition",
    "param_count",
    "presets",
    "random_bra_params",
    "route_regions",
    "scaling_report",
]
