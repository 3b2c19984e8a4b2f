"""Adaptive mixture-of-experts layer on a simulated multi-rank fabric."""

from .core import (Auto, Bounded, ConfigError, Dims, ExpertsPerRank, Fixed, RanksPerExpert,
                   ShapeSet, derive_shapes, expert_capacity, policy_from_factor, resolve_capacity)
from .fabric import CostModelParams, Topology, run_ranks
from .collectives import LINEAR, TWO_DH
from .parallelism import Parallel
from .pipeline import STRATEGIES, Strategy, StrategyMemo
from .layer import MoELayer, MoELayerConfig, reference_forward

__all__ = [
    "Auto", "Bounded", "ConfigError", "CostModelParams", "Dims", "ExpertsPerRank", "Fixed",
    "LINEAR", "MoELayer", "MoELayerConfig", "Parallel", "RanksPerExpert", "STRATEGIES",
    "ShapeSet", "Strategy", "StrategyMemo", "TWO_DH", "Topology", "derive_shapes",
    "expert_capacity", "policy_from_factor", "reference_forward", "resolve_capacity", "run_ranks",
]
