"""Shared symbols of an MoE layer: dimensions, expert placement, capacity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

FLOAT_BYTES = 8


class ConfigError(ValueError):
    """Raised when a dimension or policy violates its invariants."""


@dataclass(frozen=True)
class ExpertsPerRank:
    """Each rank hosts ``count`` whole experts (``count_per_node > 0``)."""

    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"ExpertsPerRank needs count >= 1, got {self.count}")

    @property
    def count_per_node(self) -> int:
        return self.count


@dataclass(frozen=True)
class RanksPerExpert:
    """Each expert is sliced over ``count`` ranks (``count_per_node < 0``)."""

    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ConfigError(f"RanksPerExpert needs count >= 2, got {self.count}")

    @property
    def count_per_node(self) -> int:
        return -self.count


ExpertPlacement = Union[ExpertsPerRank, RanksPerExpert]


def placement_from_count(count_per_node: int) -> ExpertPlacement:
    """Positive -> experts per rank, negative -> ranks sharing one expert."""
    if count_per_node > 0:
        return ExpertsPerRank(count_per_node)
    if count_per_node < -1:
        return RanksPerExpert(-count_per_node)
    raise ConfigError(f"count_per_node must be >= 1 or <= -2, got {count_per_node}")


@dataclass(frozen=True)
class Fixed:
    f: float

    def __post_init__(self):
        if not self.f > 0:
            raise ConfigError(f"capacity factor must be positive, got {self.f}")


@dataclass(frozen=True)
class Auto:
    pass


@dataclass(frozen=True)
class Bounded:
    f_max: float

    def __post_init__(self):
        if not self.f_max > 0:
            raise ConfigError(f"capacity bound must be positive, got {self.f_max}")


CapacityPolicy = Union[Fixed, Auto, Bounded]


def policy_from_factor(capacity_factor: float) -> CapacityPolicy:
    """Map the signed ``capacity_factor`` argument onto a policy.

    Positive values are used as is, zero means "never drop", and a negative
    value ``-x`` means "never drop, but cap the factor at ``x``".
    """
    if capacity_factor > 0:
        return Fixed(capacity_factor)
    if capacity_factor == 0:
        return Auto()
    return Bounded(-capacity_factor)


@dataclass(frozen=True)
class Dims:
    """Per-step dimensions of one MoE layer.

    ``T`` counts the tokens held by a single rank; ``E`` counts global experts.
    """

    W: int
    m: int
    E: int
    M: int
    V: int
    T: int
    k: int
    placement: ExpertPlacement

    def __post_init__(self):
        for name in ("W", "m", "E", "M", "V", "T", "k"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.W % self.m:
            raise ConfigError(f"W={self.W} is not a multiple of m={self.m}")
        if self.k > self.E:
            raise ConfigError(f"top-k {self.k} exceeds expert count {self.E}")
        if isinstance(self.placement, ExpertsPerRank):
            if self.E != self.W * self.placement.count:
                raise ConfigError(
                    f"E={self.E} != W*x = {self.W}*{self.placement.count}")
        elif isinstance(self.placement, RanksPerExpert):
            if self.W != self.E * self.placement.count:
                raise ConfigError(
                    f"W={self.W} != E*s = {self.E}*{self.placement.count}")
        else:
            raise ConfigError(f"unknown placement {self.placement!r}")

    @property
    def n_nodes(self) -> int:
        return self.W // self.m

    @property
    def local_experts(self) -> int:
        """Whole experts hosted per rank; 1 when an expert is sliced."""
        p = self.placement
        return p.count if isinstance(p, ExpertsPerRank) else 1

    @property
    def n_sharded(self) -> int:
        p = self.placement
        return p.count if isinstance(p, RanksPerExpert) else 1

    @property
    def expert_ratio(self) -> float:
        """E / W, fractional when experts are sliced."""
        return self.E / self.W

    def replace(self, **changes) -> "Dims":
        fields = {name: getattr(self, name)
                  for name in ("W", "m", "E", "M", "V", "T", "k", "placement")}
        fields.update(changes)
        return Dims(**fields)


@dataclass(frozen=True)
class ShapeSet:
    capacity: int        # ΔC, per-rank slots per expert
    gathered: int        # C = W * ΔC
    delta_e: float       # E / W; fractional when experts are sliced
    n_sharded: int

    def with_capacity(self, capacity: int) -> "ShapeSet":
        return ShapeSet(capacity, self.gathered // self.capacity * capacity,
                        self.delta_e, self.n_sharded)


def expert_capacity(k: int, f: float, T: int, E: int) -> int:
    """Slots per expert: ``ceil(k * f * T / E)``, never below one."""
    if k < 1 or T < 1 or E < 1 or not f > 0:
        raise ConfigError(f"expert_capacity needs positive inputs, got k={k} f={f} T={T} E={E}")
    # Exact rational ceiling when f has a short binary expansion (the common case).
    num, den = float(f).as_integer_ratio()
    return max(1, -((-k * num * T) // (den * E)))


def derive_shapes(dims: Dims, f: float) -> ShapeSet:
    cap = expert_capacity(dims.k, f, dims.T, dims.E)
    return ShapeSet(capacity=cap, gathered=dims.W * cap,
                    delta_e=dims.expert_ratio, n_sharded=dims.n_sharded)


def resolve_capacity(policy: CapacityPolicy, demand: Sequence[int], dims: Dims) -> int:
    """Effective per-expert capacity for this step's routing demand.

    ``demand`` may be one rank's per-expert counts or a (ranks, E) array; the
    Auto and Bounded policies take the maximum over every entry.
    """
    demand = np.asarray(demand)
    if demand.shape[-1] != dims.E:
        raise ConfigError(f"demand has {demand.shape[-1]} entries, expected E={dims.E}")
    if np.any(demand < 0):
        raise ConfigError("demand counts must be non-negative")
    if isinstance(policy, Fixed):
        return expert_capacity(dims.k, policy.f, dims.T, dims.E)
    peak = max(1, int(demand.max(initial=0)))
    if isinstance(policy, Auto):
        return peak
    if isinstance(policy, Bounded):
        return min(peak, expert_capacity(dims.k, policy.f_max, dims.T, dims.E))
    raise ConfigError(f"unknown capacity policy {policy!r}")


# keep the long name available for callers that mirror the operation list
resolve_capacity_factor = resolve_capacity


def effective_factor(capacity: int, dims: Dims) -> float:
    """Capacity factor implied by a resolved capacity (inverse of the formula)."""
    return capacity * dims.E / (dims.k * dims.T)


def as_tensor(x, shape: Sequence[int] | None = None, name: str = "tensor") -> np.ndarray:
    """Validate a dense float64 row-major buffer."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ConfigError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def ceil_to_multiple(value: int, multiple: int) -> int:
    return -(-value // multiple) * multiple


def lcm(*values: int) -> int:
    return math.lcm(*values)
