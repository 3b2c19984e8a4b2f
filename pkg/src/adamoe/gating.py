"""Routers, top-k selection and capacity-slot assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ConfigError, as_tensor

MIN_TEMPERATURE = 0.01


@dataclass(frozen=True)
class GateOutput:
    idxs: np.ndarray        # (T, k) int
    locations: np.ndarray   # (T, k) int, -1 when dropped
    gates: np.ndarray       # (T, k) float
    capacity: int

    @property
    def T(self) -> int:
        return self.idxs.shape[0]

    @property
    def k(self) -> int:
        return self.idxs.shape[1]

    @property
    def dropped(self) -> int:
        return int(np.count_nonzero(self.locations < 0))


@dataclass(frozen=True)
class CosineRouter:
    projection: np.ndarray   # (M, D)
    experts: np.ndarray      # (E, D)
    temperature: float

    @property
    def tau(self) -> float:
        return max(float(self.temperature), MIN_TEMPERATURE)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def gate_linear(x, weight) -> np.ndarray:
    """Row-wise softmax of ``x @ weight``; returns (T, E) probabilities."""
    x = as_tensor(x, name="x")
    weight = as_tensor(weight, name="weight")
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigError(f"cannot route x{x.shape} through weight{weight.shape}")
    return softmax(x @ weight)


def gate_cosine(x, router: CosineRouter) -> np.ndarray:
    """Cosine-similarity router with a clamped temperature."""
    x = as_tensor(x, name="x")
    proj = as_tensor(router.projection, name="projection")
    experts = as_tensor(router.experts, name="experts")
    if x.ndim != 2 or x.shape[1] != proj.shape[0] or proj.shape[1] != experts.shape[1]:
        raise ConfigError(
            f"shape mismatch: x{x.shape}, projection{proj.shape}, experts{experts.shape}")
    if not np.isfinite(router.temperature):
        raise ConfigError("temperature must be finite")
    h = x @ proj
    h_norm = np.linalg.norm(h, axis=1)
    e_norm = np.linalg.norm(experts, axis=1)
    if np.any(h_norm == 0):
        raise ConfigError(f"zero-norm projected token at rows {np.flatnonzero(h_norm == 0).tolist()}")
    if np.any(e_norm == 0):
        raise ConfigError(f"zero-norm expert rows {np.flatnonzero(e_norm == 0).tolist()}")
    cos = (h / h_norm[:, None]) @ (experts / e_norm[:, None]).T
    return softmax(cos / router.tau)


def topk_select(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The k largest entries per row, descending, ties to the lower index."""
    probs = np.asarray(probs, dtype=np.float64)
    E = probs.shape[1]
    if not 1 <= k <= E:
        raise ConfigError(f"k={k} outside [1, {E}]")
    # stable sort on the negated values keeps lower indices first among ties
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(probs, order, axis=1)


def assign_locations(idxs: np.ndarray, gates: np.ndarray, capacity: int,
                     bpr: bool = False) -> np.ndarray:
    """Give every (token, choice) the next free slot of its expert.

    Without BPR tokens are served in index order; with BPR they are served by
    descending max gate. Slots past ``capacity`` are marked -1.
    """
    if capacity < 1:
        raise ConfigError(f"capacity must be >= 1, got {capacity}")
    idxs = np.asarray(idxs)
    T, k = idxs.shape
    if bpr:
        priority = np.asarray(gates).max(axis=1)
        order = np.argsort(-priority, kind="stable")
    else:
        order = np.arange(T)
    locations = np.full((T, k), -1, dtype=np.int64)
    fill = {}
    for t in order:
        for j in range(k):
            e = int(idxs[t, j])
            slot = fill.get(e, 0)
            if slot < capacity:
                locations[t, j] = slot
                fill[e] = slot + 1
    return locations


def expert_demand(idxs: np.ndarray, E: int) -> np.ndarray:
    """Tokens requesting each expert (before capacity is applied)."""
    return np.bincount(np.asarray(idxs).ravel(), minlength=E)


def route(probs: np.ndarray, k: int, capacity: int, bpr: bool = False) -> GateOutput:
    idxs, gates = topk_select(probs, k)
    locations = assign_locations(idxs, gates, capacity, bpr)
    return GateOutput(idxs=idxs, locations=locations, gates=gates, capacity=capacity)


def with_capacity(gate: GateOutput, capacity: int, bpr: bool = False) -> GateOutput:
    """Re-run slot assignment for a different capacity."""
    return GateOutput(idxs=gate.idxs, gates=gate.gates, capacity=capacity,
                      locations=assign_locations(gate.idxs, gate.gates, capacity, bpr))


def drop_count(demand: np.ndarray, capacity: int) -> int:
    return int(np.maximum(np.asarray(demand) - capacity, 0).sum())


def init_linear_router(rng: np.random.Generator, M: int, E: int,
                       scale: Optional[float] = None) -> np.ndarray:
    scale = 1.0 / np.sqrt(M) if scale is None else scale
    return rng.standard_normal((M, E)) * scale


def init_cosine_router(rng: np.random.Generator, M: int, E: int, D: int = 256,
                       temperature: float = 0.5) -> CosineRouter:
    return CosineRouter(projection=rng.standard_normal((M, D)) / np.sqrt(M),
                        experts=rng.standard_normal((E, D)),
                        temperature=temperature)
