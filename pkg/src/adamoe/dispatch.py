"""Sparse encode/decode between token rows and expert capacity slots.

``fast_encode`` scatters each routed token row into its (expert, slot) cell,
``fast_decode`` gathers the slots back with gate weights. Both have hand
written adjoints. The dense one-hot einsum path is kept as a reference.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, as_tensor
from .gating import GateOutput


@dataclass(frozen=True)
class DispatchPlan:
    gate: GateOutput
    E: int
    M: int

    @property
    def T(self) -> int:
        return self.gate.T

    @property
    def k(self) -> int:
        return self.gate.k

    @property
    def capacity(self) -> int:
        return self.gate.capacity

    def routed(self):
        """Yield (j, token rows, expert ids, slots) for the kept choices."""
        loc = self.gate.locations
        for j in range(self.k):
            rows = np.flatnonzero(loc[:, j] >= 0)
            yield j, rows, self.gate.idxs[rows, j], loc[rows, j]


class OpCounter:
    """Accumulates scalar moves / multiply-adds of instrumented kernels."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, kernel: str, n: int):
        self.counts[kernel] = self.counts.get(kernel, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_active: list[OpCounter] = []


@contextlib.contextmanager
def count_scalar_ops():
    """Count the scalar work of every kernel executed inside the block."""
    counter = OpCounter()
    _active.append(counter)
    try:
        yield counter
    finally:
        _active.remove(counter)


def _charge(kernel: str, n: int):
    for counter in _active:
        counter.add(kernel, n)


def make_plan(gate: GateOutput, E: int, M: int) -> DispatchPlan:
    if gate.idxs.size and (gate.idxs.min() < 0 or gate.idxs.max() >= E):
        raise ConfigError("expert index out of range")
    if gate.locations.size and gate.locations.max() >= gate.capacity:
        raise ConfigError("location beyond capacity")
    return DispatchPlan(gate=gate, E=E, M=M)


def fast_encode(x, plan: DispatchPlan) -> np.ndarray:
    x = as_tensor(x, (plan.T, plan.M), "x")
    Z = np.zeros((plan.E, plan.capacity, plan.M))
    for _, rows, experts, slots in plan.routed():
        Z[experts, slots] = x[rows]
        _charge("encode", rows.size * plan.M)
    return Z


def fast_decode(Y, plan: DispatchPlan) -> np.ndarray:
    Y = as_tensor(Y, (plan.E, plan.capacity, plan.M), "expert output")
    y = np.zeros((plan.T, plan.M))
    for j, rows, experts, slots in plan.routed():
        y[rows] += plan.gate.gates[rows, j, None] * Y[experts, slots]
        _charge("decode", rows.size * plan.M)
    return y


def fast_encode_backward(dZ, plan: DispatchPlan) -> np.ndarray:
    dZ = as_tensor(dZ, (plan.E, plan.capacity, plan.M), "dZ")
    dx = np.zeros((plan.T, plan.M))
    for _, rows, experts, slots in plan.routed():
        dx[rows] += dZ[experts, slots]
        _charge("encode_backward", rows.size * plan.M)
    return dx


def fast_decode_backward(dy, Y, plan: DispatchPlan) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``fast_decode`` w.r.t. the expert outputs and the gates."""
    dy = as_tensor(dy, (plan.T, plan.M), "dy")
    Y = as_tensor(Y, (plan.E, plan.capacity, plan.M), "expert output")
    dY = np.zeros_like(Y)
    dgates = np.zeros((plan.T, plan.k))
    for j, rows, experts, slots in plan.routed():
        dY[experts, slots] = plan.gate.gates[rows, j, None] * dy[rows]
        dgates[rows, j] = np.einsum("tm,tm->t", Y[experts, slots], dy[rows])
        _charge("decode_backward", 2 * rows.size * plan.M)
    return dY, dgates


def dispatch_masks(plan: DispatchPlan) -> tuple[np.ndarray, np.ndarray]:
    """Dense one-hot (T, E, ΔC) dispatch mask and gate-weighted combine mask."""
    mask = np.zeros((plan.T, plan.E, plan.capacity))
    weights = np.zeros_like(mask)
    for j, rows, experts, slots in plan.routed():
        mask[rows, experts, slots] = 1.0
        weights[rows, experts, slots] += plan.gate.gates[rows, j]
    return mask, weights


def encode_dense_reference(x, plan: DispatchPlan) -> np.ndarray:
    x = as_tensor(x, (plan.T, plan.M), "x")
    mask, _ = dispatch_masks(plan)
    _charge("dense_encode", plan.T * plan.E * plan.capacity * plan.M)
    # + 0.0 normalizes the -0.0 that 0 * negative leaves in empty slots
    return np.einsum("tec,tm->ecm", mask, x) + 0.0


def decode_dense_reference(Y, plan: DispatchPlan) -> np.ndarray:
    Y = as_tensor(Y, (plan.E, plan.capacity, plan.M), "expert output")
    _, weights = dispatch_masks(plan)
    _charge("dense_decode", plan.T * plan.E * plan.capacity * plan.M)
    return np.einsum("tec,ecm->tm", weights, Y) + 0.0
