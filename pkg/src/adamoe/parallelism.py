"""Switchable expert parallelism.

P1 (expert + data): every rank stores a ZeRO-style slice of its expert group's
parameters, all-gathers a temporary replica, and processes 1/s of the
expert's tokens. P2 (expert + model): tokens are repeated s times, each rank
multiplies them with its own slice and the partial outputs are summed after
the combine all-to-all. Both use the same slices, so switching is free.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .collectives import LINEAR, all_gather, flex_all2all, reduce_scatter
from .core import FLOAT_BYTES, ConfigError, Dims, ExpertsPerRank, ShapeSet
from .fabric import CostModelParams, RankContext


class Parallel(str, enum.Enum):
    P1 = "P1"
    P2 = "P2"


@dataclass(frozen=True)
class ExpertWeights:
    """Full parameters of every expert: W1 (E, M, V), W2 (E, V, M)."""

    w1: np.ndarray
    w2: np.ndarray

    @property
    def E(self) -> int:
        return self.w1.shape[0]

    @property
    def single_expert_bytes(self) -> int:
        return (self.w1[0].size + self.w2[0].size) * FLOAT_BYTES


def init_experts(rng: np.random.Generator, E: int, M: int, V: int) -> ExpertWeights:
    return ExpertWeights(w1=rng.standard_normal((E, M, V)) / np.sqrt(M),
                         w2=rng.standard_normal((E, V, M)) / np.sqrt(V))


@dataclass(frozen=True)
class RankShard:
    """Parameters stored on one rank: identical under P1 and P2."""

    rank: int
    experts: tuple[int, ...]     # global ids of the hosted experts
    slice_index: int             # position inside the expert's rank group
    n_slices: int
    w1: np.ndarray               # (ΔE, M, V/s)
    w2: np.ndarray               # (ΔE, V/s, M)

    @property
    def group(self) -> list[int]:
        """Ranks holding the other slices of this rank's expert."""
        base = self.rank - self.slice_index
        return list(range(base, base + self.n_slices))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.reshape(-1), self.w2.reshape(-1)])


def shard_experts(weights: ExpertWeights, dims: Dims, rank: int) -> RankShard:
    s = dims.n_sharded
    if dims.V % s:
        raise ConfigError(f"V={dims.V} is not divisible by n_sharded={s}")
    if isinstance(dims.placement, ExpertsPerRank):
        x = dims.placement.count
        ids = tuple(range(rank * x, (rank + 1) * x))
        return RankShard(rank, ids, 0, 1, weights.w1[list(ids)].copy(), weights.w2[list(ids)].copy())
    e, j = divmod(rank, s)
    width = dims.V // s
    cols = slice(j * width, (j + 1) * width)
    return RankShard(rank, (e,), j, s,
                     weights.w1[e:e + 1, :, cols].copy(), weights.w2[e:e + 1, cols, :].copy())


def assemble_experts(shards: list[RankShard], dims: Dims) -> ExpertWeights:
    """Rebuild the full parameters from every rank's slices."""
    w1 = np.zeros((dims.E, dims.M, dims.V))
    w2 = np.zeros((dims.E, dims.V, dims.M))
    for sh in shards:
        width = dims.V // sh.n_slices
        cols = slice(sh.slice_index * width, (sh.slice_index + 1) * width)
        for i, e in enumerate(sh.experts):
            w1[e, :, cols] = sh.w1[i]
            w2[e, cols, :] = sh.w2[i]
    return ExpertWeights(w1, w2)


# -- the expert fflayer ---------------------------------------------------------

def ffn_seconds(rows: int, M: int, V: int, params: CostModelParams) -> float:
    """Simulated time of a two-matmul fflayer over ``rows`` tokens."""
    macs = 2 * rows * M * V
    return 2 * macs / params.flop_rate + 2 * params.launch_overhead


def expert_ffn(x: np.ndarray, w1: np.ndarray, w2: np.ndarray,
               ctx: Optional[RankContext] = None, label: str = "ffn") -> np.ndarray:
    """relu(x @ W1) @ W2 per expert; x is (ΔE, rows, M)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != w1.shape[0] or x.shape[2] != w1.shape[1] \
            or w1.shape[2] != w2.shape[1] or w2.shape[2] != x.shape[2]:
        raise ConfigError(f"ffn shape mismatch: x{x.shape} W1{w1.shape} W2{w2.shape}")
    y = np.maximum(x @ w1, 0.0) @ w2
    if ctx is not None:
        ctx.compute(ffn_seconds(x.shape[0] * x.shape[1], w1.shape[1], w1.shape[2], ctx.params), label)
    return y


def expert_ffn_backward(dy, x, w1, w2, ctx: Optional[RankContext] = None,
                        label: str = "ffn_bwd"):
    """Returns (dx, dW1, dW2) for :func:`expert_ffn`."""
    h = x @ w1
    a = np.maximum(h, 0.0)
    dw2 = a.transpose(0, 2, 1) @ dy
    dh = (dy @ w2.transpose(0, 2, 1)) * (h > 0)
    dw1 = x.transpose(0, 2, 1) @ dh
    dx = dh @ w1.transpose(0, 2, 1)
    if ctx is not None:
        # twice the forward work
        ctx.compute(2 * ffn_seconds(x.shape[0] * x.shape[1], w1.shape[1], w1.shape[2], ctx.params), label)
    return dx, dw1, dw2


# -- P1 ---------------------------------------------------------------------------

def gather_replica(ctx: RankContext, shard: RankShard, dims: Dims,
                   label: str = "param_gather") -> tuple[np.ndarray, np.ndarray]:
    """Temporary full copy of this rank's expert(s) under P1."""
    if shard.n_slices == 1:
        return shard.w1, shard.w2
    flat = all_gather(ctx, shard.flat(), shard.group, label)
    ctx.account(label, flat.nbytes)
    s, width = shard.n_slices, dims.V // shard.n_slices
    parts = flat.reshape(s, -1)
    n1 = dims.M * width
    w1 = np.concatenate([p[:n1].reshape(1, dims.M, width) for p in parts], axis=2)
    w2 = np.concatenate([p[n1:].reshape(1, width, dims.M) for p in parts], axis=1)
    return w1, w2


def p1_dispatch(ctx, tokens, dims, algo=LINEAR, label="dispatch"):
    """(E, c, M) -> (ΔE, W*c, M), or (1, W*c/s, M) for sliced experts."""
    E, c, M = tokens.shape
    s = dims.n_sharded
    if c % s:
        raise ConfigError(f"capacity chunk {c} not divisible by n_sharded={s}")
    buf = tokens.reshape(E * s, c // s, M)
    ctx.account(label, buf.nbytes)
    return flex_all2all(ctx, buf, 1, 0, algo, label)


def p1_combine(ctx, y, dims, algo=LINEAR, label="combine"):
    ctx.account(label, y.nbytes)
    out = flex_all2all(ctx, y, 0, 1, algo, label)
    return out.reshape(dims.E, -1, dims.M)


def run_expert_p1(ctx: RankContext, tokens: np.ndarray, shard: RankShard, dims: Dims,
                  algo: str = LINEAR, replica=None, tag: str = "") -> np.ndarray:
    """Dispatch, run the gathered replica, and combine one (E, c, M) chunk."""
    w1, w2 = replica if replica is not None else gather_replica(ctx, shard, dims)
    x = p1_dispatch(ctx, tokens, dims, algo, f"dispatch{tag}")
    y = expert_ffn(x, w1, w2, ctx, f"ffn{tag}")
    return p1_combine(ctx, y, dims, algo, f"combine{tag}")


# -- P2 ---------------------------------------------------------------------------

def p2_dispatch(ctx, tokens, dims, algo=LINEAR, label="dispatch"):
    """Repeat each expert's tokens for its s slices, then (W, c, M) -> (1, W*c, M)."""
    buf = np.repeat(tokens, dims.n_sharded, axis=0)
    ctx.account(label, buf.nbytes)
    return flex_all2all(ctx, buf, 1, 0, algo, label)


def p2_combine(ctx, partial, dims, algo=LINEAR, label="combine"):
    """Return partial outputs and sum the s slices locally."""
    ctx.account(label, partial.nbytes)
    out = flex_all2all(ctx, partial, 0, 1, algo, label)
    s = dims.n_sharded
    return out.reshape(dims.E, s, -1, dims.M).sum(axis=1)


def run_expert_p2(ctx: RankContext, tokens: np.ndarray, shard: RankShard, dims: Dims,
                  algo: str = LINEAR, tag: str = "") -> np.ndarray:
    x = p2_dispatch(ctx, tokens, dims, algo, f"dispatch{tag}")
    partial = expert_ffn(x, shard.w1, shard.w2, ctx, f"ffn{tag}")
    return p2_combine(ctx, partial, dims, algo, f"combine{tag}")


# -- backward pieces ----------------------------------------------------------------
# the adjoint of flex_all2all(x, 0, 1) is flex_all2all(., 1, 0) and vice versa

def p1_combine_backward(ctx, dout, dims, algo=LINEAR, label="combine_bwd"):
    s = dims.n_sharded
    buf = dout.reshape(dims.E * s, -1, dims.M)
    ctx.account(label, buf.nbytes)
    return flex_all2all(ctx, buf, 1, 0, algo, label)


def p1_dispatch_backward(ctx, dx, dims, algo=LINEAR, label="dispatch_bwd"):
    ctx.account(label, dx.nbytes)
    out = flex_all2all(ctx, dx, 0, 1, algo, label)
    return out.reshape(dims.E, -1, dims.M)


def p2_combine_backward(ctx, dout, dims, algo=LINEAR, label="combine_bwd"):
    buf = np.repeat(dout, dims.n_sharded, axis=0)
    ctx.account(label, buf.nbytes)
    return flex_all2all(ctx, buf, 1, 0, algo, label)


def p2_dispatch_backward(ctx, dx, dims, algo=LINEAR, label="dispatch_bwd"):
    ctx.account(label, dx.nbytes)
    out = flex_all2all(ctx, dx, 0, 1, algo, label)
    return out.reshape(dims.E, dims.n_sharded, -1, dims.M).sum(axis=1)


def reduce_replica_grads(ctx: RankContext, shard: RankShard, dims: Dims, dw1, dw2,
                         label: str = "grad_reduce"):
    """Sum P1 replica gradients over the expert group and keep this rank's slice."""
    s = shard.n_slices
    if s == 1:
        return dw1, dw2
    width = dims.V // s
    parts = [np.concatenate([dw1[:, :, j * width:(j + 1) * width].reshape(-1),
                             dw2[:, j * width:(j + 1) * width, :].reshape(-1)])
             for j in range(s)]
    full = np.concatenate(parts)
    ctx.account(label, full.nbytes)
    mine = reduce_scatter(ctx, full, shard.group, label)
    n1 = dims.M * width
    return mine[:n1].reshape(1, dims.M, width), mine[n1:].reshape(1, width, dims.M)


# -- inline router ----------------------------------------------------------------

def comm_cost_p1(shapes: ShapeSet, param_bytes: float, M: int) -> float:
    """Bytes moved by P1: the dispatch buffer plus one gathered expert."""
    return shapes.delta_e * shapes.gathered * M * FLOAT_BYTES + param_bytes


def comm_cost_p2(shapes: ShapeSet, n_sharded: int, M: int) -> float:
    """Bytes moved by P2: the dispatch buffer repeated for every slice."""
    if n_sharded < 1:
        raise ConfigError("n_sharded must be >= 1")
    return n_sharded * shapes.delta_e * shapes.gathered * M * FLOAT_BYTES


def select_parallelism(shapes: ShapeSet, param_bytes: float, n_sharded: int, M: int) -> Parallel:
    """O(1) choice between P1 and P2 by communication size; ties go to P1."""
    if comm_cost_p2(shapes, n_sharded, M) < comm_cost_p1(shapes, param_bytes, M):
        return Parallel.P2
    return Parallel.P1


def gathered_param_bytes(dims: Dims) -> int:
    """Parameter bytes P1 must all-gather per step (zero for whole experts)."""
    if dims.n_sharded == 1:
        return 0
    return 2 * dims.M * dims.V * FLOAT_BYTES
