"""All-to-all family built on grouped point-to-point exchanges."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import ConfigError
from .fabric import INTER, INTRA, CostModelParams, RankContext, Topology, p2p_cost

LINEAR = "linear"
TWO_DH = "2dh"
ALGORITHMS = (LINEAR, TWO_DH)


def _chunks(buffer: np.ndarray, n: int) -> np.ndarray:
    flat = np.ascontiguousarray(buffer).reshape(-1)
    if flat.size % n:
        raise ConfigError(f"buffer of {flat.size} elements does not split into {n} chunks")
    return flat.reshape(n, -1)


def stride_memcpy(buffer: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Chunk-level transpose of a (cols, rows) grid into a (rows, cols) grid.

    ``out[r * cols + c] = in[c * rows + r]``. Chunk size is
    ``len(buffer) / (rows * cols)``.
    """
    grid = _chunks(buffer, rows * cols).reshape(cols, rows, -1)
    return np.ascontiguousarray(grid.transpose(1, 0, 2)).reshape(-1)


def all2all_linear(ctx: RankContext, buffer: np.ndarray, label: str = "a2a") -> np.ndarray:
    """Chunk g of rank r ends up as chunk r of rank g, via one group of sends."""
    W = ctx.W
    chunks = _chunks(buffer, W)
    sends = [(peer, chunks[peer]) for peer in range(W)]
    recvs = [(peer, chunks[peer].nbytes) for peer in range(W)]
    got = ctx.grouped_p2p(sends, recvs, label)
    return np.concatenate(got)


def all2all_2dh(ctx: RankContext, buffer: np.ndarray, label: str = "a2a",
                phases: Optional[list] = None) -> np.ndarray:
    """Hierarchical all-to-all: aggregate inside the node, then one message per node.

    Produces the same permutation as :func:`all2all_linear`. When ``phases``
    is a list, the buffer after each of the four phases is appended to it.
    """
    topo = ctx.topo
    m, nodes, W = topo.m, topo.n_nodes, topo.W
    chunks = _chunks(buffer, W)
    node, local = topo.node(ctx.rank), topo.local_rank(ctx.rank)
    both = m > 1 and nodes > 1

    # phase 1: chunks with the same local destination become contiguous
    buf = stride_memcpy(chunks, m, nodes)
    if both:
        ctx.memcpy(buf.nbytes, f"{label}:stride1")
    _record(phases, buf, W)

    # phase 2: intra-node exchange of m blocks of (nodes) chunks
    if m > 1:
        blocks = buf.reshape(m, -1)
        peers = [node * m + g for g in range(m)]
        got = ctx.grouped_p2p([(p, blocks[g]) for g, p in enumerate(peers)],
                              [(p, blocks[g].nbytes) for g, p in enumerate(peers)],
                              f"{label}:intra")
        buf = np.concatenate(got)
    _record(phases, buf, W)

    # phase 3: chunks with the same remote node become contiguous
    buf = stride_memcpy(buf, nodes, m)
    if both:
        ctx.memcpy(buf.nbytes, f"{label}:stride2")
    _record(phases, buf, W)

    # phase 4: inter-node exchange of (nodes) blocks of m chunks
    if nodes > 1:
        blocks = buf.reshape(nodes, -1)
        peers = [n * m + local for n in range(nodes)]
        got = ctx.grouped_p2p([(p, blocks[n]) for n, p in enumerate(peers)],
                              [(p, blocks[n].nbytes) for n, p in enumerate(peers)],
                              f"{label}:inter")
        buf = np.concatenate(got)
    _record(phases, buf, W)
    return buf


def _record(phases, buf, W):
    if phases is not None:
        phases.append(buf.reshape(W, -1).copy())


def all2all(ctx: RankContext, buffer: np.ndarray, algo: str = LINEAR,
            label: str = "a2a") -> np.ndarray:
    if algo == LINEAR:
        return all2all_linear(ctx, buffer, label)
    if algo == TWO_DH:
        return all2all_2dh(ctx, buffer, label)
    raise ConfigError(f"unknown all-to-all algorithm {algo!r}")


def flex_all2all(ctx: RankContext, x: np.ndarray, concat_dim: int, split_dim: int,
                 algo: str = LINEAR, label: str = "flex_a2a") -> np.ndarray:
    """All-to-all that splits ``split_dim`` across ranks and concatenates on ``concat_dim``.

    ``(E, ΔC, M)`` with ``(1, 0)`` becomes ``(ΔE, W*ΔC, M)``; ``(0, 1)`` undoes it.
    Received pieces are concatenated in source-rank order.
    """
    if concat_dim == split_dim:
        raise ConfigError("concat_dim and split_dim must differ")
    W = ctx.W
    x = np.asarray(x, dtype=np.float64)
    if x.shape[split_dim] % W:
        raise ConfigError(f"axis {split_dim} of extent {x.shape[split_dim]} is not divisible by W={W}")
    pieces = np.split(x, W, axis=split_dim)
    piece_shape = pieces[0].shape
    buffer = np.concatenate([np.ascontiguousarray(p).reshape(-1) for p in pieces])
    out = all2all(ctx, buffer, algo, label)
    received = out.reshape(W, *piece_shape)
    return np.concatenate(list(received), axis=concat_dim)


def all_gather(ctx: RankContext, shard: np.ndarray, group: Optional[Sequence[int]] = None,
               label: str = "all_gather") -> np.ndarray:
    """Concatenate equal-size shards of ``group`` (default: all ranks) in rank order."""
    group = list(range(ctx.W)) if group is None else list(group)
    shard = np.ascontiguousarray(shard, dtype=np.float64)
    got = ctx.grouped_p2p([(p, shard) for p in group],
                          [(p, shard.nbytes) for p in group], label)
    return np.concatenate([g.reshape(-1) for g in got])


def reduce_scatter(ctx: RankContext, full: np.ndarray, group: Optional[Sequence[int]] = None,
                   label: str = "reduce_scatter") -> np.ndarray:
    """Sum ``full`` over ``group`` and keep this rank's equal slice."""
    group = list(range(ctx.W)) if group is None else list(group)
    parts = _chunks(full, len(group))
    got = ctx.grouped_p2p([(p, parts[i]) for i, p in enumerate(group)],
                          [(p, parts[0].nbytes) for p in group], label)
    total = np.zeros_like(got[0])
    for g in got:
        total += g
    return total


def tile_capacity(x: np.ndarray, tile_size: int) -> list[np.ndarray]:
    """Split the capacity axis of (ΔE, C, M) into fixed-size, zero-padded tiles."""
    if tile_size < 1:
        raise ConfigError("tile_size must be >= 1")
    C = x.shape[1]
    if tile_size >= C:
        return [x]
    n = -(-C // tile_size)
    padded = np.zeros((x.shape[0], n * tile_size) + x.shape[2:])
    padded[:, :C] = x
    return [padded[:, i * tile_size:(i + 1) * tile_size] for i in range(n)]


def untile_capacity(tiles: Sequence[np.ndarray], C: int) -> np.ndarray:
    return np.concatenate(list(tiles), axis=1)[:, :C]


# -- closed-form timing (no payloads), used above the materialization threshold --

def linear_time(nbytes: float, topo: Topology, params: CostModelParams) -> float:
    """Predicted seconds for a linear all-to-all of ``nbytes`` per rank."""
    W, m = topo.W, topo.m
    chunk = nbytes / W
    intra = (m - 1) * p2p_cost(chunk, INTRA, params)
    inter = (W - m) * p2p_cost(chunk, INTER, params)
    return max(intra, inter)


def two_dh_time(nbytes: float, topo: Topology, params: CostModelParams) -> float:
    m, nodes = topo.m, topo.n_nodes
    t = 0.0
    if m > 1 and nodes > 1:
        t += 2 * nbytes / params.memcpy_bandwidth
    if m > 1:
        t += (m - 1) * p2p_cost(nbytes / m, INTRA, params)
    if nodes > 1:
        t += (nodes - 1) * p2p_cost(nbytes / nodes, INTER, params)
    return t


def all2all_time(nbytes: float, topo: Topology, params: CostModelParams,
                 algo: str = LINEAR) -> float:
    if algo == LINEAR:
        return linear_time(nbytes, topo, params)
    if algo == TWO_DH:
        return two_dh_time(nbytes, topo, params)
    raise ConfigError(f"unknown all-to-all algorithm {algo!r}")


def all_gather_time(shard_bytes: float, group: int, topo: Topology,
                    params: CostModelParams) -> float:
    """Seconds for an all-gather within ``group`` consecutive ranks."""
    if group <= 1:
        return 0.0
    local = min(group, topo.m)
    intra = (local - 1) * p2p_cost(shard_bytes, INTRA, params)
    inter = (group - local) * p2p_cost(shard_bytes, INTER, params)
    return max(intra, inter)


def message_sizes(nbytes: float, topo: Topology, algo: str) -> list[float]:
    """Sizes of the network messages one rank issues (self-copies excluded)."""
    W, m, nodes = topo.W, topo.m, topo.n_nodes
    if algo == LINEAR:
        return [nbytes / W] * (W - 1)
    return [nbytes / m] * (m - 1) + [nbytes / nodes] * (nodes - 1)
