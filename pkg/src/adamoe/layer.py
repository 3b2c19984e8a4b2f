"""End-to-end MoE layer over simulated ranks, plus a dense single-rank oracle.

Each step: gate every rank's tokens, resolve the capacity, choose P1/P2 by
communication size, choose an all-to-all algorithm and pipelining degree
(fixed or by online search), then run encode -> dispatch -> experts ->
combine -> decode on the fabric. Adaptivity changes the simulated clock
only; the returned values are the same for every choice.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import gating
from .collectives import all2all_time, all_gather_time
from .core import (FLOAT_BYTES, CapacityPolicy, ConfigError, Dims, Fixed, ShapeSet,
                   as_tensor, ceil_to_multiple, effective_factor, make_rng, resolve_capacity)
from .dispatch import (decode_dense_reference, encode_dense_reference, fast_decode,
                       fast_decode_backward, fast_encode, fast_encode_backward, make_plan)
from .fabric import CostModelParams, RankContext, Topology, run_ranks
from .parallelism import (ExpertWeights, Parallel, assemble_experts, comm_cost_p1, comm_cost_p2,
                          expert_ffn, expert_ffn_backward, ffn_seconds, gather_replica,
                          gathered_param_bytes, init_experts, p1_combine, p1_combine_backward,
                          p1_dispatch, p1_dispatch_backward, p2_combine, p2_combine_backward,
                          p2_dispatch, p2_dispatch_backward, reduce_replica_grads,
                          select_parallelism, shard_experts)
from .pipeline import (Strategy, StrategyMemo, Timeline, get_strategy, merge_capacity,
                       optimize_strategy, partition_capacity, simulate_overlapped_step)

ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class MoELayerConfig:
    dims: Dims
    capacity: CapacityPolicy = Fixed(1.0)
    router: str = "linear"                      # or "cosine"
    bpr: bool = False
    strategy: Union[Strategy, str] = ADAPTIVE
    parallel: Union[Parallel, str] = ADAPTIVE
    cost: CostModelParams = CostModelParams()
    bucket_length: float = 0.5
    cosine_dim: int = 16
    cosine_temperature: float = 0.5

    def __post_init__(self):
        if self.router not in ("linear", "cosine"):
            raise ConfigError(f"unknown router {self.router!r}")
        if self.strategy != ADAPTIVE and not isinstance(self.strategy, Strategy):
            raise ConfigError(f"strategy must be a Strategy or 'adaptive', got {self.strategy!r}")
        if self.parallel != ADAPTIVE and not isinstance(self.parallel, Parallel):
            raise ConfigError(f"parallel must be P1, P2 or 'adaptive', got {self.parallel!r}")


@dataclass
class Routing:
    """Routing of every rank's batch; the gates are recomputed from x on use."""

    idxs: list[np.ndarray]
    locations: list[np.ndarray]
    capacity: int
    demand: np.ndarray          # (W, E) requests before capacity


@dataclass
class StepMetrics:
    step: int
    f: float
    capacity: int
    padded_capacity: int
    strategy: Strategy
    parallel: Parallel
    seconds: float
    dispatch_bytes: int
    combine_bytes: int
    param_bytes: int
    dropped: int
    dispatched: int
    timeline: Timeline = field(repr=False, default_factory=Timeline)

    @property
    def comm_bytes(self) -> int:
        """Dispatch-direction bytes: the quantity the P1/P2 router compares."""
        return self.dispatch_bytes + self.param_bytes


@dataclass
class Gradients:
    dx: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    router: dict


# -- per-step simulated charges (shared by the fabric run and the closed form) ---

def gate_seconds(dims: Dims, params: CostModelParams) -> float:
    return 2 * dims.T * dims.M * dims.E / params.flop_rate + params.launch_overhead


def codec_seconds(dims: Dims, params: CostModelParams) -> float:
    """Encode or decode: one pass over T*k token rows."""
    return dims.T * dims.k * dims.M * FLOAT_BYTES / params.memcpy_bandwidth + params.launch_overhead


def padded_capacity(capacity: int, dims: Dims, degree: int) -> int:
    return ceil_to_multiple(capacity, dims.n_sharded * degree)


def chunk_costs(dims: Dims, capacity: int, strategy: Strategy, parallel: Parallel,
                params: CostModelParams, topo: Optional[Topology] = None):
    """Closed-form (a2a1, ffn, a2a2) seconds for each pipelined chunk."""
    topo = topo or Topology(dims.W, dims.m)
    c = padded_capacity(capacity, dims, strategy.degree) // strategy.degree
    s = dims.n_sharded
    if parallel == Parallel.P2:
        nbytes = dims.E * s * c * dims.M * FLOAT_BYTES
        ffn = ffn_seconds(dims.E * s * c, dims.M, dims.V // s, params)
    else:
        nbytes = dims.E * c * dims.M * FLOAT_BYTES
        ffn = ffn_seconds(dims.E * c, dims.M, dims.V, params)
    a2a = all2all_time(nbytes, topo, params, strategy.algo)
    return [(a2a, ffn, a2a)] * strategy.degree


def predict_step_seconds(dims: Dims, capacity: int, strategy: Strategy, parallel: Parallel,
                         params: CostModelParams) -> float:
    """Forward-step time without materializing payloads."""
    topo = Topology(dims.W, dims.m)
    t = gate_seconds(dims, params) + 2 * codec_seconds(dims, params)
    if parallel == Parallel.P1 and dims.n_sharded > 1:
        shard_bytes = gathered_param_bytes(dims) / dims.n_sharded
        t += all_gather_time(shard_bytes, dims.n_sharded, topo, params)
    _, span = simulate_overlapped_step(chunk_costs(dims, capacity, strategy, parallel, params, topo),
                                       params.interference)
    return t + span


def router_shapes(dims: Dims, capacity: int) -> ShapeSet:
    cap = ceil_to_multiple(capacity, dims.n_sharded)
    return ShapeSet(capacity=cap, gathered=dims.W * cap,
                    delta_e=dims.expert_ratio, n_sharded=dims.n_sharded)


def choose_parallel(dims: Dims, capacity: int) -> Parallel:
    return select_parallelism(router_shapes(dims, capacity), gathered_param_bytes(dims),
                              dims.n_sharded, dims.M)


_CHUNK_LABEL = re.compile(r"^(dispatch|ffn|combine)(?:_bwd)?(\d+)")
_PHASE = {"dispatch": 0, "ffn": 1, "combine": 2}


def _costs_from_record(record, degree: int, backward: bool = False):
    costs = [[0.0, 0.0, 0.0] for _ in range(degree)]
    for label, _, seconds in record:
        m = _CHUNK_LABEL.match(label)
        if m is None:
            raise ConfigError(f"unexpected op {label!r} inside the pipelined region")
        costs[int(m.group(2))][_PHASE[m.group(1)]] += seconds
    if backward:
        # gradients flow combine -> ffn -> dispatch
        costs = [[c[2], c[1], c[0]] for c in costs]
    return [tuple(c) for c in costs]


def _charge_timeline(ctx: RankContext, timeline: Timeline):
    ctx.charge_schedule([(iv.stream, f"{iv.phase}{iv.chunk}", iv.start, iv.end)
                         for iv in timeline.intervals])


def _traffic(ctx: RankContext, kind: str) -> int:
    return sum(v for k, v in ctx.traffic.items() if re.sub(r"\d+$", "", k) == kind)


class MoELayer:
    """One MoE layer whose experts live as slices on ``W`` simulated ranks."""

    def __init__(self, config: MoELayerConfig, seed: int = 0):
        self.config = config
        d = config.dims
        rng = make_rng(seed)
        if config.router == "linear":
            self.router_weight = gating.init_linear_router(rng, d.M, d.E)
            self.cosine = None
        else:
            self.router_weight = None
            self.cosine = gating.init_cosine_router(rng, d.M, d.E, config.cosine_dim,
                                                    config.cosine_temperature)
        full = init_experts(rng, d.E, d.M, d.V)
        self.shards = [shard_experts(full, d, r) for r in range(d.W)]
        self.memo = StrategyMemo(config.bucket_length)
        self.step = 0
        self.history: list[StepMetrics] = []
        self._saved = None

    # -- parameters ---------------------------------------------------------------
    @property
    def dims(self) -> Dims:
        return self.config.dims

    def experts(self) -> ExpertWeights:
        return assemble_experts(self.shards, self.dims)

    def set_experts(self, weights: ExpertWeights):
        self.shards = [shard_experts(weights, self.dims, r) for r in range(self.dims.W)]

    # -- routing ----------------------------------------------------------------
    def probs(self, x_rank: np.ndarray) -> np.ndarray:
        if self.config.router == "linear":
            return gating.gate_linear(x_rank, self.router_weight)
        return gating.gate_cosine(x_rank, self.cosine)

    def route(self, x: np.ndarray) -> Routing:
        d = self.dims
        idxs, gates = zip(*(gating.topk_select(self.probs(x[r]), d.k) for r in range(d.W)))
        demand = np.stack([gating.expert_demand(i, d.E) for i in idxs])
        cap = resolve_capacity(self.config.capacity, demand, d)
        locs = [gating.assign_locations(i, g, cap, self.config.bpr) for i, g in zip(idxs, gates)]
        return Routing(list(idxs), locs, cap, demand)

    def _gate_outputs(self, x, routing: Routing, capacity: int):
        outs = []
        for r in range(self.dims.W):
            p = self.probs(x[r])
            g = np.take_along_axis(p, routing.idxs[r], axis=1)
            outs.append(gating.GateOutput(routing.idxs[r], routing.locations[r], g, capacity))
        return outs

    def _check_x(self, x) -> np.ndarray:
        d = self.dims
        x = as_tensor(x, name="x")
        if x.ndim == 2 and d.W == 1:
            x = x[None]
        if x.shape != (d.W, d.T, d.M):
            raise ConfigError(f"x has shape {x.shape}, expected (W, T, M) = {(d.W, d.T, d.M)}")
        return x

    # -- decisions ---------------------------------------------------------------
    def decide(self, routing: Routing) -> tuple[float, Parallel, Strategy]:
        d, cfg = self.dims, self.config
        f = round(effective_factor(routing.capacity, d), 9)
        parallel = choose_parallel(d, routing.capacity) if cfg.parallel == ADAPTIVE else cfg.parallel
        strategy = get_strategy(self.memo, f) if cfg.strategy == ADAPTIVE else cfg.strategy
        return f, parallel, strategy

    # -- forward -----------------------------------------------------------------
    def forward(self, x, routing: Optional[Routing] = None,
                strategy: Optional[Strategy] = None, parallel: Optional[Parallel] = None):
        """Run one step; returns (y of shape (W, T, M), StepMetrics)."""
        d, params = self.dims, self.config.cost
        x = self._check_x(x)
        routing = routing or self.route(x)
        f, auto_parallel, auto_strategy = self.decide(routing)
        parallel = parallel or auto_parallel
        strategy = strategy or auto_strategy
        degree = strategy.degree
        cap_p = padded_capacity(routing.capacity, d, degree)
        gates = self._gate_outputs(x, routing, cap_p)
        plans = [make_plan(g, d.E, d.M) for g in gates]
        shards = self.shards
        algo = strategy.algo
        p1 = parallel == Parallel.P1

        def program(ctx: RankContext):
            r = ctx.rank
            start = ctx.now
            ctx.compute(gate_seconds(d, params), "gate")
            Z = fast_encode(x[r], plans[r])
            ctx.compute(codec_seconds(d, params), "encode")
            w1, w2 = gather_replica(ctx, shards[r], d) if p1 else (shards[r].w1, shards[r].w2)
            chunks = partition_capacity(Z, degree)
            with ctx.deferred() as rec:
                if p1:
                    xs = [p1_dispatch(ctx, c, d, algo, f"dispatch{i}") for i, c in enumerate(chunks)]
                else:
                    xs = [p2_dispatch(ctx, c, d, algo, f"dispatch{i}") for i, c in enumerate(chunks)]
                ys = [expert_ffn(xi, w1, w2, ctx, f"ffn{i}") for i, xi in enumerate(xs)]
                if p1:
                    outs = [p1_combine(ctx, yi, d, algo, f"combine{i}") for i, yi in enumerate(ys)]
                else:
                    outs = [p2_combine(ctx, yi, d, algo, f"combine{i}") for i, yi in enumerate(ys)]
            timeline, _ = simulate_overlapped_step(_costs_from_record(rec, degree), params.interference)
            _charge_timeline(ctx, timeline)
            Y = merge_capacity(outs, cap_p)
            y = fast_decode(Y, plans[r])
            ctx.compute(codec_seconds(d, params), "decode")
            traffic = {k: _traffic(ctx, k) for k in ("dispatch", "combine", "param_gather")}
            return y, {"xs": xs, "Y": Y}, ctx.now - start, timeline, traffic

        run = run_ranks(program, Topology(d.W, d.m), params)
        y = np.stack([res[0] for res in run.results])
        seconds = run.results[0][2]
        traffic = run.results[0][4]
        dispatched = int(sum((loc >= 0).sum() for loc in routing.locations))
        metrics = StepMetrics(
            step=self.step, f=f, capacity=routing.capacity, padded_capacity=cap_p,
            strategy=strategy, parallel=parallel, seconds=seconds,
            dispatch_bytes=traffic["dispatch"], combine_bytes=traffic["combine"],
            param_bytes=traffic["param_gather"],
            dropped=int(sum((loc < 0).sum() for loc in routing.locations)),
            dispatched=dispatched, timeline=run.results[0][3])
        if self.config.strategy == ADAPTIVE:
            optimize_strategy(self.memo, f, strategy, seconds)
        self._saved = dict(x=x, routing=routing, plans=plans, strategy=strategy,
                           parallel=parallel, cap_p=cap_p,
                           per_rank=[res[1] for res in run.results])
        self.step += 1
        self.history.append(metrics)
        return y, metrics

    __call__ = forward

    # -- backward ----------------------------------------------------------------
    def backward(self, dy) -> Gradients:
        """Reverse pass of the last forward; routing indices are constants."""
        if self._saved is None:
            raise ConfigError("backward called before forward")
        d, params, sv = self.dims, self.config.cost, self._saved
        dy = as_tensor(dy, (d.W, d.T, d.M), "dy")
        strategy, degree, cap_p = sv["strategy"], sv["strategy"].degree, sv["cap_p"]
        p1 = sv["parallel"] == Parallel.P1
        plans, per_rank, shards, algo = sv["plans"], sv["per_rank"], self.shards, sv["strategy"].algo

        def program(ctx: RankContext):
            r = ctx.rank
            dY, dgates = fast_decode_backward(dy[r], per_rank[r]["Y"], plans[r])
            ctx.compute(codec_seconds(d, params), "decode_bwd")
            w1, w2 = gather_replica(ctx, shards[r], d) if p1 else (shards[r].w1, shards[r].w2)
            chunks = partition_capacity(dY, degree)
            xs = per_rank[r]["xs"]
            dw1 = np.zeros_like(w1)
            dw2 = np.zeros_like(w2)
            with ctx.deferred() as rec:
                if p1:
                    gs = [p1_combine_backward(ctx, c, d, algo, f"combine_bwd{i}") for i, c in enumerate(chunks)]
                else:
                    gs = [p2_combine_backward(ctx, c, d, algo, f"combine_bwd{i}") for i, c in enumerate(chunks)]
                dxs = []
                for i, g in enumerate(gs):
                    dxi, a, b = expert_ffn_backward(g, xs[i], w1, w2, ctx, f"ffn_bwd{i}")
                    dxs.append(dxi)
                    dw1 += a
                    dw2 += b
                if p1:
                    dzs = [p1_dispatch_backward(ctx, g, d, algo, f"dispatch_bwd{i}") for i, g in enumerate(dxs)]
                else:
                    dzs = [p2_dispatch_backward(ctx, g, d, algo, f"dispatch_bwd{i}") for i, g in enumerate(dxs)]
            timeline, _ = simulate_overlapped_step(_costs_from_record(rec, degree, backward=True),
                                                   params.interference)
            _charge_timeline(ctx, timeline)
            if p1:
                dw1, dw2 = reduce_replica_grads(ctx, shards[r], d, dw1, dw2)
            dZ = merge_capacity(dzs, cap_p)
            dx = fast_encode_backward(dZ, plans[r])
            ctx.compute(codec_seconds(d, params), "encode_bwd")
            return dx, dgates, dw1, dw2

        run = run_ranks(program, Topology(d.W, d.m), params)
        dx = np.stack([res[0] for res in run.results])
        grad_shards = [
            type(sh)(sh.rank, sh.experts, sh.slice_index, sh.n_slices, res[2], res[3])
            for sh, res in zip(shards, run.results)]
        grads_full = assemble_experts(grad_shards, d)
        router_grads = {}
        x, routing = sv["x"], sv["routing"]
        for r in range(d.W):
            dxr, rg = self._router_backward(x[r], routing.idxs[r], run.results[r][1])
            dx[r] += dxr
            for key, val in rg.items():
                router_grads[key] = router_grads.get(key, 0.0) + val
        return Gradients(dx=dx, w1=grads_full.w1, w2=grads_full.w2, router=router_grads)

    def _router_backward(self, x, idxs, dgates):
        d = self.dims
        p = self.probs(x)
        dp = np.zeros_like(p)
        np.add.at(dp, (np.arange(d.T)[:, None], idxs), dgates)
        dlogits = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        if self.config.router == "linear":
            return dlogits @ self.router_weight.T, {"weight": x.T @ dlogits}
        return _cosine_backward(x, self.cosine, dlogits)


def _cosine_backward(x, router: gating.CosineRouter, dlogits):
    """Gradients of softmax-free cosine logits w.r.t. x, projection and expert matrix."""
    P, Em, tau = router.projection, router.experts, router.tau
    h = x @ P
    hn = np.linalg.norm(h, axis=1, keepdims=True)
    en = np.linalg.norm(Em, axis=1, keepdims=True)
    u, v = h / hn, Em / en
    dcos = dlogits / tau
    du = dcos @ v
    dv = dcos.T @ u
    dh = (du - u * (du * u).sum(axis=1, keepdims=True)) / hn
    dE = (dv - v * (dv * v).sum(axis=1, keepdims=True)) / en
    grads = {"projection": x.T @ dh, "experts": dE}
    if router.temperature < gating.MIN_TEMPERATURE:
        grads["temperature"] = 0.0
    else:
        grads["temperature"] = -float((dlogits * (u @ v.T)).sum()) / tau ** 2
    return dh @ P.T, grads


# -- dense single-rank oracle ------------------------------------------------------

def reference_forward(x, layer: MoELayer, routing: Optional[Routing] = None,
                      weights: Optional[ExpertWeights] = None) -> np.ndarray:
    """Dense evaluation on one rank: one-hot masks, every expert local.

    When ``routing`` is given its indices and slots are reused while the gate
    values are recomputed from ``x``.
    """
    d = layer.dims
    x = layer._check_x(x)
    routing = routing or layer.route(x)
    weights = weights or layer.experts()
    out = np.empty_like(x)
    for r in range(d.W):
        p = layer.probs(x[r])
        g = np.take_along_axis(p, routing.idxs[r], axis=1)
        gate = gating.GateOutput(routing.idxs[r], routing.locations[r], g, routing.capacity)
        plan = make_plan(gate, d.E, d.M)
        Z = encode_dense_reference(x[r], plan)
        Y = np.stack([np.maximum(Z[e] @ weights.w1[e], 0.0) @ weights.w2[e] for e in range(d.E)])
        out[r] = decode_dense_reference(Y, plan)
    return out
