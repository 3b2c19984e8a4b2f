import numpy as np
import pytest
from hypothesis import given, strategies as st

from adamoe.core import Dims, ExpertsPerRank, RanksPerExpert, ShapeSet, derive_shapes
from adamoe.fabric import CostModelParams, Topology, run_ranks
from adamoe.layer import choose_parallel, router_shapes
from adamoe.parallelism import (ExpertWeights, Parallel, assemble_experts, comm_cost_p1, comm_cost_p2,
                                expert_ffn, ffn_seconds, gathered_param_bytes, init_experts,
                                run_expert_p1, run_expert_p2, select_parallelism, shard_experts)

P = CostModelParams()


def oracle_ffn(x, w1, w2):
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        h = np.array([max(0.0, float(x[t] @ w1[:, v])) for v in range(w1.shape[1])])
        out[t] = h @ w2
    return out


def test_ffn_hand_cases():
    w1, w2 = np.array([[[1.0]]]), np.array([[[2.0]]])
    assert expert_ffn(np.array([[[3.0], [-3.0]]]), w1, w2).ravel().tolist() == [6.0, 0.0]
    w = init_experts(np.random.default_rng(0), 2, 3, 4)
    assert not expert_ffn(np.zeros((2, 5, 3)), w.w1, w.w2).any()


def test_ffn_matches_loop_oracle():
    rng = np.random.default_rng(1)
    w = init_experts(rng, 3, 4, 6)
    x = rng.standard_normal((3, 7, 4))
    y = expert_ffn(x, w.w1, w.w2)
    for e in range(3):
        np.testing.assert_allclose(y[e], oracle_ffn(x[e], w.w1[e], w.w2[e]), rtol=1e-12, atol=1e-14)


def test_ffn_charges_flops():
    def prog(ctx):
        expert_ffn(np.zeros((2, 5, 3)), np.zeros((2, 3, 4)), np.zeros((2, 4, 3)), ctx)
        return ctx.now
    t = run_ranks(prog, Topology(1, 1), P).results[0]
    assert t == pytest.approx(2 * (2 * 10 * 3 * 4) / P.flop_rate + 2 * P.launch_overhead, rel=1e-15)
    assert ffn_seconds(10, 3, 4, P) == t


@pytest.mark.parametrize("placement,W,E", [(ExpertsPerRank(2), 4, 8), (RanksPerExpert(2), 4, 2),
                                           (RanksPerExpert(4), 8, 2)])
def test_shards_reassemble_bit_exactly(placement, W, E):
    d = Dims(W=W, m=2, E=E, M=3, V=8, T=4, k=1, placement=placement)
    w = init_experts(np.random.default_rng(2), E, 3, 8)
    back = assemble_experts([shard_experts(w, d, r) for r in range(W)], d)
    assert back.w1.tobytes() == w.w1.tobytes() and back.w2.tobytes() == w.w2.tobytes()


def run_both(d, seed=0, cap=4):
    rng = np.random.default_rng(seed)
    w = init_experts(rng, d.E, d.M, d.V)
    tokens = [rng.standard_normal((d.E, cap, d.M)) for _ in range(d.W)]
    shards = [shard_experts(w, d, r) for r in range(d.W)]
    topo = Topology(d.W, d.m)
    p1 = run_ranks(lambda ctx: run_expert_p1(ctx, tokens[ctx.rank], shards[ctx.rank], d), topo, P)
    p2 = run_ranks(lambda ctx: run_expert_p2(ctx, tokens[ctx.rank], shards[ctx.rank], d), topo, P)
    oracle = [np.stack([expert_ffn(t[e:e + 1], w.w1[e:e + 1], w.w2[e:e + 1])[0] for e in range(d.E)])
              for t in tokens]
    return p1, p2, oracle, shards


@pytest.mark.parametrize("placement,W,E", [(ExpertsPerRank(1), 1, 1), (ExpertsPerRank(1), 4, 4),
                                           (ExpertsPerRank(2), 4, 8), (RanksPerExpert(2), 4, 2),
                                           (RanksPerExpert(4), 8, 2)])
def test_p1_p2_match_oracle(placement, W, E):
    d = Dims(W=W, m=2 if W > 1 else 1, E=E, M=3, V=8, T=4, k=1, placement=placement)
    p1, p2, oracle, _ = run_both(d)
    for r in range(W):
        np.testing.assert_allclose(p1.results[r], oracle[r], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(p2.results[r], oracle[r], rtol=1e-12, atol=1e-14)


def test_switching_leaves_slices_untouched():
    d = Dims(W=4, m=2, E=2, M=3, V=8, T=4, k=1, placement=RanksPerExpert(2))
    _, _, _, shards = run_both(d)
    before = [s.flat().tobytes() for s in shards]
    run_both(d)
    assert [s.flat().tobytes() for s in shards] == before


def test_p1_bytes_match_formula():
    d = Dims(W=4, m=2, E=2, M=3, V=8, T=4, k=1, placement=RanksPerExpert(2))
    cap = 4
    w = init_experts(np.random.default_rng(0), d.E, d.M, d.V)
    shards = [shard_experts(w, d, r) for r in range(d.W)]

    def prog(ctx):
        run_expert_p1(ctx, np.zeros((d.E, cap, d.M)), shards[ctx.rank], d)
        return dict(ctx.traffic)

    traffic = run_ranks(prog, Topology(4, 2), P).results[0]
    shapes = ShapeSet(cap, d.W * cap, d.expert_ratio, d.n_sharded)
    assert traffic["param_gather"] == w.single_expert_bytes == gathered_param_bytes(d)
    assert traffic["dispatch"] + traffic["param_gather"] == comm_cost_p1(shapes, gathered_param_bytes(d), d.M)


def shapes(delta_e, C):
    return ShapeSet(C, C, delta_e, 1)


def test_cost_formula_examples():
    assert comm_cost_p1(shapes(1, 8), 0, 2) == 128
    assert comm_cost_p2(shapes(1, 8), 4, 2) == 512
    assert comm_cost_p2(shapes(1, 8), 1, 2) == comm_cost_p1(shapes(1, 8), 0, 2)
    assert comm_cost_p1(shapes(1, 16), 100, 2) - 100 == 2 * (comm_cost_p1(shapes(1, 8), 100, 2) - 100)
    assert comm_cost_p2(shapes(1, 16), 3, 2) == 2 * comm_cost_p2(shapes(1, 8), 3, 2)
    assert comm_cost_p1(shapes(1, 1), 1e9, 2) == pytest.approx(1e9, rel=1e-7)


def test_router_dominance():
    assert select_parallelism(shapes(1, 8), 0, 4, 2) == Parallel.P1
    assert select_parallelism(shapes(1, 1), 1e9, 4, 2) == Parallel.P2
    # exact tie goes to P1: s * tok = tok + param
    assert select_parallelism(shapes(1, 8), 128, 2, 2) == Parallel.P1


@given(st.floats(0.1, 8), st.integers(1, 64), st.floats(0, 1e7), st.integers(1, 8), st.integers(1, 64))
def test_router_is_argmin(delta_e, C, param, s, M):
    sh = shapes(delta_e, C)
    c1, c2 = comm_cost_p1(sh, param, M), comm_cost_p2(sh, s, M)
    choice = select_parallelism(sh, param, s, M)
    assert choice == (Parallel.P2 if c2 < c1 else Parallel.P1)


def two_experts_on_eight_dims():
    # 2 experts on 8 ranks, 2048 tokens per rank
    return Dims(W=8, m=8, E=2, M=2048, V=8192, T=2048, k=1, placement=RanksPerExpert(4))


def test_parallel_choice_single_crossover():
    d = two_experts_on_eight_dims()
    choices = [choose_parallel(d, derive_shapes(d, f).capacity) for f in (1, 2, 4, 8, 16)]
    assert choices == [Parallel.P2, Parallel.P2, Parallel.P1, Parallel.P1, Parallel.P1]
    # crossover by the formulas: (s - 1) * ΔE * C * M * 8 = 2 M V 8 at C = W * 1024 * f
    s, dE = 4, d.E / d.W
    f_star = 2 * d.M * d.V / ((s - 1) * dE * d.W * (d.T / d.E) * d.M)
    assert 2 < f_star < 4


@pytest.mark.parametrize("f", [0.25, 0.5, 1.0, 2.0, 4.0])
def test_chosen_strategy_moves_fewer_bytes_on_fabric(f):
    d = Dims(W=4, m=2, E=2, M=4, V=64, T=8, k=1, placement=RanksPerExpert(2))
    cap = router_shapes(d, derive_shapes(d, f).capacity).capacity
    w = init_experts(np.random.default_rng(0), d.E, d.M, d.V)
    shards = [shard_experts(w, d, r) for r in range(d.W)]
    tokens = np.zeros((d.E, cap, d.M))

    def measure(runner):
        def prog(ctx):
            runner(ctx, tokens, shards[ctx.rank], d)
            return ctx.traffic.get("dispatch", 0) + ctx.traffic.get("param_gather", 0)
        return run_ranks(prog, Topology(4, 2), P).results[0]

    b1, b2 = measure(run_expert_p1), measure(run_expert_p2)
    chosen = choose_parallel(d, derive_shapes(d, f).capacity)
    assert (b1 if chosen == Parallel.P1 else b2) <= min(b1, b2)
