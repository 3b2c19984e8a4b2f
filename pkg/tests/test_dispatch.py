import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adamoe.dispatch import (count_scalar_ops, decode_dense_reference, encode_dense_reference,
                             fast_decode, fast_decode_backward, fast_encode, fast_encode_backward,
                             make_plan)
from adamoe.gating import GateOutput

from conftest import central_diff, loop_decode, loop_encode, random_plan


def plan_of(idxs, locs, gates, cap, E, M):
    g = GateOutput(np.array(idxs), np.array(locs), np.array(gates, dtype=float), cap)
    return make_plan(g, E, M)


def test_direct_scatter_example():
    plan = plan_of([[1], [0]], [[0], [0]], [[1.0], [1.0]], 1, 2, 1)
    x = np.array([[1.0], [2.0]])
    assert fast_encode(x, plan).tolist() == [[[2.0]], [[1.0]]]
    assert encode_dense_reference(x, plan).tolist() == [[[2.0]], [[1.0]]]


def test_unrouted_expert_is_zero_and_all_dropped():
    plan = plan_of([[0], [0]], [[0], [1]], [[1.0], [1.0]], 2, 3, 2)
    Z = fast_encode(np.ones((2, 2)), plan)
    assert not Z[1:].any()
    dropped = plan_of([[0], [1]], [[-1], [-1]], [[1.0], [1.0]], 1, 2, 2)
    assert not fast_encode(np.ones((2, 2)), dropped).any()


def test_zero_gates_decode_to_zero():
    plan = plan_of([[0], [1]], [[0], [0]], [[0.0], [0.0]], 1, 2, 3)
    assert not fast_decode(np.ones((2, 1, 3)), plan).any()


def test_round_trip_identity():
    rng = np.random.default_rng(0)
    T, E, M = 12, 4, 3
    idxs = rng.integers(0, E, (T, 1))
    locs = np.zeros((T, 1), dtype=int)
    for e in range(E):
        rows = np.flatnonzero(idxs[:, 0] == e)
        locs[rows, 0] = np.arange(rows.size)
    plan = plan_of(idxs, locs, np.ones((T, 1)), T, E, M)
    x = rng.standard_normal((T, M))
    assert fast_decode(fast_encode(x, plan), plan).tobytes() == x.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.integers(1, 8), st.integers(1, 16),
       st.integers(1, 8), st.integers(1, 2), st.booleans())
def test_matches_independent_loops(seed, T, E, cap, M, k, bpr):
    rng = np.random.default_rng(seed)
    plan = random_plan(rng, T, E, cap, M, min(k, E), bpr)
    x = rng.standard_normal((T, M))
    Y = rng.standard_normal((E, cap, M))
    Z = fast_encode(x, plan)
    assert Z.tobytes() == loop_encode(x, plan).tobytes()
    assert Z.tobytes() == encode_dense_reference(x, plan).tobytes()
    y = fast_decode(Y, plan)
    np.testing.assert_allclose(y, loop_decode(Y, plan), rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(y, decode_dense_reference(Y, plan), rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 32), st.integers(1, 6), st.integers(1, 8))
def test_encode_adjointness(seed, T, E, cap):
    rng = np.random.default_rng(seed)
    plan = random_plan(rng, T, E, cap, 3, min(2, E))
    x = rng.standard_normal((T, 3))
    Zp = rng.standard_normal((E, cap, 3))
    lhs = np.vdot(fast_encode(x, plan), Zp)
    rhs = np.vdot(x, fast_encode_backward(Zp, plan))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_backward_trivial_cases():
    plan = plan_of([[0]], [[0]], [[0.3]], 1, 1, 1)
    assert not fast_encode_backward(np.zeros((1, 1, 1)), plan).any()
    dY, dg = fast_decode_backward(np.zeros((1, 1)), np.ones((1, 1, 1)), plan)
    assert not dY.any() and not dg.any()
    dY, dg = fast_decode_backward(np.array([[2.0]]), np.array([[[5.0]]]), plan)
    assert dY[0, 0, 0] == pytest.approx(0.3 * 2.0)
    assert dg[0, 0] == pytest.approx(5.0 * 2.0)
    one = plan_of([[1]], [[0]], [[1.0]], 1, 2, 2)
    dZ = np.arange(4.0).reshape(2, 1, 2)
    assert fast_encode_backward(dZ, one).tolist() == [[2.0, 3.0]]


@pytest.mark.parametrize("seed", range(5))
def test_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    T, E, cap, M, k = 8, 4, 3, 3, 2
    plan = random_plan(rng, T, E, cap, M, k)
    x = rng.standard_normal((T, M))
    Y = rng.standard_normal((E, cap, M))
    R = rng.standard_normal((E, cap, M))
    dy = rng.standard_normal((T, M))

    fd = central_diff(lambda xx: np.vdot(fast_encode(xx, plan), R), x, 1e-5)
    np.testing.assert_allclose(fast_encode_backward(R, plan), fd, rtol=1e-6, atol=1e-9)

    dY, dg = fast_decode_backward(dy, Y, plan)
    np.testing.assert_allclose(dY, central_diff(lambda yy: np.vdot(fast_decode(yy, plan), dy), Y, 1e-5),
                               rtol=1e-6, atol=1e-9)

    def via_gates(g):
        p = make_plan(plan.gate.__class__(plan.gate.idxs, plan.gate.locations, g, cap), E, M)
        return np.vdot(fast_decode(Y, p), dy)
    np.testing.assert_allclose(dg, central_diff(via_gates, plan.gate.gates.copy(), 1e-5),
                               rtol=1e-6, atol=1e-9)


def test_op_counts_at_reference_size():
    rng = np.random.default_rng(0)
    T, E, cap, M, k = 64, 8, 16, 4, 2
    plan = random_plan(rng, T, E, cap, M, k)
    x = rng.standard_normal((T, M))
    with count_scalar_ops() as sparse:
        fast_encode(x, plan)
    with count_scalar_ops() as dense:
        encode_dense_reference(x, plan)
    assert sparse.total <= 2 * T * k * M == 1024
    assert dense.total >= T * E * cap * M == 32768


def test_dense_to_sparse_ratio_grows_with_T():
    ratios = []
    for T in (16, 32, 64, 128):
        k, E = 2, 8
        cap = T * k // E
        rng = np.random.default_rng(T)
        plan = random_plan(rng, T, E, cap, 2, k)
        x = rng.standard_normal((T, 2))
        with count_scalar_ops() as s:
            fast_encode(x, plan)
        with count_scalar_ops() as d:
            encode_dense_reference(x, plan)
        ratios.append(d.total / max(s.total, 1))
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    # E * cap = T * k, so the dense count is T^2 k M and the ratio is linear in T
    assert ratios[-1] / ratios[0] == pytest.approx(8, rel=0.35)
