from dataclasses import replace

import numpy as np
import pytest

from adamoe.core import Auto, ConfigError, Dims, ExpertsPerRank, Fixed, RanksPerExpert
from adamoe.layer import (MoELayer, MoELayerConfig, choose_parallel, predict_step_seconds,
                          reference_forward)
from adamoe.parallelism import ExpertWeights, Parallel
from adamoe.pipeline import BASELINE, STRATEGIES, Strategy

from conftest import central_diff


def make_layer(W=4, m=2, E=8, M=4, V=8, T=16, k=2, placement=None, f=1.0, router="linear",
               seed=0, **kw):
    placement = placement or ExpertsPerRank(E // W)
    d = Dims(W=W, m=m, E=E, M=M, V=V, T=T, k=k, placement=placement)
    policy = f if isinstance(f, (Auto,)) else Fixed(f)
    return MoELayer(MoELayerConfig(d, policy, router=router, **kw), seed=seed)


def tokens(layer, seed=1):
    d = layer.dims
    return np.random.default_rng(seed).standard_normal((d.W, d.T, d.M))


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


def test_single_expert_degenerates_to_ffn():
    layer = make_layer(W=1, m=1, E=1, k=1, f=4.0)
    x = tokens(layer)
    y, met = layer.forward(x)
    w = layer.experts()
    want = np.maximum(x[0] @ w.w1[0], 0) @ w.w2[0]
    np.testing.assert_allclose(y[0], want, rtol=1e-13)
    assert met.dropped == 0


@pytest.mark.parametrize("router", ["linear", "cosine"])
def test_matches_dense_oracle(router):
    layer = make_layer(router=router)
    x = tokens(layer)
    y, met = layer.forward(x)
    assert rel_err(y, reference_forward(x, layer, layer._saved["routing"])) <= 1e-10
    assert met.dropped > 0 or met.capacity * layer.dims.E >= layer.dims.T * layer.dims.k


def sliced_layer(**kw):
    return make_layer(W=8, m=4, E=2, T=12, k=1, placement=RanksPerExpert(4), **kw)


def test_output_identical_across_strategies_and_parallelism():
    layer = sliced_layer(f=1.5)
    x = tokens(layer)
    routing = layer.route(x)
    outs = []
    for s in (Strategy("linear", 1), Strategy("2dh", 4), Strategy("linear", 8)):
        for p in (Parallel.P1, Parallel.P2):
            outs.append(layer.forward(x, routing, s, p)[0])
    for y in outs[1:]:
        assert np.abs(y - outs[0]).max() <= 1e-12 * np.abs(outs[0]).max()


def test_zero_upstream_gives_zero_gradients():
    layer = make_layer()
    layer.forward(tokens(layer))
    g = layer.backward(np.zeros((4, 16, 4)))
    assert not g.dx.any() and not g.w1.any() and not g.w2.any() and not g.router["weight"].any()


def loss_fn(layer, routing, R, weights=None):
    return lambda xx: float(np.vdot(reference_forward(xx, layer, routing, weights), R))


def check_grad(got, fd):
    assert np.linalg.norm(got - fd) <= 1e-5 * np.linalg.norm(fd)
    np.testing.assert_allclose(got, fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


@pytest.mark.parametrize("router,placement,parallel", [
    ("linear", None, None), ("cosine", None, None),
    ("linear", RanksPerExpert(2), Parallel.P1), ("cosine", RanksPerExpert(2), Parallel.P2)])
def test_backward_matches_finite_differences(router, placement, parallel):
    if placement is None:
        layer = make_layer(T=8, f=0.75, router=router, cosine_dim=3)
    else:
        layer = make_layer(W=4, E=2, T=8, k=1, placement=placement, f=0.75, router=router, cosine_dim=3)
    x = tokens(layer)
    routing = layer.route(x)
    layer.forward(x, routing, Strategy("2dh", 2), parallel)
    R = np.random.default_rng(5).standard_normal(x.shape)
    g = layer.backward(R)

    check_grad(g.dx, central_diff(loss_fn(layer, routing, R), x))
    w = layer.experts()
    check_grad(g.w1, central_diff(lambda a: loss_fn(layer, routing, R, ExpertWeights(a, w.w2))(x), w.w1.copy()))
    check_grad(g.w2, central_diff(lambda a: loss_fn(layer, routing, R, ExpertWeights(w.w1, a))(x), w.w2.copy()))
    if router == "linear":
        def with_router(a):
            saved, layer.router_weight = layer.router_weight, a
            try:
                return loss_fn(layer, routing, R)(x)
            finally:
                layer.router_weight = saved
        check_grad(g.router["weight"], central_diff(with_router, layer.router_weight.copy()))
    else:
        base = layer.cosine

        def with_cosine(**changes):
            def fn(a):
                layer.cosine = replace(base, **{name: a for name in changes})
                try:
                    return loss_fn(layer, routing, R)(x)
                finally:
                    layer.cosine = base
            return fn
        check_grad(g.router["projection"], central_diff(with_cosine(projection=1), base.projection.copy()))
        check_grad(g.router["experts"], central_diff(with_cosine(experts=1), base.experts.copy()))
        t = np.array([base.temperature])
        fd_t = central_diff(lambda a: with_cosine(temperature=1)(float(a[0])), t)
        assert g.router["temperature"] == pytest.approx(fd_t[0], rel=1e-5)


def test_gradients_identical_across_strategies():
    layer = sliced_layer(f=1.0)
    x = tokens(layer)
    routing = layer.route(x)
    R = np.random.default_rng(3).standard_normal(x.shape)
    grads = []
    for s in (BASELINE, Strategy("2dh", 2), Strategy("linear", 4)):
        for p in (Parallel.P1, Parallel.P2):
            layer.forward(x, routing, s, p)
            grads.append(layer.backward(R))
    ref = grads[0]
    for g in grads[1:]:
        for a, b in ((g.dx, ref.dx), (g.w1, ref.w1), (g.w2, ref.w2), (g.router["weight"], ref.router["weight"])):
            assert np.abs(a - b).max() <= 1e-10 * max(np.abs(b).max(), 1.0)


def test_reference_linear_on_positive_cone():
    layer = make_layer(W=1, m=1, E=1, k=1, M=3, V=5, f=2.0)
    layer.set_experts(ExpertWeights(np.abs(layer.experts().w1), np.abs(layer.experts().w2)))
    x = np.abs(tokens(layer)) + 0.1
    np.testing.assert_allclose(reference_forward(2.5 * x, layer), 2.5 * reference_forward(x, layer), rtol=1e-13)


def test_token_permutation_equivariance():
    layer = make_layer(f=Auto())
    x = tokens(layer)
    perm = np.random.default_rng(9).permutation(layer.dims.T)
    y = reference_forward(x, layer)
    y_perm = reference_forward(x[:, perm], layer)
    np.testing.assert_allclose(y_perm, y[:, perm], rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("f", [0.25, 0.5, 1.0, 2.0])
def test_token_conservation(f):
    layer = make_layer(f=f)
    x = tokens(layer)
    _, met = layer.forward(x)
    routing = layer._saved["routing"]
    d = layer.dims
    assert met.dispatched + met.dropped == d.W * d.T * d.k
    for r in range(d.W):
        for e in range(d.E):
            mine = routing.idxs[r] == e
            kept = int((routing.locations[r][mine] >= 0).sum())
            assert kept + int((routing.locations[r][mine] < 0).sum()) == routing.demand[r, e]
            assert kept == min(routing.demand[r, e], routing.capacity)


def test_auto_capacity_never_drops():
    layer = make_layer(f=Auto())
    _, met = layer.forward(tokens(layer))
    assert met.dropped == 0


def test_determinism():
    runs = []
    for _ in range(2):
        layer = make_layer(seed=4)
        x = tokens(layer, 7)
        ys, mets = [], []
        for _ in range(3):
            y, met = layer.forward(x)
            ys.append(y.tobytes())
            mets.append((met.seconds, met.strategy, met.parallel, met.comm_bytes, met.timeline.to_csv()))
        g = layer.backward(np.ones_like(x))
        runs.append((ys, mets, g.dx.tobytes(), g.w1.tobytes()))
    assert runs[0] == runs[1]


def test_adaptive_decisions_follow_documented_order():
    layer = sliced_layer(f=4.0)
    x = tokens(layer)
    picks = []
    for _ in range(9):
        _, met = layer.forward(x)
        picks.append(met.strategy)
        assert met.parallel == choose_parallel(layer.dims, met.capacity)
    assert picks[:8] == list(STRATEGIES)
    best = min(STRATEGIES, key=lambda s: layer.memo.f_table(layer.history[0].f)[s])
    assert picks[8] == best


def test_step_time_matches_closed_form():
    for placement, W, E in [(ExpertsPerRank(2), 4, 8), (RanksPerExpert(2), 8, 4)]:
        layer = make_layer(W=W, m=4 if W == 8 else 2, E=E, k=1, placement=placement, f=1.5)
        x = tokens(layer)
        for s in STRATEGIES:
            for p in Parallel:
                _, met = layer.forward(x, None, s, p)
                want = predict_step_seconds(layer.dims, met.capacity, s, p, layer.config.cost)
                assert met.seconds == pytest.approx(want, rel=1e-12)


def test_metrics_bytes_match_router_formulas():
    layer = sliced_layer(f=1.0)
    x = tokens(layer)
    _, m1 = layer.forward(x, None, BASELINE, Parallel.P1)
    _, m2 = layer.forward(x, None, BASELINE, Parallel.P2)
    d = layer.dims
    assert m1.param_bytes == 2 * d.M * d.V * 8 and m2.param_bytes == 0
    assert m2.dispatch_bytes == d.n_sharded * m1.dispatch_bytes


def test_config_validation():
    d = Dims(W=1, m=1, E=1, M=2, V=2, T=2, k=1, placement=ExpertsPerRank(1))
    with pytest.raises(ConfigError):
        MoELayerConfig(d, router="mlp")
    with pytest.raises(ConfigError):
        MoELayerConfig(d, strategy="fastest")
    layer = MoELayer(MoELayerConfig(d))
    with pytest.raises(ConfigError):
        layer.forward(np.zeros((1, 3, 2)))
    with pytest.raises(ConfigError):
        layer.backward(np.zeros((1, 2, 2)))
