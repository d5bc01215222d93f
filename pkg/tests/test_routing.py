import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routenet import routing
from routenet.ops import ConvParams, DenseParams, MissingCacheError, conv2d_fwd, dense_fwd
from routenet.routing import (
    CrossConnectionRouter, CrossPredictionRouter, GateUnit, cc_router_bwd, cc_router_fwd, cp_router_bwd,
    cp_router_fwd, gate_bwd, gate_fwd, merge_average, merge_average_bwd, one_to_many, se_hidden_width,
)
from routenet.tensor import Rng, precision, weighted_sum

from .oracles import gate_straight_line


def _unit(seed, c, n, hidden=4, bias_std=0.5):
    u = GateUnit.init(Rng(seed), c, n, hidden)
    u.b1 = Rng(seed, (9,)).normal(u.b1.shape, bias_std, np.float64)
    u.b2 = Rng(seed, (8,)).normal(u.b2.shape, bias_std, np.float64)
    return u


def test_hidden_width_rule():
    assert [se_hidden_width(c) for c in (3, 16, 64, 65, 128, 512)] == [4, 4, 4, 5, 8, 32]


def test_zeroed_gate_is_uniform(f64, nprng):
    u = _unit(0, 5, 4).zeroed()
    g, _ = gate_fwd(nprng.standard_normal((3, 6, 6, 5)), u)
    np.testing.assert_allclose(g, 0.25)


def test_single_output_gate_is_one(f64, nprng):
    g, _ = gate_fwd(nprng.standard_normal((4, 3, 3, 2)), _unit(1, 2, 1))
    np.testing.assert_array_equal(g, 1.0)


def test_gate_matches_straight_line_oracle(f64, nprng):
    u = _unit(2, 6, 3)
    x = nprng.standard_normal((5, 4, 4, 6))
    g, _ = gate_fwd(x, u)
    for b in range(5):
        z = x[b].mean(axis=(0, 1))
        np.testing.assert_allclose(g[b], gate_straight_line(z, u.w1, u.b1, u.w2, u.b2), atol=1e-6)


def test_gate_single_sample_and_rank1(f64, nprng):
    u = _unit(3, 4, 2)
    x = nprng.standard_normal((3, 3, 4))
    g, _ = gate_fwd(x, u)
    assert g.shape == (2,)
    np.testing.assert_allclose(g, gate_fwd(x[None], u)[0][0])
    z = x.mean(axis=(0, 1))
    np.testing.assert_allclose(gate_fwd(z, u)[0], g, atol=1e-12)


def test_gate_is_per_sample(f64, nprng):
    g, _ = gate_fwd(nprng.standard_normal((4, 3, 3, 2)) * 3, _unit(4, 2, 3))
    assert not np.allclose(g[0], g[1])


def test_gate_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        gate_fwd(np.zeros((1, 2, 2, 3), np.float32), GateUnit.init(Rng(0), 4, 2))
    with pytest.raises(MissingCacheError):
        gate_bwd(np.zeros(2), None)


def test_gate_bwd_constant_upstream_is_zero(f64, nprng):
    u = _unit(5, 3, 4)
    g, c = gate_fwd(nprng.standard_normal((2, 3, 3, 3)), u)
    gx, grads = gate_bwd(np.full((2, 4), 2.5), c)
    np.testing.assert_allclose(gx, 0, atol=1e-15)
    for v in grads.values():
        np.testing.assert_allclose(v, 0, atol=1e-15)


def test_gate_bwd_single_output_zero(f64, nprng):
    g, c = gate_fwd(nprng.standard_normal((2, 3, 3, 3)), _unit(6, 3, 1))
    gx, grads = gate_bwd(nprng.standard_normal((2, 1)), c)
    assert not gx.any() and all(not v.any() for v in grads.values())


# ---------------------------------------------------------------------------
# cross-prediction


def test_cp_single_input_output_is_ordinary_layer(f64, nprng):
    r = CrossPredictionRouter.init_conv(Rng(0), 1, 1, 2, 3)
    x = nprng.standard_normal((2, 4, 4, 2))
    ys, _ = cp_router_fwd([x], r)
    np.testing.assert_allclose(ys[0], np.maximum(conv2d_fwd(x, r.predictions[0][0])[0], 0), atol=1e-14)


def test_cp_uniform_gates(f64, nprng):
    r = CrossPredictionRouter.init_dense(Rng(1), 2, 2, 4, 3)
    r.gates = [u.zeroed() for u in r.gates]
    xs = [nprng.standard_normal((3, 4)) for _ in range(2)]
    ys, _ = cp_router_fwd(xs, r)
    for j in range(2):
        u = [dense_fwd(xs[i], r.predictions[i][j])[0] for i in range(2)]
        np.testing.assert_allclose(ys[j], np.maximum(0.5 * u[0] + 0.5 * u[1], 0), atol=1e-14)


def test_cp_matches_composition_oracle(f64, nprng):
    r = CrossPredictionRouter.init_conv(Rng(2), 2, 3, 2, 4, hidden=4)
    for row in r.predictions:
        for p in row:
            p.bias = nprng.standard_normal(p.bias.shape)
    xs = [nprng.standard_normal((2, 5, 5, 2)) for _ in range(2)]
    ys, _ = cp_router_fwd(xs, r)
    for b in range(2):
        gs = [gate_straight_line(xs[i][b].mean(axis=(0, 1)), u.w1, u.b1, u.w2, u.b2) for i, u in enumerate(r.gates)]
        for j in range(3):
            s = sum(gs[i][j] * conv2d_fwd(xs[i][b:b + 1], r.predictions[i][j])[0][0] for i in range(2))
            np.testing.assert_allclose(ys[j][b], np.maximum(s, 0), atol=1e-6)


def test_cp_errors_and_grid():
    r = CrossPredictionRouter.init_conv(Rng(0), 2, 2, 3, 4)
    assert sum(len(row) for row in r.predictions) == 4
    with pytest.raises(ValueError):
        cp_router_fwd([np.zeros((1, 4, 4, 3), np.float32)], r)
    with pytest.raises(MissingCacheError):
        cp_router_bwd([np.zeros(1)] * 2, None)


def test_cp_zero_upstream_zero_grads(f64, nprng):
    r = CrossPredictionRouter.init_conv(Rng(3), 2, 2, 2, 2)
    xs = [nprng.standard_normal((2, 3, 3, 2)) for _ in range(2)]
    ys, c = cp_router_fwd(xs, r)
    gx, gp, gg = cp_router_bwd([np.zeros_like(y) for y in ys], c)
    assert all(not g.any() for g in gx)
    assert all(not a.any() for row in gp for pair in row for a in pair)
    assert all(not v.any() for d in gg for v in d.values())


def test_cp_single_reduces_to_conv_backward(f64, nprng):
    from routenet.ops import conv2d_bwd
    r = CrossPredictionRouter.init_conv(Rng(4), 1, 1, 2, 3)
    x = nprng.standard_normal((2, 4, 4, 2))
    ys, c = cp_router_fwd([x], r)
    g = nprng.standard_normal(ys[0].shape)
    gx, gp, _ = cp_router_bwd([g], c)
    pre, pc = conv2d_fwd(x, r.predictions[0][0])
    rx, rw, rb = conv2d_bwd(g * (pre > 0), pc)
    np.testing.assert_allclose(gx[0], rx, atol=1e-12)
    np.testing.assert_allclose(gp[0][0][0], rw, atol=1e-12)
    np.testing.assert_allclose(gp[0][0][1], rb, atol=1e-12)


# ---------------------------------------------------------------------------
# cross-connection


def test_cc_identity_router_exact(nprng):
    r = CrossConnectionRouter.init(Rng(0), 1, 1, 3)
    x = nprng.standard_normal((2, 4, 4, 3)).astype(np.float32)
    ys, c = cc_router_fwd([x], r)
    np.testing.assert_array_equal(ys[0], x)
    g = nprng.standard_normal(x.shape).astype(np.float32)
    gx, _ = cc_router_bwd([g], c)
    np.testing.assert_array_equal(gx[0], g)


def test_cc_uniform_ones_twos():
    r = CrossConnectionRouter([u.zeroed() for u in CrossConnectionRouter.init(Rng(0), 2, 2, 1).gates], 2)
    ys, _ = cc_router_fwd([np.ones((1, 2, 2, 1)), np.full((1, 2, 2, 1), 2.0)], r)
    for y in ys:
        np.testing.assert_allclose(y, 1.5)


def test_cc_per_pixel_matrix_oracle(f64, nprng):
    m, n = 3, 2
    r = CrossConnectionRouter([_unit(10 + i, 4, n) for i in range(m)], n)
    xs = [nprng.standard_normal((2, 3, 3, 4)) for _ in range(m)]
    ys, c = cc_router_fwd(xs, r)
    G = np.stack(c["g"], axis=1)  # B x m x n
    for b in range(2):
        for p in range(3):
            for q in range(3):
                for ch in range(4):
                    vec = np.array([xs[i][b, p, q, ch] for i in range(m)])
                    out = G[b].T @ vec  # [Y_1..Y_n] = G^T [X_1..X_m]
                    for j in range(n):
                        assert abs(ys[j][b, p, q, ch] - out[j]) <= 1e-6


def test_cc_shape_mismatch_and_missing_cache():
    r = CrossConnectionRouter.init(Rng(0), 2, 2, 3)
    with pytest.raises(ValueError, match="shape"):
        cc_router_fwd([np.zeros((1, 2, 2, 3), np.float32), np.zeros((1, 3, 3, 3), np.float32)], r)
    with pytest.raises(MissingCacheError):
        cc_router_bwd([np.zeros(1)] * 2, None)


def test_cc_gate_gradient_is_sum_of_products(f64):
    # dL/dg_ij = sum(dL/dY_j * X_i): ones against [[1,2],[3,4]] gives 10
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    r = CrossConnectionRouter([_unit(7, 1, 2)], 2)
    _, c = cc_router_fwd([x], r)
    captured = {}
    orig = routing.gate_bwd

    def spy(grad_g, cache, **kw):
        captured["g"] = grad_g
        return orig(grad_g, cache, **kw)

    routing.gate_bwd = spy
    try:
        cc_router_bwd([np.ones_like(x), np.ones_like(x)], c)
    finally:
        routing.gate_bwd = orig
    np.testing.assert_allclose(captured["g"], [[10.0, 10.0]])


def test_one_to_many(f64, nprng):
    x = nprng.standard_normal((2, 3, 3, 2))
    zero = CrossConnectionRouter([_unit(0, 2, 2).zeroed()], 2)
    for y in one_to_many(x, zero)[0]:
        np.testing.assert_allclose(y, 0.5 * x)
    np.testing.assert_allclose(one_to_many(x, CrossConnectionRouter([_unit(1, 2, 1)], 1))[0][0], x)
    ys, _ = one_to_many(x, CrossConnectionRouter([_unit(2, 2, 3)], 3))
    np.testing.assert_allclose(sum(ys), x, atol=1e-5)
    with pytest.raises(ValueError, match="m=1"):
        one_to_many(x, CrossConnectionRouter.init(Rng(0), 2, 2, 2))


def test_merge_average(nprng):
    x = nprng.standard_normal((2, 3))
    np.testing.assert_array_equal(merge_average([x]), x)
    np.testing.assert_array_equal(merge_average([np.ones(4), np.full(4, 3.0)]), np.full(4, 2.0))
    xs = [nprng.standard_normal((2, 3)) for _ in range(3)]
    ref = np.array([[sum(t[i, j] for t in xs) / 3 for j in range(3)] for i in range(2)])
    np.testing.assert_allclose(merge_average(xs), ref, atol=1e-15)
    for g in merge_average_bwd(np.ones((2, 3)), 3):
        np.testing.assert_allclose(g, 1 / 3)
    with pytest.raises(ValueError):
        merge_average([])


# ---------------------------------------------------------------------------
# invariants


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4), st.floats(-20, 20))
def test_gate_rows_and_logit_shift(seed, m, n, c):
    rng = np.random.default_rng(seed)
    r = CrossConnectionRouter([_unit(seed + i, 3, n) for i in range(m)], n)
    xs = [rng.standard_normal((2, 3, 3, 3)) * 3 for _ in range(m)]
    with precision("float64"):
        ys, cache = cc_router_fwd(xs, r)
        for g in cache["g"]:
            np.testing.assert_allclose(g.sum(axis=1), 1, atol=1e-6)
            assert np.all(g > 0) and np.all(g <= 1)
        r.gates[0].b2 = r.gates[0].b2 + c
        ys2, cache2 = cc_router_fwd(xs, r)
    np.testing.assert_allclose(cache2["g"][0], cache["g"][0], atol=1e-6)
    for a, b in zip(ys, ys2):
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_frozen_gates_equal_uniform_weighted_sum(f64, nprng):
    m, n = 3, 2
    r = CrossConnectionRouter.init(Rng(0), m, n, 4, frozen=True)
    assert r.params() == {}
    xs = [nprng.standard_normal((2, 3, 3, 4)) for _ in range(m)]
    ys, _ = cc_router_fwd(xs, r)
    ref = weighted_sum(xs, [1.0 / n] * m)
    for y in ys:
        for idx in np.ndindex(y.shape):
            assert y[idx] == ref[idx]


def test_parameter_scaling_exact():
    C, Cout, Hd = 8, 6, 4
    gate = lambda n: C * Hd + Hd + Hd * n + n
    for k in (1, 2, 3, 4):
        cp = CrossPredictionRouter.init_conv(Rng(0), k, k, C, Cout, hidden=Hd)
        assert cp.prediction_params() == k * k * (9 * C * Cout + Cout)
        assert cp.n_params() == k * k * (9 * C * Cout + Cout) + k * gate(k)
        cc = CrossConnectionRouter.init(Rng(0), k, k, C, hidden=Hd)
        assert cc.n_params() == k * gate(k)
        # linear in the number of inputs at a fixed output count
        assert CrossConnectionRouter.init(Rng(0), k, 3, C, hidden=Hd).n_params() == k * gate(3)
