import numpy as np
import pytest

from routenet import gradcheck as gc


def test_fd_on_square():
    th = np.array([3.0])
    g = gc.fd_gradient(lambda t: float(t[0] ** 2), th)
    assert abs(g[0] - 6.0) < 1e-8
    assert th[0] == 3.0  # restored


def test_fd_on_constant_is_zero():
    g = gc.fd_gradient(lambda t: 1.5, np.arange(4.0))
    assert np.all(g == 0)


def test_fd_rejects_float32_and_nonfinite():
    with pytest.raises(TypeError):
        gc.fd_gradient(lambda t: 0.0, np.zeros(2, np.float32))
    with pytest.raises(gc.NonFiniteError):
        gc.fd_gradient(lambda t: float("nan"), np.zeros(2))


def test_fd_matches_known_vector_gradient():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.5, -0.25])
    g = gc.fd_gradient(lambda t: float(t @ A @ t / 2), x)
    np.testing.assert_allclose(g, A @ x, atol=1e-9)


@pytest.mark.parametrize("target", sorted(gc.TARGETS))
def test_every_target_passes(target):
    r = gc.check_module(target, trials=3, seed=1)
    assert r.passed, r.summary()
    assert r.max_rel <= r.threshold


def test_thresholds():
    assert gc.check_module("cc_router_frozen", trials=2).threshold == gc.FROZEN_TOL
    assert gc.check_module("dense", trials=1).threshold == gc.LINEAR_TOL
    assert gc.check_module("cc_router", trials=1).threshold == gc.NONLINEAR_TOL


def test_frozen_router_is_essentially_exact():
    r = gc.check_module("cc_router_frozen", trials=5, seed=3)
    assert r.passed and r.max_rel <= 1e-6


def test_simplified_gate_closed_form():
    d = gc.simplified_gate_formula_check(seed=2)
    assert max(d.values()) <= 1e-10, d


def test_registry_is_fully_covered():
    assert gc.registry_kinds() - gc.covered_kinds() == set()


def test_three_path_router_checked():
    r = gc.check_module("cc_router_3path", trials=2, seed=5)
    assert r.passed
    assert any(str(n).startswith("input2") for n in r.errors)


@pytest.mark.parametrize("target", ["cc_router", "cp_router", "full_micro_net"])
def test_dropping_gate_path_is_detected(target):
    masked = gc.check_module(target, trials=5, seed=0, mask_gate_path=True, sensitive=True)
    assert not masked.passed
    assert sum(masked.trial_passed) == 0
    honest = gc.check_module(target, trials=5, seed=0, sensitive=True)
    assert honest.passed, honest.summary()


def test_unknown_target():
    with pytest.raises(ValueError, match="unknown gradcheck target"):
        gc.check_module("warp")


def test_summary_lists_failures():
    r = gc.check_module("cc_router", trials=2, mask_gate_path=True, sensitive=True)
    s = r.summary()
    assert s.startswith("cc_router: FAIL") and "  !" in s


def test_micro_net_per_coordinate():
    r = gc.check_module("full_micro_net", trials=3, seed=4)
    assert r.passed and r.threshold == 1e-3
    assert any(k.startswith("input") for k in r.errors) and any(".gate" in k for k in r.errors)
