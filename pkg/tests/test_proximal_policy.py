import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from holdstab.errors import InputError, NumericError
from holdstab.proximal_policy import ProxConfig, minimize_over_box, moreau_prox, select_control
from holdstab.scalar_funcs import KappaFunction
from holdstab.system_model import CLFSpec, ControlSystem, sample_ball

SQ = KappaFunction.power(1.0, 2.0)


def _quadratic_clf(n=1):
    return CLFSpec(L=lambda x: np.sum(np.asarray(x) ** 2, axis=-1), alpha1=SQ, alpha2=SQ, alpha3=SQ)


def _integrator_1d():
    return ControlSystem(n=1, m=1, d=1, drift=lambda x, u: np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u))),
                         diffusion=lambda x, u: np.zeros(np.shape(x)[:-1] + (1, 1)), u_lo=(-1.0,), u_hi=(1.0,))


def test_prox_at_origin(builtin):
    _, clf = builtin
    res = moreau_prox(clf, np.zeros(3), ProxConfig())
    assert np.all(res.prox_point == 0) and res.value == 0 and np.all(res.subgradient == 0)


def test_prox_quadratic_closed_form():
    # argmin y^2 + (y - 3)^2 / 2 is y = 1 with value 1 + 2 = 3
    res = moreau_prox(_quadratic_clf(), np.array([3.0]), ProxConfig(lam=1.0))
    assert res.prox_point[0] == pytest.approx(1.0, abs=1e-8)
    assert res.value == pytest.approx(3.0, abs=1e-10)
    assert res.subgradient[0] == pytest.approx(2.0, abs=1e-8)


def _scipy_prox_value(clf, x, lam, starts):
    def obj(y):
        return float(clf.L(y)) + float(np.sum((y - x) ** 2)) / (2 * lam**2)
    return min(minimize(obj, s, method="Nelder-Mead", options=dict(xatol=1e-10, fatol=1e-13, maxiter=4000)).fun
               for s in starts)


@pytest.mark.parametrize("lam", [0.1, 0.5])
def test_prox_matches_multistart_local_oracle(builtin, lam):
    _, clf = builtin
    rng = np.random.default_rng(7)
    xs = sample_ball(rng, 20, 3, 2.0)
    res = moreau_prox(clf, xs, ProxConfig(lam=lam))
    for x, v, p in zip(xs, res.value, res.prox_point):
        starts = [x, p, np.zeros(3)] + list(x + 0.3 * rng.normal(size=(3, 3)))
        oracle = _scipy_prox_value(clf, x, lam, starts)
        assert v <= clf.L(x) + 1e-15
        assert v == pytest.approx(oracle, rel=1e-3, abs=1e-9)
        assert np.sum((p - x) ** 2) <= 2 * lam**2 * clf.L(x) + 1e-9


def test_prox_bound_on_ball(builtin):
    _, clf = builtin
    rng = np.random.default_rng(2)
    xs = sample_ball(rng, 300, 3, 5.0)
    for lam in (0.05, 0.1, 0.5):
        res = moreau_prox(clf, xs, ProxConfig(lam=lam))
        L = clf.L(xs)
        assert np.all(np.sum((res.prox_point - xs) ** 2, axis=1) <= 2 * lam**2 * L + 1e-9)
        assert np.all(res.value <= L) and np.all(res.value >= 0)


def test_prox_value_positive_away_from_origin(builtin):
    _, clf = builtin
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(200, 3))
    xs = 1e-3 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    assert np.all(moreau_prox(clf, xs, ProxConfig()).value > 0)


def test_prox_batch_equals_rows(builtin):
    _, clf = builtin
    xs = sample_ball(np.random.default_rng(4), 8, 3, 2.0)
    batch = moreau_prox(clf, xs, ProxConfig())
    for k, x in enumerate(xs):
        row = moreau_prox(clf, x, ProxConfig())
        assert row.prox_point.tobytes() == batch.prox_point[k].tobytes()


def test_prox_rejects_non_finite_L():
    clf = CLFSpec(L=lambda x: np.where(np.asarray(x)[..., 0] > 1.5, np.nan, np.sum(np.asarray(x) ** 2, -1)),
                  alpha1=SQ, alpha2=SQ, alpha3=SQ)
    with pytest.raises(NumericError):
        moreau_prox(clf, np.array([2.0]), ProxConfig(lam=1.0))


@pytest.mark.parametrize("bad", [dict(lam=0.0), dict(eta=-1.0), dict(state_grid=2), dict(control_grid=1)])
def test_invalid_config(bad):
    with pytest.raises(InputError):
        ProxConfig(**bad)


def test_config_round_trip():
    cfg = ProxConfig(lam=0.3, eta=0.01, control_grid=11)
    assert ProxConfig.from_config(cfg.to_config()) == cfg


def test_select_control_1d_integrator():
    choice = select_control(_integrator_1d(), _quadratic_clf(), np.array([3.0]), ProxConfig(lam=1.0))
    assert choice.prox.subgradient[0] > 0
    assert choice.control[0] == -1.0
    # exhaustive oracle over a fine grid of U
    us = np.linspace(-1, 1, 2001)
    assert choice.decrement <= np.min(choice.prox.subgradient[0] * us) + 1e-12


def test_select_control_at_origin_takes_lowest_vertex(builtin):
    sys, clf = builtin
    choice = select_control(sys, clf, np.zeros(3), ProxConfig())
    np.testing.assert_array_equal(choice.control, sys.lo)
    assert choice.decrement == 0.0


def test_select_control_builtin_on_boundary(builtin):
    sys, clf = builtin
    choice = select_control(sys, clf, np.array([1.0, 0.0, 0.0]), ProxConfig())
    assert np.any(np.isclose(np.abs(choice.control), 1.0))
    p, z = choice.prox.prox_point, choice.prox.subgradient
    vertices = np.array(list(itertools.product([-1.0, 1.0], repeat=2)))
    vertex_vals = [float(np.dot(z, sys.drift(p, v))) for v in vertices]
    assert choice.decrement <= min(vertex_vals) + 1e-12
    assert choice.decrement < 0


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_argmin_invariant_under_positive_scaling(builtin, scale, seed):
    sys, clf = builtin
    x = sample_ball(np.random.default_rng(seed), 1, 3, 3.0)
    prox = moreau_prox(clf, x, ProxConfig())
    u1, *_ = minimize_over_box(sys, prox.prox_point, prox.subgradient, ProxConfig())
    u2, *_ = minimize_over_box(sys, prox.prox_point, scale * prox.subgradient, ProxConfig())
    np.testing.assert_array_equal(u1, u2)


def test_refinement_never_worse_than_grid(builtin):
    sys, clf = builtin
    xs = sample_ball(np.random.default_rng(5), 200, 3, 4.0)
    choice = select_control(sys, clf, xs, ProxConfig())
    assert np.all(choice.decrement <= choice.grid_min)
    assert np.all(choice.eta_reported >= 0)
    assert np.all(np.abs(choice.control) <= 1.0)
