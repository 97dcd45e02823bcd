import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uapic.fields import ConfigurationError, make_field
from uapic.mrc import (COMPOSITION, STRANG, exact_position_subflow, exact_velocity_subflow,
                       mrc_integrate, plan_mrc)
from uapic.rotation import PreconditionError


def test_plan_composition():
    p = plan_mrc(math.pi / 2, 2.0 ** -10, 16)
    assert p.mode == COMPOSITION
    assert p.M_f == 256 and p.T_r == pytest.approx(0.0, abs=1e-9)
    assert p.M0 == 16 and p.H == pytest.approx(16 * 2.0 ** -10)
    assert p.alpha + p.beta == pytest.approx(1.0)
    assert p.alpha - p.beta == pytest.approx(1.0 / p.M0)
    assert p.M_micro == 16


def test_plan_fallback_and_remainder():
    p = plan_mrc(math.pi / 2, 0.5, 64)
    assert p.mode == STRANG
    p = plan_mrc(1.0, 0.01, 4, M_micro=8)
    assert p.M_f == 15 and 0 < p.T_r < 2 * math.pi
    assert p.remainder_steps == math.ceil(8 * p.T_r / (2 * math.pi))


@pytest.mark.parametrize("args", [(0.0, 0.1, 4), (1.0, 0.0, 4), (1.0, 2.0, 4), (1.0, 0.1, 0)])
def test_plan_rejects(args):
    with pytest.raises(ConfigurationError):
        plan_mrc(*args)


def test_velocity_subflow_solves_its_ode():
    rng = np.random.default_rng(0)
    v, E = rng.normal(size=(2, 3))
    B = rng.normal(size=3)
    B /= np.linalg.norm(B)
    c, t, h = 0.7, 1.3, 1e-6
    _, v1 = exact_velocity_subflow(np.zeros(3), v, E, B, c, t)
    _, v2 = exact_velocity_subflow(np.zeros(3), v, E, B, c, t + h)
    assert np.allclose((v2 - v1) / h, c * E + np.cross(v1, B), atol=1e-5)
    _, back = exact_velocity_subflow(np.zeros(3), v1, E, B, c, -t)
    assert np.allclose(back, v, atol=1e-12)


def test_subflow_requires_unit_field():
    with pytest.raises(PreconditionError):
        exact_velocity_subflow(np.zeros(3), np.ones(3), np.zeros(3), np.array([0, 0, 2.0]), 1.0, 1.0)


def test_position_subflow():
    x, v = exact_position_subflow(np.ones(3), np.array([1.0, 2.0, 3.0]), 0.5, 2.0)
    assert np.allclose(x, [2.0, 3.0, 4.0]) and np.allclose(v, [1, 2, 3])


def _macro_step(u, fs, plan):
    x, v = mrc_integrate(u[:3], u[3:], plan, fs)
    return np.concatenate([x, v])


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000))
def test_macro_step_preserves_volume(seed):
    fs = make_field("example1")
    plan = plan_mrc(2 * math.pi * 0.01 * 8, 0.01, 1, M_micro=8)
    u0 = np.random.default_rng(seed).normal(size=6)
    h = 1e-5
    J = np.empty((6, 6))
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        J[:, i] = (_macro_step(u0 + e, fs, plan) - _macro_step(u0 - e, fs, plan)) / (2 * h)
    assert abs(np.linalg.det(J) - 1.0) < 1e-6


def test_compiled_matches_python_path(ex1, x0, v0):
    plan = plan_mrc(math.pi / 2, 2.0 ** -7, 16)
    a = mrc_integrate(x0, v0, plan, ex1)
    b = mrc_integrate(x0, v0, plan, ex1, efield=ex1.eval_E)
    assert np.allclose(a[0], b[0], atol=1e-13) and np.allclose(a[1], b[1], atol=1e-13)


def test_ensemble_equals_single(ex1):
    rng = np.random.default_rng(2)
    X, V = rng.normal(size=(2, 5, 3))
    plan = plan_mrc(1.0, 2.0 ** -6, 8)
    Xs, Vs = mrc_integrate(X, V, plan, ex1)
    for k in range(5):
        x, v = mrc_integrate(X[k], V[k], plan, ex1)
        assert np.allclose(Xs[k], x, atol=1e-13) and np.allclose(Vs[k], v, atol=1e-13)


def test_on_macro_sees_every_step(ex1, x0, v0):
    seen = []
    plan = plan_mrc(math.pi / 2, 2.0 ** -8, 8)
    mrc_integrate(x0, v0, plan, ex1, on_macro=lambda n, t, x, v: seen.append((n, t)))
    assert [n for n, _ in seen] == list(range(9))
    assert seen[-1][1] == pytest.approx(math.pi / 2, rel=1e-9)


def test_uniform_field_free_of_E_conserves_speed():
    fs = make_field("uniform")
    rng = np.random.default_rng(4)
    X, V = rng.normal(size=(2, 20, 3))
    plan = plan_mrc(2 * math.pi, 2.0 ** -5, 8)
    _, V1 = mrc_integrate(X, V, plan, fs)
    assert np.allclose(np.linalg.norm(V1, axis=1), np.linalg.norm(V, axis=1), atol=1e-10)


def test_requires_unit_intensity(ex2, x0, v0):
    with pytest.raises(ConfigurationError):
        mrc_integrate(x0, v0, plan_mrc(1.0, 0.1, 4), ex2)
