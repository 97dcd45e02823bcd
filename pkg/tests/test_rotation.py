import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uapic.fields import ConfigurationError, make_field
from uapic.harness import reference_solution
from uapic.rotation import (FilteredSystem, PreconditionError, TauGrid, a_operator, eval_F,
                            filter_velocity, pi_average, reduce_phase, rodrigues_rotate,
                            unfilter_velocity)

finite = st.floats(-5, 5, allow_nan=False)
vec = st.tuples(finite, finite, finite).map(np.array)
angle = st.floats(-1e3, 1e3, allow_nan=False)


def _unit(w):
    n = np.linalg.norm(w)
    return w / n if n > 1e-3 else np.array([0.0, 0.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(v=vec, b=vec, theta=angle)
def test_rotation_roundtrip(v, b, theta):
    B = _unit(b)
    back = rodrigues_rotate(rodrigues_rotate(v, B, theta), B, -theta)
    assert np.allclose(back, v, atol=1e-12 * max(1.0, np.linalg.norm(v)))
    # an isometry that fixes the axis
    w = rodrigues_rotate(v, B, theta)
    assert abs(np.linalg.norm(w) - np.linalg.norm(v)) < 1e-12 * max(1.0, np.linalg.norm(v))
    assert abs(w @ B - v @ B) < 1e-12 * max(1.0, np.linalg.norm(v))


@settings(max_examples=100, deadline=None)
@given(x=vec, v=vec, tau=angle)
def test_filter_roundtrip(x, v, tau):
    fs = make_field("example1")
    y = filter_velocity(tau, x, v, fs)
    assert np.allclose(unfilter_velocity(tau, x, y, fs), v, atol=1e-12 * max(1.0, np.linalg.norm(v)))


def test_rotation_is_right_handed_gyration():
    # dv/dt = v x B / eps is solved by rotate(v, B, -t/eps)
    B = np.array([0.0, 0.0, 1.0])
    v = np.array([1.0, 0.0, 0.0])
    h = 1e-7
    dv = (rodrigues_rotate(v, B, -h) - v) / h
    assert np.allclose(dv, np.cross(v, B), atol=1e-6)


def test_rotation_rejects_non_unit_axis():
    with pytest.raises(PreconditionError):
        rodrigues_rotate(np.ones(3), np.array([0.0, 0.0, 2.0]), 0.3)


@pytest.mark.parametrize("t,eps", [(0.0, 1.0), (math.pi, 0.5), (32 * math.pi, 2.0 ** -14),
                                   (1.0, 1e-6), (-3.0, 0.1)])
def test_reduce_phase(t, eps):
    r = reduce_phase(t, eps)
    assert 0.0 <= r < 2 * math.pi
    assert abs(math.sin(r) - math.sin(t / eps)) < 1e-9 * max(1.0, abs(t / eps) * 1e-7)


def test_reduce_phase_exact_multiples():
    eps = 2.0 ** -14
    r = reduce_phase(2 * math.pi * eps * 2 ** 18, eps)
    assert min(r, 2 * math.pi - r) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.sampled_from([8, 16, 32, 64]))
def test_pi_and_a_identities(seed, n):
    rng = np.random.default_rng(seed)
    g = TauGrid(n)
    # random band-limited periodic samples (no Nyquist content)
    m = n // 2 - 1
    a, b = rng.normal(size=(2, m + 1, 3))
    tau = g.tau[:, None]
    f = sum(a[l] * np.cos(l * tau) + b[l] * np.sin(l * tau) for l in range(m + 1))
    df = sum(-l * a[l] * np.sin(l * tau) + l * b[l] * np.cos(l * tau) for l in range(m + 1))
    Af = a_operator(f)
    assert np.allclose(pi_average(Af), 0.0, atol=1e-10)
    assert np.allclose(pi_average(f), a[0], atol=1e-10)
    # A is the zero-mean antiderivative: A(df/dtau) = f - Pi f and d/dtau A f = f - Pi f
    assert np.allclose(a_operator(df), f - pi_average(f), atol=1e-10)
    dAf = g.grid(1j * g.modes[:, None] * g.coeffs(Af))
    assert np.allclose(dAf, f - pi_average(f), atol=1e-10)
    # Pi is a projection
    assert np.allclose(pi_average(f - pi_average(f)), 0.0, atol=1e-10)


def test_taugrid_rejects_bad_sizes():
    for n in (0, 3, 12):
        with pytest.raises(ConfigurationError):
            TauGrid(n)


def test_eval_at_matches_grid():
    g = TauGrid(16)
    f = np.cos(3 * g.tau) + 0.5 * np.sin(g.tau)
    c = g.coeffs(f)
    assert abs(g.eval_at(c, 0.3) - (math.cos(0.9) + 0.5 * math.sin(0.3))) < 1e-13


def test_filtered_field_is_derivative_of_filtered_state(ex1, x0, v0):
    """y(t) = rotate(v(t), B(x(t)), t / eps) satisfies dy/dt = F_y(t / eps, x, y)."""
    eps, h = 0.5, 1e-4
    rec = reference_solution(x0, v0, ex1, eps, 2 * h, nsteps=2000, record_every=1000)
    ys = [filter_velocity(k * h / eps, r[:3], r[3:], ex1) for k, r in enumerate(rec)]
    dy = (ys[2] - ys[0]) / (2 * h)
    dx = (rec[2, :3] - rec[0, :3]) / (2 * h)
    x, y = rec[1, :3], ys[1]
    Fx, Fy = eval_F(h / eps, x, y, ex1.eval_E(h, x), ex1)
    assert np.allclose(Fx, dx, atol=1e-6)
    assert np.allclose(Fy, dy, atol=1e-6)


def test_compiled_F_matches_numpy(ex1):
    rng = np.random.default_rng(5)
    U = rng.normal(size=(32, 6))
    tau = rng.uniform(0, 2 * np.pi, 32)
    fast = FilteredSystem(ex1).F(tau, U)
    slow = FilteredSystem(ex1, efield=ex1.eval_E).F(tau, U)
    assert np.allclose(fast, slow, atol=1e-14)


def test_compiled_reparam_F_matches_numpy(ex2):
    from uapic.fields import custom_field
    clone = custom_field("ex2", ex2.eval_E, ex2.eval_B, ex2.eval_gradB,
                         constant_intensity=False, divergence_free=True, phi=ex2.eval_phi)
    rng = np.random.default_rng(6)
    U = rng.normal(size=(16, 7))
    tau = rng.uniform(0, 2 * np.pi, 16)
    fast = FilteredSystem(ex2, reparam=True).F(tau, U)
    slow = FilteredSystem(clone, reparam=True).F(tau, U)
    assert np.allclose(fast, slow, atol=1e-14)
    assert np.allclose(fast[:, 6], 1.0 / ex2.eval_b(U[:, :3]))


def test_varying_intensity_needs_reparam(ex2):
    with pytest.raises(ConfigurationError):
        FilteredSystem(ex2)
    with pytest.raises(ConfigurationError):
        FilteredSystem(ex2, efield=ex2.eval_E, reparam=True)
