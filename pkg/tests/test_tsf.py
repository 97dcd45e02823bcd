import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from uapic.fields import ConfigurationError
from uapic.harness import reference_solution
from uapic.rotation import FilteredSystem, TauGrid
from uapic.tsf import (TwoScaleState, ei_coefficients, phi1, phi2, prepare_initial, tsf_extract,
                       tsf_integrate, tsf_step)


@settings(max_examples=200, deadline=None)
@given(re=st.floats(-3, 0.1), im=st.floats(-50, 50))
def test_phi_functions(re, im):
    z = complex(re, im)
    if abs(z) > 1e-3:
        assert abs(phi1(z) - (np.exp(z) - 1) / z) < 1e-11 * max(1, abs(phi1(z)))
    if abs(z) > 0.1:
        assert abs(phi2(z) - (np.exp(z) - 1 - z) / z ** 2) < 1e-10 * max(1, abs(phi2(z)))


def test_phi_limits_are_continuous():
    for z in (0.0, 0.4999, 0.5001, 0.5j, -0.5j):
        assert abs(phi1(z) - sum(z ** j / math.factorial(j + 1) for j in range(30))) < 1e-15
        assert abs(phi2(z) - sum(z ** j / math.factorial(j + 2) for j in range(30))) < 1e-15


def test_ei_coefficients_are_the_integrals():
    g = TauGrid(8)
    dt, eps = 0.3, 0.07
    decay, p, q = ei_coefficients(dt, eps, g)
    assert p[0] == pytest.approx(dt) and q[0] == pytest.approx(dt * dt / 2)
    for a, l in enumerate(g.modes):
        k = lambda s: np.exp(-1j * l * (dt - s) / eps)  # noqa: E731
        re = quad(lambda s: k(s).real, 0, dt, limit=200)[0]
        im = quad(lambda s: k(s).imag, 0, dt, limit=200)[0]
        assert abs(p[a] - (re + 1j * im)) < 1e-12
        re = quad(lambda s: (s * k(s)).real, 0, dt, limit=200)[0]
        im = quad(lambda s: (s * k(s)).imag, 0, dt, limit=200)[0]
        assert abs(q[a] - (re + 1j * im)) < 1e-12
        assert abs(decay[a] - np.exp(-1j * l * dt / eps)) < 1e-12


def test_prepared_datum_passes_through_u0(ex1, x0, v0):
    system = FilteredSystem(ex1)
    g = TauGrid(32)
    U_hat = prepare_initial(system, np.concatenate([x0, v0]), g, 2.0 ** -4)
    assert np.allclose(g.eval_at(U_hat, 0.0), np.concatenate([x0, v0]), atol=1e-14)
    state = TwoScaleState(g, 2.0 ** -4, 0.1, U_hat)
    x, v = tsf_extract(state, system)
    assert np.allclose(x, x0, atol=1e-14) and np.allclose(v, v0, atol=1e-14)


def test_step_keeps_grid_values_real(ex1, x0, v0):
    system = FilteredSystem(ex1)
    g = TauGrid(16)
    eps, dt = 2.0 ** -5, 0.05
    state = TwoScaleState(g, eps, dt, prepare_initial(system, np.concatenate([x0, v0]), g, eps))
    for _ in range(5):
        tsf_step(state, system)
        c = state.U_hat
        # Hermitian symmetry c_{-l} = conj(c_l)
        for a in range(1, g.n // 2):
            assert np.allclose(c[-a], np.conj(c[a]), atol=1e-10)
        assert np.allclose(c[g.n // 2].imag, 0.0)


@pytest.mark.parametrize("eps", [0.5, 2.0 ** -6])
def test_compiled_matches_python(ex1, x0, v0, eps):
    a = tsf_integrate(x0, v0, ex1, eps, 1.0, 40, 16)
    b = tsf_integrate(x0, v0, ex1, eps, 1.0, 40, 16, force_python=True)
    assert np.allclose(a[0], b[0], atol=1e-13) and np.allclose(a[1], b[1], atol=1e-13)


def test_on_step_history_matches_python(ex1, x0, v0):
    got, want = [], []
    tsf_integrate(x0, v0, ex1, 0.1, 0.5, 10, 16, on_step=lambda n, t, x, v: got.append(v))
    tsf_integrate(x0, v0, ex1, 0.1, 0.5, 10, 16, force_python=True,
                  on_step=lambda n, t, x, v: want.append(v))
    assert len(got) == 11 and np.allclose(got, want, atol=1e-13)


@pytest.mark.parametrize("eps", [0.5, 2.0 ** -10])
def test_second_order(ex1, x0, v0, eps):
    T = math.pi / 2
    xr, vr = reference_solution(x0, v0, ex1, eps, T)
    errs = []
    for M in (32, 64, 128):
        x, v = tsf_integrate(x0, v0, ex1, eps, T, M, 32)
        errs.append(np.linalg.norm(x - xr) / np.linalg.norm(xr)
                    + np.linalg.norm(v - vr) / np.linalg.norm(vr))
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 1.6), errs


def test_rejects_varying_intensity(ex2, x0, v0):
    with pytest.raises(ConfigurationError):
        tsf_integrate(x0, v0, ex2, 0.1, 1.0, 10)
