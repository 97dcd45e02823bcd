"""Two-scale formulation (TSF) solved by a second order exponential integrator.

The filtered unknown u(t) is lifted to U(t, tau), 2*pi periodic in tau, with

    dU/dt + (1/eps) dU/dtau = F(tau, U),     u(t) = U(t, t / eps).

In Fourier modes the stiff transport is diagonal, so each mode is advanced by
an exponential Adams scheme (predictor-corrector for the first step, two-step
afterwards). The initial datum is corrected at first order so that U stays
smooth in t uniformly in eps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba import njit

from .fields import ConfigurationError, FieldSet
from .rotation import (FilteredSystem, TauGrid, _F_compiled, _dft, _idft_real, _series_at,
                       dft_matrices, reduce_phase, rodrigues_rotate)

__all__ = [
    "TwoScaleState",
    "phi1",
    "phi2",
    "ei_coefficients",
    "prepare_initial",
    "tsf_step",
    "tsf_extract",
    "tsf_integrate",
]

_SERIES_CUT = 0.5


def _series(z, k0):
    # sum_{j>=0} z^j / (j + k0)!, enough terms for |z| <= 0.5
    out = np.zeros_like(z)
    term = np.full_like(z, 1.0 / math.factorial(k0))
    for j in range(22):
        out = out + term
        term = term * z / (j + k0 + 1)
    return out


def phi1(z):
    """(e^z - 1) / z for complex z, stable near 0."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < _SERIES_CUT
    zs = np.where(small, 1.0, z)
    return np.where(small, _series(np.where(small, z, 0), 1), (np.exp(zs) - 1.0) / zs)


def phi2(z):
    """(e^z - 1 - z) / z^2 for complex z, stable near 0."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < _SERIES_CUT
    zs = np.where(small, 1.0, z)
    return np.where(small, _series(np.where(small, z, 0), 2),
                    (np.exp(zs) - 1.0 - zs) / zs ** 2)


def ei_coefficients(dt: float, eps: float, grid: TauGrid):
    """Per-mode ``(decay, p, q)`` for one step of size ``dt``.

    decay_l = exp(-i l dt / eps), p_l = int_0^dt exp(-i l (dt - s) / eps) ds and
    q_l = int_0^dt s exp(-i l (dt - s) / eps) ds (so that p_0 = dt, q_0 = dt^2 / 2).
    """
    z = -1j * grid.modes * (dt / eps)
    theta = reduce_phase(dt, eps)
    decay = np.exp(-1j * grid.modes * theta)
    return decay, dt * phi1(z), dt * dt * phi2(z)


@dataclass
class TwoScaleState:
    """Coefficients ``U_hat[l, d]`` at time ``t = n * dt`` plus F of the last step."""

    grid: TauGrid
    eps: float
    dt: float
    U_hat: np.ndarray
    n: int = 0
    F_prev: Optional[np.ndarray] = None

    @property
    def t(self) -> float:
        return self.n * self.dt

    @property
    def U(self):
        """Grid values U(t, tau_j)."""
        return self.grid.grid(self.U_hat)


def _project_real(U_hat, n):
    # the Nyquist mode has no conjugate partner; keep its real part only
    U_hat[n // 2] = U_hat[n // 2].real
    return U_hat


def prepare_initial(system: FilteredSystem, u0, grid: TauGrid, eps: float):
    """Corrected datum U(0, tau) = u0 + h(tau) - h(0), h = eps A F(., u0)."""
    u0 = np.asarray(u0, float)
    Fs = system.F(grid.tau, np.broadcast_to(u0, (grid.n, u0.size)), 0.0)
    h_hat = eps * grid.antiderivative_coeffs(Fs)
    h0 = np.real(h_hat.sum(axis=0))
    U_hat = h_hat.copy()
    U_hat[0] += u0 - h0
    return _project_real(U_hat, grid.n)


def tsf_step(state: TwoScaleState, system: FilteredSystem, coeffs=None):
    """Advance ``state`` by one step (in place) and return it."""
    grid, eps, dt = state.grid, state.eps, state.dt
    decay, p, q = coeffs if coeffs is not None else ei_coefficients(dt, eps, grid)
    decay, p, q = decay[:, None], p[:, None], q[:, None]
    t = state.t
    F_hat = grid.coeffs(system.F(grid.tau, state.U, t))
    if state.n == 0:
        U_star = decay * state.U_hat + p * F_hat
        U_star = _project_real(U_star, grid.n)
        F_star = grid.coeffs(system.F(grid.tau, grid.grid(U_star), t + dt))
        U_new = U_star + (q / dt) * (F_star - F_hat)
    else:
        U_new = decay * state.U_hat + p * F_hat + (q / dt) * (F_hat - state.F_prev)
    state.U_hat = _project_real(U_new, grid.n)
    state.F_prev = F_hat
    state.n += 1
    return state


def tsf_extract(state: TwoScaleState, system: FilteredSystem):
    """Physical ``(x, v)`` at time ``state.t``: evaluate U at tau = t / eps, unfilter."""
    phase = reduce_phase(state.t, state.eps)
    u = state.grid.eval_at(state.U_hat, phase)
    return system.physical(phase, u)


@njit(cache=True)
def _tsf_run(kind, params, U_hat, decay, p, q, dt, eps, steps, tau, modes):
    """Compiled TSF loop for catalog fields; returns u(t_n) at the fast phase
    for every step and the final coefficients."""
    n, d = U_hat.shape
    W, Winv = dft_matrices(n)
    hist = np.empty((steps + 1, d))
    _series_at(modes, U_hat, 0.0, hist[0])
    U = np.empty((n, d))
    F_hat = np.empty((n, d), dtype=np.complex128)
    F_prev = np.empty((n, d), dtype=np.complex128)
    F_star = np.empty((n, d), dtype=np.complex128)
    U_star = np.empty((n, d), dtype=np.complex128)
    half = n // 2
    for k in range(steps):
        t = k * dt
        _idft_real(Winv, U_hat, U)
        _dft(W, _F_compiled(kind, params, tau, U, t, False), F_hat)
        if k == 0:
            for a in range(n):
                for j in range(d):
                    U_star[a, j] = decay[a] * U_hat[a, j] + p[a] * F_hat[a, j]
            for j in range(d):
                U_star[half, j] = U_star[half, j].real
            _idft_real(Winv, U_star, U)
            _dft(W, _F_compiled(kind, params, tau, U, t + dt, False), F_star)
            for a in range(n):
                for j in range(d):
                    U_hat[a, j] = U_star[a, j] + q[a] / dt * (F_star[a, j] - F_hat[a, j])
        else:
            for a in range(n):
                for j in range(d):
                    U_hat[a, j] = (decay[a] * U_hat[a, j] + p[a] * F_hat[a, j]
                                   + q[a] / dt * (F_hat[a, j] - F_prev[a, j]))
        for j in range(d):
            U_hat[half, j] = U_hat[half, j].real
        F_prev[:, :] = F_hat
        _series_at(modes, U_hat, reduce_phase((k + 1) * dt, eps), hist[k + 1])
    return hist, U_hat


def tsf_integrate(x0, v0, fs: FieldSet, eps: float, T: float, steps: int,
                  n_tau: int = 32, efield: Optional[Callable] = None,
                  on_step: Optional[Callable] = None, force_python: bool = False):
    """Integrate one particle to time ``T`` with ``steps`` equal steps.

    ``on_step(n, t, x, v)`` is called after every step (and at n = 0).
    Catalog fields without an override E run in a compiled loop unless
    ``force_python`` is set.
    """
    if not fs.constant_intensity:
        raise ConfigurationError("TSF supports unit-intensity magnetic fields only")
    if int(steps) < 1:
        raise ConfigurationError("steps must be positive")
    steps = int(steps)
    system = FilteredSystem(fs, efield)
    grid = TauGrid(n_tau)
    dt = T / steps
    u0 = system.initial_state(x0, v0)
    state = TwoScaleState(grid, eps, dt, prepare_initial(system, u0, grid, eps))
    coeffs = ei_coefficients(dt, eps, grid)
    if fs.compiled and efield is None and not force_python:
        hist, _ = _tsf_run(fs.kind, fs.params, state.U_hat.copy(), *coeffs, dt, eps, steps,
                           grid.tau, grid.modes)
        return _unfilter_history(system, hist, dt, eps, on_step)
    if on_step is not None:
        on_step(0, 0.0, *tsf_extract(state, system))
    for _ in range(steps):
        tsf_step(state, system, coeffs)
        if on_step is not None:
            on_step(state.n, state.t, *tsf_extract(state, system))
    return tsf_extract(state, system)


def _unfilter_history(system: FilteredSystem, hist, dt, eps, on_step):
    """Map recorded filtered states u(t_n) back to (x, v); calls ``on_step``."""
    if on_step is None:
        n = hist.shape[0] - 1
        return system.physical(reduce_phase(n * dt, eps), hist[-1])
    X = hist[:, :3]
    B = system.unit_field(X)
    phases = np.array([reduce_phase(k * dt, eps) for k in range(hist.shape[0])])
    V = rodrigues_rotate(hist[:, 3:6], B, -phases)
    for k in range(hist.shape[0]):
        on_step(k, k * dt, X[k].copy(), V[k])
    return X[-1].copy(), V[-1]
