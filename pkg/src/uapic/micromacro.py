"""First order micro-macro (MM) decomposition integrator.

The filtered solution is split as ``u(t) = Theta(t/eps + sigma, r(t)) + w(t)``
with ``Theta(tau, r) = r + eps A F(tau, r)``. The smooth macro part r is
advanced by leapfrog, the defect w by an exponential rule that integrates the
fast phase exactly for a linear-in-time interpolant of H = F(., Theta + w).

``sigma`` is the fast phase at the last restart, kept reduced to [0, 2 pi).
Varying-intensity fields are handled by :func:`reparam_integrate`, which
runs the same scheme on the 7 dimensional system in the per-particle time s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from numba import njit

from .fields import ConfigurationError, FieldSet
from .rotation import (FilteredSystem, TauGrid, _F_compiled, _dft, _idft_real, _series_at,
                       dft_matrices, reduce_phase)
from .tsf import _unfilter_history, phi1, phi2

__all__ = [
    "MmState",
    "MicroCoefficients",
    "micro_coefficients",
    "theta",
    "mm_init",
    "mm_step",
    "mm_restart",
    "mm_interpolate",
    "mm_integrate",
    "ReparamResult",
    "reparam_integrate",
    "magnetic_moment_particle",
    "RangeError",
    "IterationLimitError",
    "DomainError",
]


class RangeError(ValueError):
    """Interpolation time outside the bracketing step."""


class IterationLimitError(RuntimeError):
    """Final time not reached within the step budget."""


class DomainError(ValueError):
    """Field intensity below the declared lower bound."""


@dataclass(frozen=True)
class MicroCoefficients:
    alpha: np.ndarray
    beta: np.ndarray


def micro_coefficients(dt: float, eps: float, grid: TauGrid) -> MicroCoefficients:
    """alpha_l = int_0^dt e^{ilt/eps} dt, beta_l = int_0^dt t e^{ilt/eps} dt."""
    z = 1j * grid.modes * (dt / eps)
    alpha = dt * phi1(z)
    beta = dt * dt * np.exp(1j * grid.modes * reduce_phase(dt, eps)) * phi2(-z)
    return MicroCoefficients(alpha, beta)


def _a_coeffs(system, grid, eps, r, t=0.0):
    """Coefficients of eps A F(., r) on the grid."""
    Fr = system.F(grid.tau, np.broadcast_to(r, (grid.n, r.size)), t)
    return eps * grid.antiderivative_coeffs(Fr)


def theta(tau: float, r, eps: float, system: FilteredSystem, grid: TauGrid, t: float = 0.0):
    """Theta(tau, r) = r + eps A F(tau, r); ``t`` is the slow time seen by E."""
    r = np.asarray(r, float)
    if eps == 0.0:
        return r.copy()
    return r + grid.eval_at(_a_coeffs(system, grid, eps, r, t), tau)


@dataclass
class MmState:
    """Macro/micro pair at local step ``n`` (time ``t0 + n dt``)."""

    r: np.ndarray
    w: np.ndarray
    eps: float
    dt: float
    sigma: float = 0.0
    t0: float = 0.0
    n: int = 0
    r_prev: Optional[np.ndarray] = None
    w_prev: Optional[np.ndarray] = None
    H_prev: Optional[np.ndarray] = None
    A_hat: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def t(self) -> float:
        return self.t0 + self.n * self.dt

    def phase(self, n=None) -> float:
        """Fast phase t_n / eps + sigma of local step n (reduced)."""
        n = self.n if n is None else n
        return reduce_phase(n * self.dt, self.eps) + self.sigma

    def u(self, grid: TauGrid, system: FilteredSystem):
        """Reconstruction Theta(t_n/eps + sigma, r^n) + w^n."""
        if self.A_hat is None:
            self.A_hat = _a_coeffs(system, grid, self.eps, self.r)
        return self.r + grid.eval_at(self.A_hat, self.phase()) + self.w


def mm_init(u0, eps: float, system: FilteredSystem, grid: TauGrid, dt: float,
            sigma: float = 0.0, t0: float = 0.0) -> MmState:
    """r0 = u0 - eps A F(., u0)(sigma), w0 = eps A[F(., u0) - F(., r0)](sigma)."""
    u0 = np.asarray(u0, float)
    A_u = _a_coeffs(system, grid, eps, u0, t0)
    r0 = u0 - grid.eval_at(A_u, sigma)
    A_r = _a_coeffs(system, grid, eps, r0, t0)
    w0 = grid.eval_at(A_u - A_r, sigma)
    return MmState(r0, w0, eps, dt, sigma=sigma, t0=t0, A_hat=A_r)


def mm_step(state: MmState, system: FilteredSystem, grid: TauGrid,
            coeffs: Optional[MicroCoefficients] = None, starter: str = "euler") -> MmState:
    """One MM step; returns the new state (the input is left untouched).

    The first step after (re)initialisation uses the explicit Euler starter
    by default. ``starter="heun"`` instead corrects it with the predicted
    state at the end of the step, which makes that step second order too.
    """
    if starter not in ("euler", "heun"):
        raise ConfigurationError(f"unknown starter {starter!r}")
    eps, dt = state.eps, state.dt
    if coeffs is None:
        coeffs = micro_coefficients(dt, eps, grid)
    t = state.t
    r, w = state.r, state.w
    A_hat = state.A_hat if state.A_hat is not None else _a_coeffs(system, grid, eps, r, t)
    rate, H_hat = _macro_rate_and_H(system, grid, r, w, A_hat, t)

    phase_n = state.phase()
    phase_next = state.phase(state.n + 1)
    ph = grid.phases(phase_n)[:, None]
    theta_n = r + grid.eval_at(A_hat, phase_n)

    def finish(r_new, incr):
        A_new = _a_coeffs(system, grid, eps, r_new, t + dt)
        w_new = w + np.real((ph * incr).sum(axis=0)) - (r_new + grid.eval_at(A_new, phase_next)) + theta_n
        return r_new, w_new, A_new

    alpha = coeffs.alpha[:, None]
    beta_dt = (coeffs.beta / dt)[:, None]
    if state.n == 0:
        r_new, w_new, A_new = finish(r + dt * rate, alpha * H_hat)
        if starter == "heun":
            rate_s, H_s = _macro_rate_and_H(system, grid, r_new, w_new, A_new, t + dt)
            r_new, w_new, A_new = finish(r + 0.5 * dt * (rate + rate_s),
                                         alpha * H_hat + beta_dt * (H_s - H_hat))
    else:
        r_new, w_new, A_new = finish(state.r_prev + 2.0 * dt * rate,
                                     alpha * H_hat + beta_dt * (H_hat - state.H_prev))
    return replace(state, r=r_new, w=w_new, n=state.n + 1, r_prev=r, w_prev=w,
                   H_prev=H_hat, A_hat=A_new)


def _macro_rate_and_H(system, grid, r, w, A_hat, t):
    """Pi F(., Theta(., r)) and the coefficients of H = F(., Theta(., r) + w)."""
    Theta = r + grid.grid(A_hat)
    rate = system.F(grid.tau, Theta, t).mean(axis=0)
    H_hat = grid.coeffs(system.F(grid.tau, Theta + w, t))
    return rate, H_hat


def mm_restart(state: MmState, system: FilteredSystem, grid: TauGrid) -> MmState:
    """Re-derive the decomposition from the current reconstruction."""
    u = state.u(grid, system)
    return mm_init(u, state.eps, system, grid, state.dt, sigma=state.phase() % (2 * math.pi),
                   t0=state.t)


def mm_interpolate(s0: MmState, s1: MmState, t: float, system: FilteredSystem,
                   grid: TauGrid):
    """Dense output between consecutive states: linear r and w, then Theta."""
    if s1.n != s0.n + 1 or s1.sigma != s0.sigma:
        raise RangeError("states are not consecutive steps of one decomposition")
    ta, tb = s0.t, s1.t
    if not (ta - 1e-14 * max(1.0, abs(ta)) <= t <= tb + 1e-14 * max(1.0, abs(tb))):
        raise RangeError(f"t={t} outside [{ta}, {tb}]")
    lam = (t - ta) / (tb - ta)
    r = (1.0 - lam) * s0.r + lam * s1.r
    w = (1.0 - lam) * s0.w + lam * s1.w
    # t/eps + sigma measured from the decomposition start
    phase = s0.phase() + reduce_phase(lam * s0.dt, s0.eps)
    return theta(phase, r, s0.eps, system, grid, t) + w


@njit(cache=True)
def _a_coeffs_nb(kind, params, tau, inv_il, W, eps, u, t, reparam, out):
    n = tau.shape[0]
    d = u.shape[0]
    U = np.empty((n, d))
    for j in range(n):
        U[j, :] = u
    _dft(W, _F_compiled(kind, params, tau, U, t, reparam), out)
    for a in range(n):
        for k in range(d):
            out[a, k] *= eps * inv_il[a]


@njit(cache=True)
def _mm_rate_H(kind, params, tau, W, Winv, r, w, A_r, t, reparam, rate, H_hat):
    n = tau.shape[0]
    d = r.shape[0]
    Theta = np.empty((n, d))
    _idft_real(Winv, A_r, Theta)
    for j in range(n):
        for i in range(d):
            Theta[j, i] += r[i]
    Fth = _F_compiled(kind, params, tau, Theta, t, reparam)
    for i in range(d):
        acc = 0.0
        for j in range(n):
            acc += Fth[j, i]
            Theta[j, i] += w[i]
        rate[i] = acc / n
    _dft(W, _F_compiled(kind, params, tau, Theta, t, reparam), H_hat)


@njit(cache=True)
def _mm_finish(kind, params, tau, modes, inv_il, W, eps, dt, t, reparam, r_new, w,
               theta_n, phase_n, phase_next, alpha, beta, H_hat, H_lin, first,
               A_new, w_new):
    """w_new = w + sum_l e^{il phase_n}[alpha H + beta/dt (H - H_lin)] - Theta_new + Theta_n."""
    n = tau.shape[0]
    d = w.shape[0]
    incr = np.zeros(d)
    for a in range(n):
        ang = modes[a] * phase_n
        e = complex(math.cos(ang), math.sin(ang))
        for i in range(d):
            z = alpha[a] * H_hat[a, i]
            if not first:
                z += beta[a] / dt * (H_hat[a, i] - H_lin[a, i])
            incr[i] += (e * z).real
    _a_coeffs_nb(kind, params, tau, inv_il, W, eps, r_new, t + dt, reparam, A_new)
    tmp = np.empty(d)
    _series_at(modes, A_new, phase_next, tmp)
    for i in range(d):
        w_new[i] = w[i] + incr[i] - (r_new[i] + tmp[i]) + theta_n[i]


@njit(cache=True)
def _mm_run(kind, params, u0, eps, dt, steps, restart_every, tau, modes, inv_il,
            alpha, beta, reparam, heun):
    """Compiled MM loop for catalog fields. Returns the reconstruction u at
    every step. ``restart_every`` <= 0 disables restarts."""
    n = tau.shape[0]
    d = u0.shape[0]
    W, Winv = dft_matrices(n)
    hist = np.empty((steps + 1, d))
    hist[0, :] = u0
    A_u = np.empty((n, d), dtype=np.complex128)
    A_r = np.empty((n, d), dtype=np.complex128)
    A_new = np.empty((n, d), dtype=np.complex128)
    H_hat = np.empty((n, d), dtype=np.complex128)
    H_s = np.empty((n, d), dtype=np.complex128)
    H_prev = np.empty((n, d), dtype=np.complex128)
    rate = np.empty(d)
    rate_s = np.empty(d)
    tmp = np.empty(d)
    r = np.empty(d)
    w = np.empty(d)
    r_new = np.empty(d)
    w_new = np.empty(d)
    r_prev = np.empty(d)
    theta_n = np.empty(d)
    u = u0.copy()
    sigma = 0.0
    local = 0
    for k in range(steps):
        t = k * dt
        if local == 0:
            # (re)initialise the decomposition at phase sigma
            _a_coeffs_nb(kind, params, tau, inv_il, W, eps, u, t, reparam, A_u)
            _series_at(modes, A_u, sigma, tmp)
            for i in range(d):
                r[i] = u[i] - tmp[i]
            _a_coeffs_nb(kind, params, tau, inv_il, W, eps, r, t, reparam, A_r)
            for a in range(n):
                for i in range(d):
                    A_u[a, i] -= A_r[a, i]
            _series_at(modes, A_u, sigma, w)
        _mm_rate_H(kind, params, tau, W, Winv, r, w, A_r, t, reparam, rate, H_hat)
        phase_n = reduce_phase(local * dt, eps) + sigma
        phase_next = reduce_phase((local + 1) * dt, eps) + sigma
        _series_at(modes, A_r, phase_n, tmp)
        for i in range(d):
            theta_n[i] = r[i] + tmp[i]
        if local == 0:
            for i in range(d):
                r_new[i] = r[i] + dt * rate[i]
            _mm_finish(kind, params, tau, modes, inv_il, W, eps, dt, t, reparam, r_new, w,
                       theta_n, phase_n, phase_next, alpha, beta, H_hat, H_hat, True,
                       A_new, w_new)
            if heun:
                _mm_rate_H(kind, params, tau, W, Winv, r_new, w_new, A_new, t + dt, reparam,
                           rate_s, H_s)
                for i in range(d):
                    r_new[i] = r[i] + 0.5 * dt * (rate[i] + rate_s[i])
                # beta/dt (H_s - H): pass H_s as the "current" value and H as the lag
                for a in range(n):
                    for i in range(d):
                        H_s[a, i] = 2.0 * H_hat[a, i] - H_s[a, i]
                _mm_finish(kind, params, tau, modes, inv_il, W, eps, dt, t, reparam, r_new,
                           w, theta_n, phase_n, phase_next, alpha, beta, H_hat, H_s, False,
                           A_new, w_new)
        else:
            for i in range(d):
                r_new[i] = r_prev[i] + 2.0 * dt * rate[i]
            _mm_finish(kind, params, tau, modes, inv_il, W, eps, dt, t, reparam, r_new, w,
                       theta_n, phase_n, phase_next, alpha, beta, H_hat, H_prev, False,
                       A_new, w_new)
        _series_at(modes, A_new, phase_next, tmp)
        for i in range(d):
            r_prev[i] = r[i]
            r[i] = r_new[i]
            w[i] = w_new[i]
            u[i] = r[i] + tmp[i] + w[i]
        A_r[:, :] = A_new
        H_prev[:, :] = H_hat
        local += 1
        hist[k + 1, :] = u
        if restart_every > 0 and local == restart_every:
            sigma = phase_next % (2.0 * math.pi)
            local = 0
    return hist


def mm_integrate(x0, v0, fs: FieldSet, eps: float, T: float, steps: int,
                 n_tau: int = 32, restart_period: Optional[float] = None,
                 efield: Optional[Callable] = None,
                 on_step: Optional[Callable] = None, keep_states: bool = False,
                 force_python: bool = False, starter: str = "euler"):
    """MM for unit-intensity fields over ``steps`` equal steps of ``[0, T]``.

    ``restart_period`` (physical time) re-derives the decomposition every
    ``round(restart_period / dt)`` steps (at least one). ``on_step(n, t, x, v)``
    is called at every step. With ``keep_states`` the list of states is
    returned as a third item (for dense output). Catalog fields without an
    override E run in a compiled loop unless ``force_python`` is set.
    """
    if int(steps) < 1:
        raise ConfigurationError("steps must be positive")
    steps = int(steps)
    system = FilteredSystem(fs, efield)
    grid = TauGrid(n_tau)
    dt = T / steps
    coeffs = micro_coefficients(dt, eps, grid)
    every = None
    if restart_period is not None:
        every = max(1, int(round(restart_period / dt)))
    u0 = system.initial_state(x0, v0)
    if fs.compiled and efield is None and not keep_states and not force_python:
        hist = _mm_run(fs.kind, fs.params, u0, eps, dt, steps, every or 0, grid.tau,
                       grid.modes, grid.inv_il, coeffs.alpha, coeffs.beta, False,
                       starter == "heun")
        return _unfilter_history(system, hist, dt, eps, on_step)
    state = mm_init(u0, eps, system, grid, dt)
    states = [state] if keep_states else None

    def physical(st):
        return system.physical(st.phase(), st.u(grid, system))

    if on_step is not None:
        on_step(0, 0.0, *physical(state))
    for k in range(1, steps + 1):
        state = mm_step(state, system, grid, coeffs, starter)
        if keep_states:
            states.append(state)
        if on_step is not None:
            on_step(k, k * dt, *physical(state))
        if every is not None and k % every == 0 and k < steps:
            state = mm_restart(state, system, grid)
            state.t0 = k * dt
            if keep_states:
                states.append(state)
    x, v = physical(state)
    if keep_states:
        return x, v, states
    return x, v


@dataclass
class ReparamResult:
    x: np.ndarray
    v_par: np.ndarray
    speed: float
    s_star: float
    steps: int
    t_history: Optional[np.ndarray] = None


def reparam_integrate(x0, v0, fs: FieldSet, T: float, ds: float, eps: float,
                      n_tau: int = 32, restart_every: Optional[int] = 1,
                      on_step: Optional[Callable] = None,
                      record_t: bool = False, starter: str = "heun") -> ReparamResult:
    """MM in the per-particle time s (ds/dt = |B|) up to physical time T.

    ``restart_every`` counts steps (``None`` disables restarts).
    ``on_step(n, s, t, x, v_par, speed)`` sees every accepted step.
    """
    if ds <= 0 or T < 0:
        raise ConfigurationError("need ds > 0 and T >= 0")
    system = FilteredSystem(fs, reparam=True)
    grid = TauGrid(n_tau)
    coeffs = micro_coefficients(ds, eps, grid)
    cap = int(math.ceil(fs.C_b * T / ds)) + 8
    tol_b = 1e-9 * max(1.0, fs.c0)

    def observe(u):
        x = u[:3]
        B = fs.eval_B(x)
        b = float(np.linalg.norm(B))
        if b < fs.c0 - tol_b:
            raise DomainError(f"|B| = {b} below c0 = {fs.c0} at x = {x}")
        Bt = B / b
        y = u[3:6]
        return x.copy(), (Bt @ y) * Bt, float(np.linalg.norm(y))

    state = mm_init(system.initial_state(x0, v0), eps, system, grid, ds)
    u = state.u(grid, system)
    ts = [0.0]
    if on_step is not None:
        on_step(0, 0.0, 0.0, *observe(u))
    if T == 0.0:
        x, vp, sp = observe(u)
        return ReparamResult(x, vp, sp, 0.0, 0, np.array(ts) if record_t else None)
    n = 0
    while True:
        if n >= cap:
            raise IterationLimitError(f"t = {u[6]} < T = {T} after {n} steps")
        new = mm_step(state, system, grid, coeffs, starter)
        u_new = new.u(grid, system)
        n += 1
        if not u_new[6] > u[6]:
            raise DomainError(f"t(s) not increasing at step {n}")
        if record_t:
            ts.append(float(u_new[6]))
        if on_step is not None:
            on_step(n, n * ds, float(u_new[6]), *observe(u_new))
        if u_new[6] >= T:
            break
        state, u = new, u_new
        if restart_every is not None and n % restart_every == 0:
            state = mm_restart(state, system, grid)
    # t^n <= T <= t^{n+1}: interpolate r, w and s, rebuild with Theta
    th = (T - u_new[6]) / (u[6] - u_new[6])
    r = th * state.r + (1.0 - th) * new.r
    w = th * state.w + (1.0 - th) * new.w
    s_star = (n - 1 + (1.0 - th)) * ds
    phase = state.phase() + reduce_phase((1.0 - th) * ds, eps)
    u_star = theta(phase, r, eps, system, grid) + w
    x, vp, sp = observe(u_star)
    return ReparamResult(x, vp, sp, s_star, n, np.array(ts) if record_t else None)


def magnetic_moment_particle(x, v_par, speed, fs: FieldSet) -> float:
    """I = |v_perp|^2 / (2 |B(x)|), with round-off negatives clamped to zero."""
    vp2 = float(np.dot(v_par, v_par))
    perp = max(0.0, float(speed) ** 2 - vp2)
    return 0.5 * perp / float(fs.eval_b(np.asarray(x, float)))
