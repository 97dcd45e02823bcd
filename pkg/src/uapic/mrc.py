"""Second order multi-revolution composition (MRC) integrator.

In the fast time s = t / eps the characteristics read

    x' = eps v,    v' = eps E + v x B,

whose stiff part is 2*pi periodic. Writing ``T_f / eps = 2 pi M_f + T_r``,
each of the ``M`` macro steps composes a forward period flow with
coefficient ``alpha H`` and a backward one with coefficient ``-beta H`` and
advances the physical time by ``2 pi H``. Period flows are computed with
Strang splitting of two exactly solvable, volume preserving sub-flows. When
``M_f / M < 1`` plain Strang splitting with step ``2 pi / M`` is used.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba import njit

from .fields import ConfigurationError, FieldSet, field_point

__all__ = [
    "MrcPlan",
    "plan_mrc",
    "exact_position_subflow",
    "exact_velocity_subflow",
    "strang_flow",
    "mrc_integrate",
]

COMPOSITION = "composition"
STRANG = "strang"


@dataclass(frozen=True)
class MrcPlan:
    eps: float
    T_f: float
    M: int
    M_f: int
    T_r: float
    M0: float
    H: float
    alpha: float
    beta: float
    M_micro: int
    mode: str

    @property
    def macro_dt(self) -> float:
        """Physical time covered by one macro step."""
        if self.mode == STRANG:
            return self.T_f / self.fallback_steps
        return 2.0 * math.pi * self.H

    @property
    def fallback_steps(self) -> int:
        h = 2.0 * math.pi / self.M
        return max(1, int(math.ceil(self.T_f / self.eps / h - 1e-9)))

    @property
    def remainder_steps(self) -> int:
        if self.T_r <= 0.0:
            return 0
        return max(1, int(math.ceil(self.M_micro * self.T_r / (2.0 * math.pi))))


def plan_mrc(T_f: float, eps: float, M: int, M_micro: Optional[int] = None) -> MrcPlan:
    """Split ``[0, T_f]`` into ``M`` macro steps (micro steps default to ``M``)."""
    if not (T_f > 0 and 0 < eps <= 1):
        raise ConfigurationError("need T_f > 0 and 0 < eps <= 1")
    if int(M) < 1:
        raise ConfigurationError("M must be a positive integer")
    M = int(M)
    M_micro = M if M_micro is None else int(M_micro)
    if M_micro < 1:
        raise ConfigurationError("M_micro must be a positive integer")
    ratio = T_f / (2.0 * math.pi * eps)
    M_f = int(math.floor(ratio * (1.0 + 1e-12)))
    T_r = max(0.0, T_f / eps - 2.0 * math.pi * M_f)
    M0 = M_f / M
    if M0 < 1.0:
        return MrcPlan(eps, T_f, M, M_f, T_r, M0, eps * M0, 1.0, 0.0, M_micro, STRANG)
    alpha = 0.5 * (1.0 + 1.0 / M0)
    beta = 0.5 * (1.0 - 1.0 / M0)
    return MrcPlan(eps, T_f, M, M_f, T_r, M0, eps * M0, alpha, beta, M_micro, COMPOSITION)


@njit(cache=True)
def _vel_point(v, E, B, c, t):
    ct = math.cos(t)
    st = math.sin(t)
    Bv = B[0] * v[0] + B[1] * v[1] + B[2] * v[2]
    BE = B[0] * E[0] + B[1] * E[1] + B[2] * E[2]
    vxB0 = v[1] * B[2] - v[2] * B[1]
    vxB1 = v[2] * B[0] - v[0] * B[2]
    vxB2 = v[0] * B[1] - v[1] * B[0]
    ExB0 = E[1] * B[2] - E[2] * B[1]
    ExB1 = E[2] * B[0] - E[0] * B[2]
    ExB2 = E[0] * B[1] - E[1] * B[0]
    a = c * (t - st) * BE
    g = (1.0 - ct) * Bv
    v0 = ct * v[0] + st * vxB0 + c * st * E[0] + a * B[0] + c * (1.0 - ct) * ExB0 + g * B[0]
    v1 = ct * v[1] + st * vxB1 + c * st * E[1] + a * B[1] + c * (1.0 - ct) * ExB1 + g * B[1]
    v2 = ct * v[2] + st * vxB2 + c * st * E[2] + a * B[2] + c * (1.0 - ct) * ExB2 + g * B[2]
    v[0] = v0
    v[1] = v1
    v[2] = v2


@njit(cache=True)
def _vel_batch(V, E, B, c, t):
    out = V.copy()
    for k in range(V.shape[0]):
        _vel_point(out[k], E[k], B[k], c, t)
    return out


def exact_position_subflow(x, v, c, t):
    """Free streaming ``x' = c v`` for a time ``t``."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    return x + (t * c) * v, v.copy()


def exact_velocity_subflow(x, v, E, B, c, t):
    """Exact flow of ``v' = c E + v x B`` with x, E and unit B frozen."""
    B = np.asarray(B, float)
    if np.any(np.abs(np.linalg.norm(B, axis=-1) - 1.0) > 1e-10):
        from .rotation import PreconditionError
        raise PreconditionError("velocity sub-flow requires a unit magnetic field")
    V = np.atleast_2d(np.asarray(v, float))
    out = _vel_batch(np.ascontiguousarray(V),
                     np.ascontiguousarray(np.broadcast_to(np.atleast_2d(E), V.shape), float),
                     np.ascontiguousarray(np.broadcast_to(np.atleast_2d(B), V.shape)),
                     float(c), float(t))
    return np.array(x, float, copy=True), out.reshape(np.shape(v))


@njit(cache=True)
def _strang_point(kind, params, t_phys, x, v, c, h, nsteps):
    E = np.empty(3)
    B = np.empty(3)
    G = np.empty((3, 3))
    for _ in range(nsteps):
        for i in range(3):
            x[i] += 0.5 * h * c * v[i]
        field_point(kind, params, t_phys, x, E, B, G)
        _vel_point(v, E, B, c, h)
        for i in range(3):
            x[i] += 0.5 * h * c * v[i]


@njit(cache=True)
def _mrc_point(kind, params, x, v, M, M_micro, alpha, beta, H, eps, T_r, n_rem,
               strang, n_fallback, h_fallback, dt_macro):
    """Single-particle MRC. Returns the states after each macro step."""
    hist = np.empty((n_fallback + 1 if strang else M + 1, 6))
    hist[0, :3] = x
    hist[0, 3:] = v
    if strang:
        for n in range(n_fallback):
            _strang_point(kind, params, n * dt_macro, x, v, eps, h_fallback, 1)
            hist[n + 1, :3] = x
            hist[n + 1, 3:] = v
        return hist
    h = 2.0 * math.pi / M_micro
    for n in range(M):
        t_phys = n * dt_macro
        _strang_point(kind, params, t_phys, x, v, alpha * H, h, M_micro)
        if beta != 0.0:
            _strang_point(kind, params, t_phys, x, v, -beta * H, -h, M_micro)
        hist[n + 1, :3] = x
        hist[n + 1, 3:] = v
    if n_rem > 0:
        _strang_point(kind, params, M * dt_macro, x, v, eps, T_r / n_rem, n_rem)
    return hist


def strang_flow(x, v, c, h, nsteps, fs: FieldSet, efield: Callable, t_phys=0.0):
    """``nsteps`` Strang steps of ``x' = c v, v' = c E + v x B`` with step ``h``
    (negative ``h`` integrates backwards). ``efield(t, X)`` is refreshed
    before every velocity kick."""
    x = np.array(x, float)
    v = np.array(v, float)
    for _ in range(nsteps):
        x += (0.5 * h * c) * v
        E = np.ascontiguousarray(efield(t_phys, x), dtype=float)
        B = fs.eval_B(x)
        v = _vel_batch(v, E, B, float(c), float(h))
        x += (0.5 * h * c) * v
    return x, v


def mrc_integrate(x0, v0, plan: MrcPlan, fs: FieldSet, efield: Optional[Callable] = None,
                  on_macro: Optional[Callable] = None):
    """Advance one particle (``(3,)`` arrays) or an ensemble (``(n, 3)``)
    from 0 to ``plan.T_f``.

    ``efield(t, X)`` supplies E at the particle positions; the default is the
    field set's external E. When it is ``None`` and the field is compiled,
    the whole run executes in a compiled loop. ``on_macro(n, t, x, v)`` is
    called after every macro step (and at n = 0).
    """
    if not fs.constant_intensity:
        raise ConfigurationError("MRC requires a unit-intensity magnetic field")
    x = np.array(x0, float)
    v = np.array(v0, float)
    single = x.ndim == 1
    strang = plan.mode == STRANG
    dt_macro = plan.macro_dt

    if efield is None and fs.compiled and single:
        hist = _mrc_point(fs.kind, fs.params, x, v, plan.M, plan.M_micro, plan.alpha,
                          plan.beta, plan.H, plan.eps, plan.T_r, plan.remainder_steps,
                          strang, plan.fallback_steps, plan.T_f / plan.eps / plan.fallback_steps,
                          dt_macro)
        if on_macro is not None:
            for n, row in enumerate(hist):
                on_macro(n, n * dt_macro, row[:3], row[3:])
        return x, v

    if efield is None:
        efield = fs.eval_E
    X = np.atleast_2d(x)
    V = np.atleast_2d(v)
    if on_macro is not None:
        on_macro(0, 0.0, _squeeze(X, single), _squeeze(V, single))
    if strang:
        n_steps = plan.fallback_steps
        h = plan.T_f / plan.eps / n_steps
        for n in range(n_steps):
            X, V = strang_flow(X, V, plan.eps, h, 1, fs, efield, n * dt_macro)
            if on_macro is not None:
                on_macro(n + 1, (n + 1) * dt_macro, _squeeze(X, single), _squeeze(V, single))
    else:
        h = 2.0 * math.pi / plan.M_micro
        for n in range(plan.M):
            t_phys = n * dt_macro
            X, V = strang_flow(X, V, plan.alpha * plan.H, h, plan.M_micro, fs, efield, t_phys)
            if plan.beta != 0.0:
                X, V = strang_flow(X, V, -plan.beta * plan.H, -h, plan.M_micro, fs, efield, t_phys)
            if on_macro is not None:
                on_macro(n + 1, (n + 1) * dt_macro, _squeeze(X, single), _squeeze(V, single))
        n_rem = plan.remainder_steps
        if n_rem:
            X, V = strang_flow(X, V, plan.eps, plan.T_r / n_rem, n_rem, fs, efield,
                               plan.M * dt_macro)
    return _squeeze(X, single), _squeeze(V, single)


def _squeeze(A, single):
    return A[0].copy() if single else A
