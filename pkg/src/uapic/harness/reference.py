"""Fine-step reference solvers for the unfiltered characteristics

    dx/dt = v,    dv/dt = E(t, x) + v x B(x) / eps.

Used only as oracles. ``rk4_reference`` is the classical fourth order
method; ``reference_solution`` uses the 12-stage, eighth order Dormand-Prince
tableau with a fixed step resolving the gyro-period, which is what the
accuracy studies at small eps need (RK4 phase error grows like T/eps * (h/eps)^4).
"""
from __future__ import annotations

import math
import warnings

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dop

from ..fields import FieldSet, field_point

__all__ = ["rk4_reference", "reference_solution", "OracleWarning"]

_A = np.ascontiguousarray(_dop.A[:_dop.N_STAGES, :_dop.N_STAGES])
_B = np.ascontiguousarray(_dop.B)
_C = np.ascontiguousarray(_dop.C[:_dop.N_STAGES])


class OracleWarning(RuntimeWarning):
    pass


@njit(cache=True)
def _rhs(kind, params, inv_eps, t, u, out, E, B, G):
    field_point(kind, params, t, u[:3], E, B, G)
    v = u[3:]
    out[0] = v[0]
    out[1] = v[1]
    out[2] = v[2]
    out[3] = E[0] + inv_eps * (v[1] * B[2] - v[2] * B[1])
    out[4] = E[1] + inv_eps * (v[2] * B[0] - v[0] * B[2])
    out[5] = E[2] + inv_eps * (v[0] * B[1] - v[1] * B[0])


@njit(cache=True)
def _integrate(kind, params, eps, u0, h, nsteps, stride, A, Bw, C, order4):
    E = np.empty(3)
    B = np.empty(3)
    G = np.empty((3, 3))
    inv_eps = 1.0 / eps
    s = Bw.shape[0]
    K = np.empty((s, 6))
    u = u0.copy()
    comp = np.zeros(6)  # Kahan compensation for the state update
    tmp = np.empty(6)
    nrec = nsteps // stride + 1
    rec = np.empty((nrec, 6))
    rec[0] = u
    j = 1
    for n in range(nsteps):
        t = n * h
        if order4:
            _rhs(kind, params, inv_eps, t, u, K[0], E, B, G)
            for i in range(6):
                tmp[i] = u[i] + 0.5 * h * K[0, i]
            _rhs(kind, params, inv_eps, t + 0.5 * h, tmp, K[1], E, B, G)
            for i in range(6):
                tmp[i] = u[i] + 0.5 * h * K[1, i]
            _rhs(kind, params, inv_eps, t + 0.5 * h, tmp, K[2], E, B, G)
            for i in range(6):
                tmp[i] = u[i] + h * K[2, i]
            _rhs(kind, params, inv_eps, t + h, tmp, K[3], E, B, G)
            for i in range(6):
                inc = h / 6.0 * (K[0, i] + 2.0 * K[1, i] + 2.0 * K[2, i] + K[3, i]) - comp[i]
                new = u[i] + inc
                comp[i] = (new - u[i]) - inc
                u[i] = new
        else:
            for st in range(s):
                for i in range(6):
                    acc = 0.0
                    for q in range(st):
                        acc += A[st, q] * K[q, i]
                    tmp[i] = u[i] + h * acc
                _rhs(kind, params, inv_eps, t + C[st] * h, tmp, K[st], E, B, G)
            for i in range(6):
                acc = 0.0
                for st in range(s):
                    acc += Bw[st] * K[st, i]
                inc = h * acc - comp[i]
                new = u[i] + inc
                comp[i] = (new - u[i]) - inc
                u[i] = new
        if (n + 1) % stride == 0:
            rec[j] = u
            j += 1
    return rec


def _python_rk4(fs, efield, eps, u0, h, nsteps, stride):
    def f(t, u):
        x = u[:3]
        v = u[3:]
        E = efield(t, x[None])[0] if efield is not None else fs.eval_E(t, x)
        return np.concatenate([v, E + np.cross(v, fs.eval_B(x)) / eps])

    u = np.array(u0, dtype=float)
    rec = [u.copy()]
    for n in range(nsteps):
        t = n * h
        k1 = f(t, u)
        k2 = f(t + h / 2, u + h / 2 * k1)
        k3 = f(t + h / 2, u + h / 2 * k2)
        k4 = f(t + h, u + h * k3)
        u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if (n + 1) % stride == 0:
            rec.append(u.copy())
    return np.array(rec)


def _run(x0, v0, fs, eps, T, h, order4, record_every, efield):
    nsteps = max(1, int(math.ceil(T / h - 1e-9)))
    h = T / nsteps
    stride = record_every or nsteps
    u0 = np.concatenate([np.asarray(x0, float), np.asarray(v0, float)])
    if fs.compiled and efield is None:
        rec = _integrate(fs.kind, fs.params, float(eps), u0, h, nsteps, stride,
                         _A, _B, _C, order4)
    else:
        if not order4:
            raise NotImplementedError("high-order oracle needs a compiled field")
        rec = _python_rk4(fs, efield, eps, u0, h, nsteps, stride)
    return rec, h


def rk4_reference(x0, v0, fs: FieldSet, eps: float, T: float, dt: float = 1e-5,
                  efield=None, record_every: int | None = None):
    """Classical RK4 with step ``dt`` (rounded so that T is hit exactly).

    Returns ``(x(T), v(T))`` or, with ``record_every``, the array of states
    every that many steps.
    """
    if T == 0:
        return np.array(x0, float), np.array(v0, float)
    if dt > eps / 10:
        warnings.warn(f"RK4 step {dt:g} does not resolve the gyro-period 2*pi*{eps:g}",
                      OracleWarning, stacklevel=2)
    rec, _ = _run(x0, v0, fs, eps, T, dt, True, record_every, efield)
    if record_every:
        return rec
    return rec[-1, :3].copy(), rec[-1, 3:].copy()


def reference_solution(x0, v0, fs: FieldSet, eps: float, T: float, *,
                       steps_per_radian: float = 16.0, max_dt: float = 2e-3,
                       record_every: int | None = None, nsteps: int | None = None):
    """Eighth order fixed-step oracle. The step is ``min(max_dt, eps / (b_max *
    steps_per_radian))`` unless ``nsteps`` is given; returns like
    :func:`rk4_reference`."""
    if nsteps is None:
        h = min(max_dt, eps / (fs.C_b * steps_per_radian))
    else:
        h = T / nsteps
    rec, _ = _run(x0, v0, fs, eps, T, h, False, record_every, None)
    if record_every:
        return rec
    return rec[-1, :3].copy(), rec[-1, 3:].copy()
