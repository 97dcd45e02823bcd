"""Leading-order averaged (limit) model for unit-intensity magnetic fields.

At stroboscopic times the characteristics follow

    dx/dt = (B.v) B,        dv/dt = B_v(x, v, E),

which is what :func:`eval_averaged` evaluates. :func:`averaged_by_quadrature`
computes the same average directly from the gyration flow and serves as an
independent check.
"""
from __future__ import annotations

import math

import numpy as np

from .fields import FieldSet
from .rotation import PreconditionError, _check_unit

__all__ = ["eval_averaged", "averaged_by_quadrature", "integrate_limit", "moment_matrix"]


def _cross_cols(v, G):
    """Columns v x dB/dx_i, batched: v (n,3), G (n,3,3) -> (n,3,3)."""
    return np.cross(v[:, :, None], G, axisa=1, axisb=1, axisc=1)


def _skew(B):
    """Matrix of w -> B x w."""
    n = B.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -B[:, 2]
    S[:, 0, 2] = B[:, 1]
    S[:, 1, 0] = B[:, 2]
    S[:, 1, 2] = -B[:, 0]
    S[:, 2, 0] = -B[:, 1]
    S[:, 2, 1] = B[:, 0]
    return S


def moment_matrix(v, B, G):
    """M = (B.v) grad B + B (v^T grad B)."""
    Bv = np.einsum("ni,ni->n", B, v)
    vG = np.einsum("ni,nij->nj", v, G)
    return Bv[:, None, None] * G + B[:, :, None] * vG[:, None, :]


def _averaged(v, E, B, G):
    Bv = np.einsum("ni,ni->n", B, v)
    M = moment_matrix(v, B, G)
    VxG = _cross_cols(v, G)
    vxB = np.cross(v, B)
    BvB = Bv[:, None] * B
    mv = lambda A, w: np.einsum("nij,nj->ni", A, w)  # noqa: E731
    inner = E - 0.5 * mv(VxG, vxB) + mv(M, v) - 2.5 * mv(M, BvB)
    drift_v = (
        np.einsum("ni,ni->n", B, inner)[:, None] * B
        - 0.5 * mv(M, v - 2.0 * BvB)
        - 0.5 * np.cross(B, mv(M, vxB) + mv(VxG, BvB))
    )
    return BvB, drift_v


def eval_averaged(x, v, E, fs: FieldSet):
    """Averaged vector field ``(drift_x, drift_v)``; batched or single point."""
    if not fs.constant_intensity:
        raise PreconditionError("the averaged model needs a unit-intensity field")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    V = np.atleast_2d(np.asarray(v, dtype=float))
    Ev = np.broadcast_to(np.atleast_2d(np.asarray(E, dtype=float)), V.shape)
    _, B, G, _ = fs._batch(0.0, X)
    _check_unit(B)
    dx, dv = _averaged(V, Ev, B, G)
    if single:
        return dx[0], dv[0]
    return dx, dv


def averaged_by_quadrature(x, v, E, fs: FieldSet, n_tau: int = 512):
    """Phase average of (D Phi_tau)^-1 K(Phi_tau) by the rectangle rule.

    Phi_tau rotates v by the gyration flow; its Jacobian is block lower
    triangular, so only the 3x3 velocity block N2 is inverted.
    """
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    E = np.asarray(E, float)
    _, B, G, _ = fs.eval_all(0.0, x)
    tau = 2.0 * math.pi * np.arange(n_tau) / n_tau
    c = np.cos(tau)[:, None]
    s = np.sin(tau)[:, None]
    Bv = B @ v
    Rv = c * v + s * np.cross(v, B) + (1 - c) * Bv * B
    Gv = G.T @ v                                  # (G[:, i] . v)_i
    vxG = np.cross(v, G.T)                        # row i: v x dB/dx_i
    # N1[t, :, i] = s vxG_i + (1 - c) ((G_i . v) B + (B . v) G_i)
    N1 = (s[:, :, None] * vxG.T[None]
          + (1 - c)[:, :, None] * (np.outer(B, Gv)[None] + Bv * G[None]))
    N2 = (c[:, :, None] * np.eye(3) - s[:, :, None] * _skew(B[None])
          + (1 - c)[:, :, None] * np.outer(B, B)[None])
    rhs = E - np.einsum("tij,tj->ti", N1, Rv)
    dv = np.linalg.solve(N2, rhs[:, :, None])[:, :, 0]
    return Rv.mean(axis=0), dv.mean(axis=0)


def integrate_limit(x0, v0, fs: FieldSet, T: float, dt: float, efield=None,
                    record: bool = False):
    """RK4 on the averaged characteristics.

    ``efield(t, X)`` returns E at positions ``X`` (n, 3); defaults to the
    field set's own E. Works for one particle or an ensemble. Returns the
    final ``(x, v)`` or, with ``record``, the array of states ``(steps+1, n, 6)``.
    """
    x0 = np.asarray(x0, float)
    single = x0.ndim == 1
    u = np.concatenate([np.atleast_2d(x0), np.atleast_2d(np.asarray(v0, float))], axis=1)
    if efield is None:
        efield = fs.eval_E
    traj = [u.copy()] if record else None
    if T > 0:
        n = max(1, int(math.ceil(T / dt - 1e-9)))
        h = T / n

        def f(t, w):
            dx, dv = eval_averaged(w[:, :3], w[:, 3:], efield(t, w[:, :3]), fs)
            return np.concatenate([dx, dv], axis=1)

        for k in range(n):
            t = k * h
            k1 = f(t, u)
            k2 = f(t + h / 2, u + h / 2 * k1)
            k3 = f(t + h / 2, u + h / 2 * k2)
            k4 = f(t + h, u + h * k3)
            u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if record:
                traj.append(u.copy())
    if record:
        out = np.array(traj)
        return out[:, 0] if single else out
    if single:
        return u[0, :3].copy(), u[0, 3:].copy()
    return u[:, :3].copy(), u[:, 3:].copy()
