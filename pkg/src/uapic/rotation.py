"""Gyro-rotation kernel: Rodrigues rotations, the velocity filter, the
filtered vector field F = (F_x, F_y) and the periodic averaging operators
on the fast-phase grid.

The fast phase is always handled modulo 2*pi (see :func:`reduce_phase`).
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .fields import ConfigurationError, FieldSet, field_point

__all__ = [
    "PreconditionError",
    "TauGrid",
    "rodrigues_rotate",
    "filter_velocity",
    "unfilter_velocity",
    "eval_F",
    "filtered_field",
    "normalize_fields",
    "pi_average",
    "a_operator",
    "reduce_phase",
]

UNIT_TOL = 1e-10


class PreconditionError(ValueError):
    """An input violates a documented precondition (e.g. non-unit B)."""


# Cody-Waite split of 2*pi: _TWO_PI_HI has 24 significant bits so k * HI is
# exact for k < 2**29.
_TWO_PI_HI = float(np.float32(6.283185307179586))
_TWO_PI_MID = 6.283185307179586 - _TWO_PI_HI
_TWO_PI_LO = 2.4492935982947064e-16


@njit(cache=True)
def reduce_phase(t: float, eps: float) -> float:
    """Return ``(t / eps) mod 2*pi`` in ``[0, 2*pi)``."""
    theta = t / eps
    k = math.floor(theta / 6.283185307179586)
    r = (theta - k * _TWO_PI_HI) - k * _TWO_PI_MID - k * _TWO_PI_LO
    while r < 0.0:
        r += 6.283185307179586
    while r >= 6.283185307179586:
        r -= 6.283185307179586
    return r


def _check_unit(B, tol=UNIT_TOL):
    nb = np.linalg.norm(B, axis=-1)
    if np.any(np.abs(nb - 1.0) > tol):
        raise PreconditionError(f"magnetic field is not unit length (|B| = {np.max(nb)!r})")


def rodrigues_rotate(v, B, theta):
    """Rotate ``v`` by ``theta`` about the unit axis ``B`` (right-handed).

    ``cos(theta) v + (1 - cos(theta)) (B.v) B - sin(theta) v x B``
    """
    v = np.asarray(v, dtype=float)
    B = np.asarray(B, dtype=float)
    _check_unit(B)
    c = np.cos(theta)[..., None] if np.ndim(theta) else math.cos(theta)
    s = np.sin(theta)[..., None] if np.ndim(theta) else math.sin(theta)
    bv = np.sum(B * v, axis=-1, keepdims=True)
    return c * v + (1.0 - c) * bv * B - s * np.cross(v, B)


def filter_velocity(tau, x, v, fs: FieldSet):
    """Filtered velocity y: removes the gyration accumulated over phase ``tau``."""
    B = fs.eval_B(x)
    return rodrigues_rotate(v, B, tau)


def unfilter_velocity(tau, x, y, fs: FieldSet):
    """Inverse of :func:`filter_velocity`."""
    B = fs.eval_B(x)
    return rodrigues_rotate(y, B, -np.asarray(tau) if np.ndim(tau) else -tau)


@njit(cache=True)
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True)
def _F_point(tau, y, E, B, G, scale, Fx, Fy):
    c = math.cos(tau)
    s = math.sin(tau)
    c2 = math.cos(2.0 * tau)
    s2 = math.sin(2.0 * tau)
    yxB = np.empty(3)
    _cross(y, B, yxB)
    ExB = np.empty(3)
    _cross(E, B, ExB)
    By = B[0] * y[0] + B[1] * y[1] + B[2] * y[2]
    BE = B[0] * E[0] + B[1] * E[1] + B[2] * E[2]
    for i in range(3):
        Fx[i] = scale * (c * y[i] + (1.0 - c) * By * B[i] + s * yxB[i])
    # d = dB/dt along the motion
    d = np.empty(3)
    for i in range(3):
        d[i] = G[i, 0] * Fx[0] + G[i, 1] * Fx[1] + G[i, 2] * Fx[2]
    dy = d[0] * y[0] + d[1] * y[1] + d[2] * y[2]
    dB = d[0] * B[0] + d[1] * B[1] + d[2] * B[2]
    dyxB = d[0] * yxB[0] + d[1] * yxB[1] + d[2] * yxB[2]
    Bd_yxB = B[0] * yxB[0] + B[1] * yxB[1] + B[2] * yxB[2]
    # q(z) = z x d
    qy = np.empty(3)
    _cross(y, d, qy)
    qB = np.empty(3)
    _cross(B, d, qB)
    qyxB = np.empty(3)
    _cross(yxB, d, qyxB)
    cp_y = 0.5 * (2.0 * c - c2 - 1.0)
    cp_b = 0.5 * (3.0 - 4.0 * c + c2)
    cp_x = 0.5 * (2.0 * s - s2)
    cq_y = -0.5 * s2
    cq_b = -0.5 * (2.0 * s - s2)
    cq_x = -0.5 * (1.0 - c2)
    for i in range(3):
        # p(z) = (d.z) B + (B.z) d
        py = dy * B[i] + By * d[i]
        pb = By * (dB * B[i] + d[i])
        px = dyxB * B[i] + Bd_yxB * d[i]
        Fy[i] = (c * E[i] + (1.0 - c) * BE * B[i] - s * ExB[i]
                 + cq_y * qy[i] + cq_b * By * qB[i] + cq_x * qyxB[i]
                 + cp_y * py + cp_b * pb + cp_x * px)


@njit(cache=True)
def filtered_field(tau, Y, E, B, G, scale):
    """Batched F_x, F_y for ``tau[n]``, ``Y[n,3]``, ``E[n,3]``, ``B[n,3]``,
    ``G[n,3,3]``; ``scale[n]`` multiplies the position velocity (1 / |B| in
    reparametrised time, 1 otherwise)."""
    n = Y.shape[0]
    Fx = np.empty((n, 3))
    Fy = np.empty((n, 3))
    for k in range(n):
        _F_point(tau[k], Y[k], E[k], B[k], G[k], scale[k], Fx[k], Fy[k])
    return Fx, Fy


@njit(cache=True)
def normalize_fields(E, B, G):
    """Scale to unit intensity: returns (E/b, B/b, grad(B/b), 1/b)."""
    n = B.shape[0]
    En = np.empty_like(E)
    Bn = np.empty_like(B)
    Gn = np.empty_like(G)
    inv_b = np.empty(n)
    for k in range(n):
        b = math.sqrt(B[k, 0] ** 2 + B[k, 1] ** 2 + B[k, 2] ** 2)
        ib = 1.0 / b
        inv_b[k] = ib
        for i in range(3):
            En[k, i] = E[k, i] * ib
            Bn[k, i] = B[k, i] * ib
        for j in range(3):
            bg = B[k, 0] * G[k, 0, j] + B[k, 1] * G[k, 1, j] + B[k, 2] * G[k, 2, j]
            for i in range(3):
                Gn[k, i, j] = G[k, i, j] * ib - B[k, i] * bg * ib * ib * ib
    return En, Bn, Gn, inv_b


def eval_F(tau, x, y, E, fs: FieldSet):
    """Filtered vector field at phase ``tau`` for a constant-intensity field.

    ``E`` is supplied by the caller (external or frozen self-consistent).
    Accepts single points or ``(n, 3)`` batches.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    Ev = np.atleast_2d(np.asarray(E, dtype=float))
    _, B, G, _ = fs._batch(0.0, X)
    _check_unit(B)
    taus = np.broadcast_to(np.asarray(tau, dtype=float), (X.shape[0],)).copy()
    Fx, Fy = filtered_field(taus, Y, Ev, B, G, np.ones(X.shape[0]))
    if single:
        return Fx[0], Fy[0]
    return Fx, Fy


class TauGrid:
    """Uniform grid of ``n`` fast-phase nodes on [0, 2*pi) and its spectral
    operators. ``n`` must be an even power of two."""

    def __init__(self, n: int):
        n = int(n)
        if n < 2 or n % 2 or (n & (n - 1)):
            raise ConfigurationError(f"N_tau must be an even power of two, got {n}")
        self.n = n
        self.tau = 2.0 * np.pi * np.arange(n) / n
        self.modes = np.fft.fftfreq(n, 1.0 / n)  # l = 0..n/2-1, -n/2..-1
        inv = np.zeros(n, dtype=complex)
        resolved = (self.modes != 0) & (self.modes != -n // 2)
        inv[resolved] = 1.0 / (1j * self.modes[resolved])
        # Nyquist mode has no antiderivative visible on the grid
        self.inv_il = inv

    def __repr__(self):
        return f"TauGrid({self.n})"

    def coeffs(self, samples):
        """Fourier coefficients c_l with samples = sum_l c_l exp(i l tau)."""
        return np.fft.fft(samples, axis=0) / self.n

    def grid(self, coeffs):
        return np.real(np.fft.ifft(coeffs, axis=0)) * self.n

    def phases(self, tau):
        return np.exp(1j * self.modes * tau)

    def eval_at(self, coeffs, tau):
        """Evaluate the real trigonometric series at an arbitrary phase."""
        return np.real(self.phases(tau) @ coeffs)

    def antiderivative_coeffs(self, samples):
        c = self.coeffs(samples)
        return c * self.inv_il.reshape((-1,) + (1,) * (c.ndim - 1))


def _grid_for(samples) -> TauGrid:
    n = np.shape(samples)[0]
    if n % 2:
        raise ConfigurationError(f"odd number of phase samples: {n}")
    return TauGrid(n)


def pi_average(samples):
    """Average over the fast phase (mean of the periodic samples)."""
    _grid_for(samples)
    return np.mean(samples, axis=0)


def a_operator(samples):
    """Zero-mean antiderivative in the fast phase, returned on the grid."""
    g = _grid_for(samples)
    return g.grid(g.antiderivative_coeffs(np.asarray(samples, dtype=float)))


@njit(cache=True)
def _F_compiled(kind, params, tau, U, t, reparam):
    n = U.shape[0]
    d = U.shape[1]
    out = np.empty((n, d))
    E = np.empty(3)
    B = np.empty(3)
    G = np.empty((3, 3))
    Fx = np.empty(3)
    Fy = np.empty(3)
    for k in range(n):
        tk = U[k, 6] if reparam else t
        field_point(kind, params, tk, U[k, :3], E, B, G)
        if reparam:
            b = math.sqrt(B[0] ** 2 + B[1] ** 2 + B[2] ** 2)
            ib = 1.0 / b
            bg = np.empty(3)
            for j in range(3):
                bg[j] = B[0] * G[0, j] + B[1] * G[1, j] + B[2] * G[2, j]
            for j in range(3):
                for i in range(3):
                    G[i, j] = G[i, j] * ib - B[i] * bg[j] * ib * ib * ib
            for i in range(3):
                E[i] *= ib
                B[i] *= ib
            _F_point(tau[k], U[k, 3:6], E, B, G, ib, Fx, Fy)
            out[k, 6] = ib
        else:
            _F_point(tau[k], U[k, 3:6], E, B, G, 1.0, Fx, Fy)
        for i in range(3):
            out[k, i] = Fx[i]
            out[k, 3 + i] = Fy[i]
    return out


class FilteredSystem:
    """The filtered characteristics ``du/dt = F(t / eps, u)``.

    With ``reparam=False`` (unit-intensity fields) ``u = (x, y)``. With
    ``reparam=True`` the unknown is ``(x, y, t)`` in the per-particle time
    ``s`` with ``ds/dt = |B(x)|``: fields are normalised by ``b = |B|``, the
    position velocity is divided by ``b`` and ``dt/ds = 1 / b``.

    ``efield(t, X)`` optionally replaces the field set's external E.
    """

    def __init__(self, fs: FieldSet, efield=None, reparam: bool = False):
        if not reparam and not fs.constant_intensity:
            raise ConfigurationError(
                f"{fs.name} has varying intensity; use the reparametrised system")
        if reparam and efield is not None:
            raise ConfigurationError("reparametrised runs take the external E only")
        self.fs = fs
        self.efield = efield
        self.reparam = reparam
        self.dim = 7 if reparam else 6

    def F(self, tau, U, t: float = 0.0):
        """Evaluate F at phases ``tau[n]`` and states ``U[n, dim]``."""
        U = np.ascontiguousarray(U, dtype=float)
        tau = np.ascontiguousarray(np.broadcast_to(tau, (U.shape[0],)), dtype=float)
        fs = self.fs
        if fs.compiled and self.efield is None:
            return _F_compiled(fs.kind, fs.params, tau, U, float(t), self.reparam)
        if self.reparam:
            E, B, G, _ = fs._batch(0.0, U[:, :3])
            if fs.time_dependent_E:
                E = np.stack([fs.eval_E(tk, xk) for tk, xk in zip(U[:, 6], U[:, :3])])
            En, Bn, Gn, ib = normalize_fields(E, B, G)
            Fx, Fy = filtered_field(tau, U[:, 3:6].copy(), En, Bn, Gn, ib)
            return np.concatenate([Fx, Fy, ib[:, None]], axis=1)
        _, B, G, _ = fs._batch(0.0, U[:, :3])
        if self.efield is None:
            E = fs.eval_E(t, U[:, :3])
        else:
            E = np.asarray(self.efield(t, U[:, :3]), dtype=float)
        Fx, Fy = filtered_field(tau, U[:, 3:6].copy(), np.ascontiguousarray(E), B, G,
                                np.ones(U.shape[0]))
        return np.concatenate([Fx, Fy], axis=1)

    def unit_field(self, x):
        """Unit field direction at ``x`` (normalised in reparametrised mode)."""
        B = self.fs.eval_B(x)
        if self.reparam:
            B = B / np.linalg.norm(B, axis=-1, keepdims=True)
        return B

    def initial_state(self, x0, v0):
        """Filtered state at phase 0: y(0) = v(0) (and t = 0)."""
        u = np.concatenate([np.asarray(x0, float), np.asarray(v0, float)])
        return np.append(u, 0.0) if self.reparam else u

    def physical(self, phase, u):
        """Map a filtered state at fast phase ``phase`` back to ``(x, v)``."""
        x = u[:3]
        B = self.unit_field(x)
        return x.copy(), rodrigues_rotate(u[3:6], B, -phase)


__all__.append("FilteredSystem")


@njit(cache=True)
def dft_matrices(n):
    """Forward (with the 1/n) and inverse DFT matrices in numpy fft ordering."""
    W = np.empty((n, n), dtype=np.complex128)
    Winv = np.empty((n, n), dtype=np.complex128)
    for a in range(n):
        l = a if a < n // 2 else a - n
        for j in range(n):
            ang = 2.0 * math.pi * l * j / n
            W[a, j] = complex(math.cos(ang), -math.sin(ang)) / n
            Winv[j, a] = complex(math.cos(ang), math.sin(ang))
    return W, Winv


@njit(cache=True)
def _dft(W, U, out):
    n, d = U.shape
    for a in range(n):
        for k in range(d):
            acc = 0j
            for j in range(n):
                acc += W[a, j] * U[j, k]
            out[a, k] = acc


@njit(cache=True)
def _idft_real(Winv, C, out):
    n, d = C.shape
    for j in range(n):
        for k in range(d):
            acc = 0.0
            for a in range(n):
                z = Winv[j, a] * C[a, k]
                acc += z.real
            out[j, k] = acc


@njit(cache=True)
def _series_at(modes, C, phase, out):
    n, d = C.shape
    for k in range(d):
        out[k] = 0.0
    for a in range(n):
        ang = modes[a] * phase
        c = math.cos(ang)
        s = math.sin(ang)
        for k in range(d):
            out[k] += C[a, k].real * c - C[a, k].imag * s
