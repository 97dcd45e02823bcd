"""Particle-in-cell layer for the Vlasov-Poisson system.

Charge is spread on a periodic mesh with tensor cubic B-splines, the Poisson
equation ``-lap(phi) = rho - mean(rho)`` is solved spectrally and E = -grad(phi)
is interpolated back with the same kernel. Particles are pushed with the
multi-revolution composition integrator in self-consistent mode: the field
is recomputed before every velocity kick.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from numba import njit
from scipy.integrate import cumulative_trapezoid

from .fields import ConfigurationError, FieldSet
from .mrc import MrcPlan, STRANG, strang_flow
from .rotation import PreconditionError

__all__ = [
    "Mesh",
    "ParticleEnsemble",
    "RingParams",
    "sample_initial",
    "bspline_weights",
    "deposit",
    "solve_poisson",
    "spectral_divergence",
    "interp_E",
    "self_consistent_field",
    "diagnostics",
    "Diagnostics",
    "vp_run",
    "write_snapshot",
    "read_snapshot",
    "DIAGNOSTIC_COLUMNS",
]

DIAGNOSTIC_COLUMNS = ("t", "kinetic", "field", "total", "rel_energy_error", "mu")


@dataclass(frozen=True)
class Mesh:
    """Periodic node mesh on the box ``[lower, upper)``."""

    lower: tuple = (-8.0, -8.0, 0.0)
    upper: tuple = (8.0, 8.0, 1.0)
    shape: tuple = (64, 64, 4)

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ConfigurationError("mesh needs at least 4 nodes per direction")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ConfigurationError("empty mesh box")

    @property
    def lengths(self):
        return np.subtract(self.upper, self.lower).astype(float)

    @property
    def spacing(self):
        return self.lengths / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self):
        return [self.lower[d] + self.spacing[d] * np.arange(self.shape[d]) for d in range(3)]

    def wrap(self, X):
        lo = np.asarray(self.lower, float)
        return lo + np.mod(X - lo, self.lengths)


@dataclass
class ParticleEnsemble:
    x: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def copy(self):
        return ParticleEnsemble(self.x.copy(), self.v.copy(), self.w.copy())


@dataclass(frozen=True)
class RingParams:
    """f0 = n0/(2 pi) (1 + eta cos(k theta)) exp(-5 (r - 5)^2) exp(-|v|^2 / 2).

    With ``unit_maxwellian`` the velocity factor is divided by (2 pi)^(3/2),
    i.e. n0/(2 pi) becomes the peak number density.
    """

    n0: float = 100.0
    eta: float = 0.05
    k: int = 4
    r_max: float = 8.0
    table: int = 10_000
    unit_maxwellian: bool = False


_BLOCK = 65536


def _radial_table(p: RingParams):
    r = np.linspace(0.0, p.r_max, p.table)
    cdf = cumulative_trapezoid(r * np.exp(-5.0 * (r - 5.0) ** 2), r, initial=0.0)
    return r, cdf


def ring_mass(p: RingParams, mesh: Mesh) -> float:
    """Total mass of f0 over the mesh box (angular perturbation integrates out)."""
    _, cdf = _radial_table(p)
    L3 = mesh.upper[2] - mesh.lower[2]
    velocity = 1.0 if p.unit_maxwellian else (2.0 * math.pi) ** 1.5
    return float(p.n0 * velocity * L3 * cdf[-1])


def sample_initial(params: RingParams, mesh: Mesh, n_particles: int, seed: int = 0,
                   quarter_symmetric: bool = False) -> ParticleEnsemble:
    """Deterministic sample of the ring distribution.

    Particles are drawn in fixed blocks, each from its own stream keyed by
    ``(seed, block)``, so the ensemble does not depend on how it is produced.
    With ``quarter_symmetric`` a quarter of the particles is drawn and copied
    under the three quarter turns about the x3 axis (positions and
    velocities), giving an exactly four-fold symmetric ensemble.
    """
    if n_particles < 1:
        raise ConfigurationError("need at least one particle")
    if not 0.0 <= params.eta < 1.0:
        raise ConfigurationError("eta must lie in [0, 1)")
    if quarter_symmetric:
        if n_particles % 4:
            raise ConfigurationError("a quarter-symmetric ensemble needs a multiple of 4 particles")
        base = sample_initial(params, mesh, n_particles // 4, seed)
        X, V = [base.x], [base.v]
        for _ in range(3):
            X.append(np.column_stack([-X[-1][:, 1], X[-1][:, 0], X[-1][:, 2]]))
            V.append(np.column_stack([-V[-1][:, 1], V[-1][:, 0], V[-1][:, 2]]))
        w = np.full(n_particles, ring_mass(params, mesh) / n_particles)
        return ParticleEnsemble(mesh.wrap(np.concatenate(X)), np.concatenate(V), w)
    r_tab, cdf = _radial_table(params)
    cdf = cdf / cdf[-1]
    X = np.empty((n_particles, 3))
    V = np.empty((n_particles, 3))
    for start in range(0, n_particles, _BLOCK):
        n = min(_BLOCK, n_particles - start)
        rng = np.random.default_rng([seed, start // _BLOCK])
        r = np.interp(rng.random(n), cdf, r_tab)
        theta = np.empty(n)
        todo = np.arange(n)
        while todo.size:
            cand = 2.0 * math.pi * rng.random(todo.size)
            ok = rng.random(todo.size) * (1.0 + params.eta) <= 1.0 + params.eta * np.cos(params.k * cand)
            theta[todo[ok]] = cand[ok]
            todo = todo[~ok]
        X[start:start + n, 0] = r * np.cos(theta)
        X[start:start + n, 1] = r * np.sin(theta)
        X[start:start + n, 2] = mesh.lower[2] + (mesh.upper[2] - mesh.lower[2]) * rng.random(n)
        V[start:start + n] = rng.standard_normal((n, 3))
    X = mesh.wrap(X)
    w = np.full(n_particles, ring_mass(params, mesh) / n_particles)
    return ParticleEnsemble(X, V, w)


@njit(cache=True)
def _weights1d(f, out):
    g = 1.0 - f
    out[0] = g * g * g / 6.0
    out[1] = (3.0 * f * f * f - 6.0 * f * f + 4.0) / 6.0
    out[2] = (-3.0 * f * f * f + 3.0 * f * f + 3.0 * f + 1.0) / 6.0
    out[3] = f * f * f / 6.0


def bspline_weights(f):
    """Cubic B-spline weights of the nodes ``i-1 .. i+2`` for offset f in [0, 1)."""
    out = np.empty(4)
    _weights1d(float(f), out)
    return out


@njit(cache=True)
def _locate(x, lo, h, n, idx, wts):
    xi = (x - lo) / h
    i = math.floor(xi)
    _weights1d(xi - i, wts)
    for a in range(4):
        idx[a] = (i - 1 + a) % n


@njit(cache=True)
def _deposit(X, w, lo, h, shape, rho):
    nx, ny, nz = shape[0], shape[1], shape[2]
    ix = np.empty(4, np.int64)
    iy = np.empty(4, np.int64)
    iz = np.empty(4, np.int64)
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for k in range(X.shape[0]):
        _locate(X[k, 0], lo[0], h[0], nx, ix, wx)
        _locate(X[k, 1], lo[1], h[1], ny, iy, wy)
        _locate(X[k, 2], lo[2], h[2], nz, iz, wz)
        for a in range(4):
            wa = w[k] * wx[a]
            for b in range(4):
                wab = wa * wy[b]
                for c in range(4):
                    rho[ix[a], iy[b], iz[c]] += wab * wz[c]


@njit(cache=True)
def _interp(E, X, lo, h, shape, out):
    nx, ny, nz = shape[0], shape[1], shape[2]
    ix = np.empty(4, np.int64)
    iy = np.empty(4, np.int64)
    iz = np.empty(4, np.int64)
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for k in range(X.shape[0]):
        _locate(X[k, 0], lo[0], h[0], nx, ix, wx)
        _locate(X[k, 1], lo[1], h[1], ny, iy, wy)
        _locate(X[k, 2], lo[2], h[2], nz, iz, wz)
        e0 = 0.0
        e1 = 0.0
        e2 = 0.0
        for a in range(4):
            for b in range(4):
                wab = wx[a] * wy[b]
                for c in range(4):
                    s = wab * wz[c]
                    e0 += s * E[ix[a], iy[b], iz[c], 0]
                    e1 += s * E[ix[a], iy[b], iz[c], 1]
                    e2 += s * E[ix[a], iy[b], iz[c], 2]
        out[k, 0] = e0
        out[k, 1] = e1
        out[k, 2] = e2


def _mesh_arrays(mesh: Mesh):
    return (np.asarray(mesh.lower, float), mesh.spacing.astype(float),
            np.asarray(mesh.shape, np.int64))


def deposit(ens: ParticleEnsemble, mesh: Mesh, neutralize: bool = True):
    """Charge density on the nodes; with ``neutralize`` the mesh mean is removed."""
    rho = np.zeros(mesh.shape)
    if len(ens):
        lo, h, shape = _mesh_arrays(mesh)
        _deposit(np.ascontiguousarray(ens.x, float), np.ascontiguousarray(ens.w, float),
                 lo, h, shape, rho)
    rho /= mesh.cell_volume
    if neutralize:
        rho -= rho.mean()
    return rho


def _wavenumbers(mesh: Mesh):
    ks = []
    for d in range(3):
        n = mesh.shape[d]
        k = 2.0 * math.pi * np.fft.fftfreq(n, mesh.spacing[d])
        # the Nyquist plane has no real derivative; it is dropped
        k_d = k.copy()
        if n % 2 == 0:
            k_d[n // 2] = 0.0
        ks.append((k, k_d))
    return ks


def _nyquist_mask(mesh: Mesh):
    mask = np.ones(mesh.shape, bool)
    for d in range(3):
        n = mesh.shape[d]
        if n % 2 == 0:
            sl = [slice(None)] * 3
            sl[d] = n // 2
            mask[tuple(sl)] = False
    return mask


def solve_poisson(rho, mesh: Mesh, tol: float = 1e-9):
    """Spectral solve of ``-lap(phi) = rho`` and ``E = -grad(phi)``.

    Returns ``(E, phi)`` with ``E`` shaped ``(nx, ny, nz, 3)``. Nyquist
    planes of rho are not representable by a real gradient and are filtered.
    """
    rho = np.asarray(rho, float)
    scale = max(1.0, float(np.abs(rho).max()))
    if abs(rho.mean()) > tol * scale:
        raise PreconditionError(f"rho is not neutral (mean {rho.mean():.3e})")
    ks = _wavenumbers(mesh)
    KX, KY, KZ = np.meshgrid(ks[0][0], ks[1][0], ks[2][0], indexing="ij")
    k2 = KX ** 2 + KY ** 2 + KZ ** 2
    rho_hat = np.fft.fftn(rho) * _nyquist_mask(mesh)
    k2[0, 0, 0] = 1.0
    phi_hat = rho_hat / k2
    phi_hat[0, 0, 0] = 0.0
    DX, DY, DZ = np.meshgrid(ks[0][1], ks[1][1], ks[2][1], indexing="ij")
    E = np.stack([np.real(np.fft.ifftn(-1j * D * phi_hat)) for D in (DX, DY, DZ)], axis=-1)
    return E, np.real(np.fft.ifftn(phi_hat))


def spectral_divergence(E, mesh: Mesh):
    ks = _wavenumbers(mesh)
    D = np.meshgrid(ks[0][1], ks[1][1], ks[2][1], indexing="ij")
    return np.real(np.fft.ifftn(sum(1j * D[d] * np.fft.fftn(E[..., d]) for d in range(3))))


def interp_E(E, X, mesh: Mesh):
    """Cubic B-spline interpolation of nodal E at positions ``X`` (n, 3)."""
    X = np.ascontiguousarray(np.atleast_2d(X), float)
    out = np.empty((X.shape[0], 3))
    lo, h, shape = _mesh_arrays(mesh)
    _interp(np.ascontiguousarray(E, float), X, lo, h, shape, out)
    return out


def self_consistent_field(mesh: Mesh, weights) -> Callable:
    """``efield(t, X)`` computing E from the particles at ``X`` themselves."""
    weights = np.asarray(weights, float)

    def efield(t, X):
        ens = ParticleEnsemble(X, X, weights)
        E, _ = solve_poisson(deposit(ens, mesh), mesh)
        return interp_E(E, X, mesh)

    return efield


@dataclass
class Diagnostics:
    t: float
    kinetic: float
    field: float
    total: float
    rel_energy_error: float
    mu: float
    rho2d: Optional[np.ndarray] = None

    def row(self):
        return [self.t, self.kinetic, self.field, self.total, self.rel_energy_error, self.mu]


def diagnostics(ens: ParticleEnsemble, mesh: Mesh, fs: FieldSet, t: float = 0.0,
                total0: Optional[float] = None, keep_rho: bool = True) -> Diagnostics:
    """Kinetic, field and total energy, the magnetic moment sum and the
    x3-averaged density."""
    if len(ens) == 0:
        return Diagnostics(t, 0.0, 0.0, 0.0, 0.0, 0.0,
                           np.zeros(mesh.shape[:2]) if keep_rho else None)
    kinetic = 0.5 * float(np.sum(ens.w * np.einsum("ij,ij->i", ens.v, ens.v)))
    rho_raw = deposit(ens, mesh, neutralize=False)
    rho = rho_raw - rho_raw.mean()
    E, _ = solve_poisson(rho, mesh)
    fld = 0.5 * float(np.sum(E * E)) * mesh.cell_volume
    B = fs.eval_B(ens.x)
    b = np.linalg.norm(B, axis=1)
    vpar = np.einsum("ij,ij->i", B, ens.v) / b
    vperp2 = np.einsum("ij,ij->i", ens.v, ens.v) - vpar ** 2
    mu = float(np.sum(ens.w * np.maximum(vperp2, 0.0) / b))
    total = kinetic + fld
    if total0 is None:
        rel = 0.0
    else:
        # absolute error when the reference energy vanishes
        rel = abs(total - total0) / (abs(total0) if total0 != 0 else 1.0)
    return Diagnostics(t, kinetic, fld, total, rel, mu,
                       rho_raw.mean(axis=2) if keep_rho else None)


def write_snapshot(path, rho2d, t: float, eps: float, mesh: Mesh):
    """CSV grid dump: ``#``-prefixed header with dimensions, time and eps."""
    nx, ny = rho2d.shape
    header = (f"nx={nx} ny={ny} nz={mesh.shape[2]} t={t!r} eps={eps!r} "
              f"lower={mesh.lower[0]!r},{mesh.lower[1]!r} upper={mesh.upper[0]!r},{mesh.upper[1]!r}\n"
              "rows: x1 index, columns: x2 index, values: x3-averaged density")
    np.savetxt(path, rho2d, delimiter=",", header=header, fmt="%.10e")


def read_snapshot(path):
    """Return ``(meta, rho2d)`` from :func:`write_snapshot` output."""
    with open(path) as fh:
        first = fh.readline().lstrip("#").split()
    meta = {}
    for item in first:
        key, _, value = item.partition("=")
        meta[key] = value
    rho = np.loadtxt(path, delimiter=",", ndmin=2)
    return meta, rho


def _wrap_inplace(X, mesh):
    X[:] = mesh.wrap(X)


def vp_run(ens: ParticleEnsemble, mesh: Mesh, fs: FieldSet, plan: MrcPlan,
           output_times: Iterable[float] = (), out_dir: Optional[str] = None,
           diag_every: int = 1, on_diag: Optional[Callable] = None):
    """Self-consistent MRC run from t = 0 to ``plan.T_f``.

    Diagnostics are taken every ``diag_every`` macro steps (and at the end);
    density snapshots are written at the macro step closest to each requested
    output time when ``out_dir`` is given. Returns the final ensemble and the
    list of :class:`Diagnostics`.
    """
    if not fs.constant_intensity:
        raise ConfigurationError("the Vlasov-Poisson driver needs a unit-intensity field")
    ens = ens.copy()
    efield = self_consistent_field(mesh, ens.w)
    d0 = diagnostics(ens, mesh, fs, 0.0)
    total0 = d0.total
    d0.rel_energy_error = 0.0
    history = [d0]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    dt_macro = plan.macro_dt
    n_macro = plan.fallback_steps if plan.mode == STRANG else plan.M
    wanted = {}
    for T_out in output_times:
        wanted.setdefault(int(round(T_out / dt_macro)), T_out)

    def emit(n, t, rho2d):
        if out_dir is not None and n in wanted:
            write_snapshot(os.path.join(out_dir, f"rho_{n:06d}.csv"), rho2d, t, plan.eps, mesh)

    emit(0, 0.0, d0.rho2d)
    if on_diag is not None:
        on_diag(d0)
    X, V = ens.x, ens.v
    for n in range(n_macro):
        t = n * dt_macro
        if plan.mode == STRANG:
            h = plan.T_f / plan.eps / n_macro
            X, V = strang_flow(X, V, plan.eps, h, 1, fs, efield, t)
        else:
            h = 2.0 * math.pi / plan.M_micro
            X, V = strang_flow(X, V, plan.alpha * plan.H, h, plan.M_micro, fs, efield, t)
            if plan.beta != 0.0:
                X, V = strang_flow(X, V, -plan.beta * plan.H, -h, plan.M_micro, fs, efield, t)
        _wrap_inplace(X, mesh)
        last = n == n_macro - 1
        if (n + 1) % diag_every == 0 or last or (n + 1) in wanted:
            ens.x, ens.v = X, V
            d = diagnostics(ens, mesh, fs, (n + 1) * dt_macro, total0)
            history.append(d)
            emit(n + 1, d.t, d.rho2d)
            if on_diag is not None:
                on_diag(d)
    if plan.mode != STRANG and plan.remainder_steps:
        k = plan.remainder_steps
        X, V = strang_flow(X, V, plan.eps, plan.T_r / k, k, fs, efield, n_macro * dt_macro)
        _wrap_inplace(X, mesh)
        ens.x, ens.v = X, V
        d = diagnostics(ens, mesh, fs, plan.T_f, total0)
        history.append(d)
        if on_diag is not None:
            on_diag(d)
    ens.x, ens.v = X, V
    return ens, history


def write_diagnostics_csv(path, history):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(DIAGNOSTIC_COLUMNS)
        for d in history:
            wr.writerow([f"{v:.12e}" for v in d.row()])


def rotate_quarter(rho2d):
    """Density rotated by 90 degrees about the box centre.

    Valid for a square node grid symmetric about the origin (``lower = -upper``):
    node i sits at ``-L/2 + i h`` and its mirror image at index ``(-i) % n``.
    """
    n = rho2d.shape[0]
    if rho2d.shape[1] != n:
        raise ConfigurationError("quarter turns need a square grid")
    i = np.arange(n)
    return rho2d[i[None, :], (-i[:, None]) % n]


def fourfold_asymmetry(rho2d) -> float:
    """||rho - R rho|| / ||rho - mean(rho)|| for a quarter turn R."""
    rho2d = np.asarray(rho2d, float)
    dev = np.linalg.norm(rho2d - rho2d.mean())
    if dev == 0.0:
        return 0.0
    return float(np.linalg.norm(rho2d - rotate_quarter(rho2d)) / dev)


__all__ += ["write_diagnostics_csv", "rotate_quarter", "fourfold_asymmetry"]
__all__.append("ring_mass")
