"""Analytic electromagnetic field catalog.

Every integrator in the package talks to fields through :class:`FieldSet`.
Catalog fields are evaluated by compiled point kernels (so the reference
solver and the particle pushers can call them from inside numba loops);
custom fields wrap user supplied, vectorised numpy callables.

Array conventions: positions are ``(..., 3)`` arrays and the gradient of B is
returned as ``(..., 3, 3)`` with ``G[..., :, i] = dB/dx_i`` so that
``G @ w`` is the directional derivative of B along ``w``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit
from scipy.optimize import minimize

__all__ = [
    "FieldSet",
    "FieldCatalogEntry",
    "ConfigurationError",
    "make_field",
    "eval_all",
    "EXAMPLE1",
    "EXAMPLE2",
    "SCREW_PINCH",
    "UNIFORM_BZ",
]


class ConfigurationError(ValueError):
    """Raised for invalid field / scheme configuration."""


# kernel ids understood by ``field_point``
EXAMPLE1 = 0
EXAMPLE2 = 1
SCREW_PINCH = 2
UNIFORM_BZ = 3


@njit(cache=True)
def field_point(kind, params, t, x, E, B, G):
    """Fill E, B, G for one point and return the potential phi(x).

    ``G[:, i]`` holds dB/dx_i. Returns nan when no potential exists.
    """
    x1 = x[0]
    x2 = x[1]
    x3 = x[2]
    G[:, :] = 0.0
    if kind == EXAMPLE1 or kind == EXAMPLE2:
        s1h = math.sin(0.5 * x1)
        c1h = math.cos(0.5 * x1)
        s2 = math.sin(x2)
        c2 = math.cos(x2)
        s3 = math.sin(x3)
        c3 = math.cos(x3)
        E[0] = 0.5 * c1h * s2 * s3
        E[1] = s1h * c2 * s3
        E[2] = s1h * s2 * c3
        phi = -s1h * s2 * s3
        if kind == EXAMPLE1:
            sp = math.sin(x1 + x2)
            cp = math.cos(x1 + x2)
            B[0] = sp
            B[1] = cp * s3
            B[2] = cp * c3
            # d/dx1 and d/dx2 coincide
            G[0, 0] = cp
            G[1, 0] = -sp * s3
            G[2, 0] = -sp * c3
            G[0, 1] = cp
            G[1, 1] = -sp * s3
            G[2, 1] = -sp * c3
            G[1, 2] = cp * c3
            G[2, 2] = -cp * s3
        else:
            B[0] = 1.0 - 0.5 * s2
            B[1] = 1.0 + 0.5 * c3
            B[2] = 1.0 + 0.5 * math.cos(x1)
            G[2, 0] = -0.5 * math.sin(x1)
            G[0, 1] = -0.5 * c2
            G[1, 2] = -0.5 * s3
        return phi
    elif kind == SCREW_PINCH:
        a = params[0]
        s = 1.0 / math.sqrt(1.0 + a * a * (x1 * x1 + x2 * x2))
        s3_ = s * s * s
        ds1 = -a * a * x1 * s3_
        ds2 = -a * a * x2 * s3_
        B[0] = a * x2 * s
        B[1] = -a * x1 * s
        B[2] = s
        G[0, 0] = a * x2 * ds1
        G[1, 0] = -a * s - a * x1 * ds1
        G[2, 0] = ds1
        G[0, 1] = a * s + a * x2 * ds2
        G[1, 1] = -a * x1 * ds2
        G[2, 1] = ds2
        E[0] = 0.0
        E[1] = 0.0
        E[2] = 0.0
        return 0.0
    else:
        # uniform B = (0, 0, b0), constant E, phi = -E.x
        B[0] = 0.0
        B[1] = 0.0
        B[2] = params[0]
        E[0] = params[1]
        E[1] = params[2]
        E[2] = params[3]
        return -(params[1] * x1 + params[2] * x2 + params[3] * x3)


@njit(cache=True)
def _field_batch(kind, params, t, X):
    n = X.shape[0]
    E = np.empty((n, 3))
    B = np.empty((n, 3))
    G = np.empty((n, 3, 3))
    phi = np.empty(n)
    for k in range(n):
        phi[k] = field_point(kind, params, t, X[k], E[k], B[k], G[k])
    return E, B, G, phi


@dataclass(frozen=True)
class FieldCatalogEntry:
    """Selects a field by name; ``params`` holds e.g. ``{"alpha": 0.003}``."""

    name: str
    params: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "FieldCatalogEntry":
        """Parse ``"screwpinch:alpha=0.003"`` style specifications."""
        name, _, rest = text.partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            params[key.strip()] = float(value)
        return cls(name.strip(), params)


@dataclass
class FieldSet:
    """Evaluators for E, B, grad B, |B| and (optionally) the potential.

    Either ``kind``/``params`` select a compiled catalog kernel, or the
    ``custom_*`` callables (vectorised over ``(N, 3)`` inputs) are used.
    """

    name: str
    constant_intensity: bool
    divergence_free: bool
    time_dependent_E: bool = False
    c0: float = 1.0
    C_b: float = 1.0
    kind: Optional[int] = None
    params: np.ndarray = field(default_factory=lambda: np.zeros(4))
    custom_E: Optional[Callable] = None
    custom_B: Optional[Callable] = None
    custom_gradB: Optional[Callable] = None
    custom_phi: Optional[Callable] = None

    @property
    def compiled(self) -> bool:
        return self.kind is not None

    @property
    def has_potential(self) -> bool:
        return self.compiled or self.custom_phi is not None

    def _batch(self, t, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        flat = np.ascontiguousarray(x.reshape(-1, 3))
        if self.compiled:
            E, B, G, phi = _field_batch(self.kind, self.params, float(t), flat)
        else:
            E = np.asarray(self.custom_E(t, flat), dtype=float).reshape(-1, 3)
            B = np.asarray(self.custom_B(flat), dtype=float).reshape(-1, 3)
            G = np.asarray(self.custom_gradB(flat), dtype=float).reshape(-1, 3, 3)
            if self.custom_phi is not None:
                phi = np.asarray(self.custom_phi(flat), dtype=float).reshape(-1)
            else:
                phi = np.full(flat.shape[0], np.nan)
        return (
            E.reshape(shape + (3,)),
            B.reshape(shape + (3,)),
            G.reshape(shape + (3, 3)),
            phi.reshape(shape),
        )

    def eval_E(self, t, x):
        return self._batch(t, x)[0]

    def eval_B(self, x):
        return self._batch(0.0, x)[1]

    def eval_gradB(self, x):
        return self._batch(0.0, x)[2]

    def eval_b(self, x):
        return np.linalg.norm(self.eval_B(x), axis=-1)

    def eval_phi(self, x):
        if not self.has_potential:
            raise ConfigurationError(f"field {self.name!r} has no potential")
        return self._batch(0.0, x)[3]

    def eval_all(self, t, x):
        """Return ``(E, B, gradB, b)`` from a single evaluation pass."""
        E, B, G, _ = self._batch(t, x)
        return E, B, G, np.linalg.norm(B, axis=-1)


def eval_all(fs: FieldSet, t, x):
    return fs.eval_all(t, x)


def _intensity_bounds(fs: FieldSet, lo=0.0, hi=2.0 * np.pi, n=24):
    """Coarse grid scan of |B| followed by local refinement of both extremes."""
    g = np.linspace(lo, hi, n)
    X = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    b = fs.eval_b(X)

    def refine(x0, sign):
        res = minimize(lambda z: sign * float(fs.eval_b(z)), x0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        return sign * res.fun

    c0 = min(b.min(), refine(X[np.argmin(b)], 1.0))
    C_b = max(b.max(), refine(X[np.argmax(b)], -1.0))
    return float(c0), float(C_b)


def make_field(entry) -> FieldSet:
    """Build a :class:`FieldSet` from a catalog entry (or its string form)."""
    if isinstance(entry, str):
        entry = FieldCatalogEntry.parse(entry)
    name = entry.name.lower().replace("-", "").replace("_", "")
    p = entry.params
    for key, value in p.items():
        if not np.isfinite(value):
            raise ConfigurationError(f"parameter {key} is not finite")
    if name in ("example1", "ex1", "constant"):
        return FieldSet("Example1", constant_intensity=True, divergence_free=False,
                        kind=EXAMPLE1)
    if name in ("example2", "ex2", "varying"):
        fs = FieldSet("Example2", constant_intensity=False, divergence_free=True,
                      kind=EXAMPLE2)
        # |B|^2 is separable in cos x1, sin x2, cos x3: extremes are analytic
        fs.c0, fs.C_b = _intensity_bounds(fs)
        return fs
    if name in ("screwpinch", "screw"):
        alpha = float(p.get("alpha", 0.0))
        if alpha < 0:
            raise ConfigurationError("screw pinch requires alpha >= 0")
        return FieldSet(f"ScrewPinch(alpha={alpha:g})", constant_intensity=True,
                        divergence_free=True, kind=SCREW_PINCH,
                        params=np.array([alpha, 0.0, 0.0, 0.0]))
    if name in ("uniformbz", "uniform"):
        b0 = float(p.get("b0", 1.0))
        if b0 <= 0:
            raise ConfigurationError("uniform field requires b0 > 0")
        params = np.array([b0, p.get("E1", 0.0), p.get("E2", 0.0), p.get("E3", 0.0)])
        return FieldSet(f"UniformBz(b0={b0:g})", constant_intensity=abs(b0 - 1.0) < 1e-12,
                        divergence_free=True, c0=b0, C_b=b0, kind=UNIFORM_BZ,
                        params=params)
    raise ConfigurationError(f"unknown field {entry.name!r}")


def custom_field(name, E, B, gradB, *, constant_intensity, divergence_free,
                 phi=None, time_dependent_E=False, c0=1.0, C_b=1.0) -> FieldSet:
    """Wrap user callables. Flags must be declared; nothing is auto-detected."""
    return FieldSet(name, constant_intensity=constant_intensity,
                    divergence_free=divergence_free, time_dependent_E=time_dependent_E,
                    c0=c0, C_b=C_b, custom_E=E, custom_B=B, custom_gradB=gradB,
                    custom_phi=phi)


__all__.append("custom_field")
__all__.append("field_point")
