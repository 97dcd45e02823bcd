"""Experiment drivers: convergence sweeps, energy and moment histories,
efficiency ladders, limit-model comparisons, dense output and PIC runs.

Every driver takes an :class:`ExperimentConfig` and returns plain rows; the
``write_*`` helpers turn them into CSV files whose columns are listed in
``CSV_COLUMNS``. Independent (eps, M) cells are spread over a process pool
whose size is read from the ``UAPIC_WORKERS`` environment variable.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from ..fields import ConfigurationError, FieldSet, make_field
from ..limitmodel import integrate_limit
from ..micromacro import magnetic_moment_particle, mm_integrate, mm_interpolate, reparam_integrate
from ..mrc import mrc_integrate, plan_mrc
from ..pic import (Mesh, ParticleEnsemble, RingParams, deposit, fourfold_asymmetry,
                   sample_initial, self_consistent_field, vp_run, write_diagnostics_csv)
from ..rotation import FilteredSystem, TauGrid, reduce_phase
from ..tsf import tsf_integrate
from .reference import reference_solution, rk4_reference

SCHEMES = ("mrc", "tsf", "mm", "mm-reparam", "rk4", "limit")
WORKERS_ENV = "UAPIC_WORKERS"

X0 = (1.0 / 3.0, -0.5, math.sqrt(math.pi) / 2.0)
V0 = (0.5, math.e / 4.0, -1.0 / 3.0)

CSV_COLUMNS = {
    "sweep": ("scheme", "field", "eps", "M", "n_tau", "error", "error_x", "error_v",
              "wall_time", "energy_error_max", "config_hash"),
    "energy": ("scheme", "field", "eps", "M", "n", "t", "rel_energy_error",
               "magnetic_moment", "config_hash"),
    "efficiency": ("scheme", "field", "eps", "M", "n_tau", "error", "wall_time", "config_hash"),
    "limit": ("field", "eps", "t_star", "discrepancy", "ratio", "config_hash"),
    "limit_pic": ("eps", "t_star", "linf", "rel_linf", "config_hash"),
    "recover": ("t", "x1", "x2", "x3", "v1", "v2", "v3", "position_error", "config_hash"),
}


@dataclass
class ExperimentConfig:
    """Everything a driver needs; see :func:`load_config` for the file format."""

    scheme: str = "mm"
    field: str = "example1"
    eps: tuple = (0.5,)
    steps: tuple = (32,)
    ntau: int = 32
    tfinal: float = math.pi / 2
    restart_period: Optional[float] = None
    seed: int = 0
    out: str = "out"
    x0: tuple = X0
    v0: tuple = V0
    m_micro: Optional[int] = None
    starter: Optional[str] = None
    record_every: int = 1
    # Vlasov-Poisson
    mesh: tuple = (64, 64, 4)
    particles_per_cell: int = 10
    n0: float = 100.0
    eta: float = 0.05
    mode_k: int = 4
    unit_maxwellian: bool = False
    quarter_symmetric: bool = False
    snapshot_times: tuple = ()
    diag_every: int = 1

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def field_set(self) -> FieldSet:
        return make_field(self.field)


_LIST_KEYS = {"eps": float, "steps": int, "x0": float, "v0": float, "mesh": int,
              "snapshot_times": float}


def _coerce(key: str, value):
    """Turn a text value into the type of config field ``key``."""
    names = {f.name: f for f in fields(ExperimentConfig)}
    if key not in names:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    if not isinstance(value, str):
        return value
    value = value.strip()
    if key in _LIST_KEYS:
        conv = _LIST_KEYS[key]
        return tuple(conv(_number(item)) for item in value.split(",") if item.strip())
    if key in ("restart_period", "m_micro", "starter") and value.lower() in ("", "none"):
        return None
    if key in ("unit_maxwellian", "quarter_symmetric"):
        return value.lower() in ("1", "true", "yes", "on")
    default = getattr(ExperimentConfig, key, None)
    if key in ("ntau", "seed", "m_micro", "record_every", "particles_per_cell", "mode_k",
               "diag_every"):
        return int(_number(value))
    if key in ("tfinal", "restart_period", "n0", "eta") or isinstance(default, float):
        return float(_number(value))
    return value


def _number(text: str) -> float:
    """Parse numbers, allowing ``pi`` multiples and powers like ``2^-5``."""
    text = text.strip().lower().replace(" ", "")
    if "^" in text:
        base, _, exp = text.partition("^")
        return float(base) ** float(exp)
    if text.endswith("pi"):
        head = text[:-2].rstrip("*")
        return (float(head) if head else 1.0) * math.pi
    if "pi/" in text:
        head, _, den = text.partition("pi/")
        return (float(head.rstrip("*")) if head else 1.0) * math.pi / float(den)
    return float(text)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys allowed."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key = key.strip().replace("-", "_")
        out[key] = _coerce(key, value)
    return out


def load_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Defaults, then the config file, then ``overrides`` (``None`` values skipped)."""
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for key, value in overrides.items():
        if value is not None:
            values[key] = _coerce(key, value)
    cfg = replace(ExperimentConfig(), **values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    for scheme in schemes_of(cfg):
        if scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {scheme!r}")
    if not cfg.eps or any(not 0.0 < e <= 1.0 for e in cfg.eps):
        raise ConfigurationError("eps values must lie in (0, 1]")
    if not cfg.steps or any(m < 1 for m in cfg.steps):
        raise ConfigurationError("steps must be positive integers")
    if cfg.ntau < 2 or cfg.ntau % 2:
        raise ConfigurationError("ntau must be an even integer >= 2")
    if cfg.tfinal <= 0:
        raise ConfigurationError("tfinal must be positive")


def schemes_of(cfg: ExperimentConfig):
    return [s.strip().lower() for s in cfg.scheme.split(",") if s.strip()]


def check_compatible(scheme: str, fs: FieldSet):
    if scheme in ("mrc", "tsf", "mm", "limit") and not fs.constant_intensity:
        raise ConfigurationError(f"{scheme} needs a unit-intensity field; use mm-reparam")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, jobs):
    """Ordered map over a process pool (serial when one worker)."""
    n = worker_count()
    if n == 1 or len(jobs) < 2:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def endpoint_error(x, v, x_ref, v_ref):
    """|x - x_ref| / |x_ref| + |v - v_ref| / |v_ref|, also returned split."""
    ex = float(np.linalg.norm(np.asarray(x) - x_ref) / np.linalg.norm(x_ref))
    ev = float(np.linalg.norm(np.asarray(v) - v_ref) / np.linalg.norm(v_ref))
    return ex + ev, ex, ev


def energy(fs: FieldSet, x, v) -> float:
    """H = |v|^2 / 2 + phi(x)."""
    v = np.asarray(v, float)
    return 0.5 * float(v @ v) + float(fs.eval_phi(np.asarray(x, float)))


def magnetic_moment(fs: FieldSet, x, v) -> float:
    B = fs.eval_B(np.asarray(x, float))
    b = float(np.linalg.norm(B))
    vpar = (B @ v) / b
    return magnetic_moment_particle(x, vpar * B / b, float(np.linalg.norm(v)), fs)


def run_scheme(scheme: str, fs: FieldSet, x0, v0, eps: float, T: float, M: int,
               n_tau: int = 32, restart_period: Optional[float] = None,
               m_micro: Optional[int] = None, starter: Optional[str] = None,
               on_step: Optional[Callable] = None):
    """Run one single-particle scheme with M steps on [0, T].

    Returns ``(x, v)``; for ``mm-reparam`` (step ds = T / M in the
    reparametrized time) ``v`` is replaced by ``(v_par, speed)``.
    ``on_step(n, t, x, v)`` sees every step (macro step for MRC); for
    mm-reparam it receives ``(n, t, x, (v_par, speed))``.
    """
    scheme = scheme.lower()
    check_compatible(scheme, fs)
    x0 = np.asarray(x0, float)
    v0 = np.asarray(v0, float)
    if scheme == "mrc":
        return mrc_integrate(x0, v0, plan_mrc(T, eps, M, m_micro), fs, on_macro=on_step)
    if scheme == "tsf":
        return tsf_integrate(x0, v0, fs, eps, T, M, n_tau, on_step=on_step)
    if scheme == "mm":
        return mm_integrate(x0, v0, fs, eps, T, M, n_tau, restart_period=restart_period,
                            on_step=on_step, starter=starter or "euler")
    if scheme == "mm-reparam":
        cb = None
        if on_step is not None:
            def cb(n, s, t, x, vp, sp):
                on_step(n, t, x, (vp, sp))
        every = None if restart_period is None else max(1, int(round(restart_period)))
        res = reparam_integrate(x0, v0, fs, T, T / M, eps, n_tau, restart_every=every,
                                on_step=cb, starter=starter or "heun")
        return res.x, (res.v_par, res.speed)
    if scheme == "rk4":
        if on_step is None:
            return rk4_reference(x0, v0, fs, eps, T, T / M)
        rec = rk4_reference(x0, v0, fs, eps, T, T / M, record_every=1)
        for n, row in enumerate(rec):
            on_step(n, n * T / M, row[:3], row[3:])
        return rec[-1, :3].copy(), rec[-1, 3:].copy()
    if scheme == "limit":
        if on_step is None:
            return integrate_limit(x0, v0, fs, T, T / M)
        rec = integrate_limit(x0, v0, fs, T, T / M, record=True)
        for n, row in enumerate(rec):
            on_step(n, n * T / M, row[:3], row[3:])
        return rec[-1, :3].copy(), rec[-1, 3:].copy()
    raise ConfigurationError(f"unknown scheme {scheme!r}")


def reparam_errors(x, vp_speed, x_ref, v_ref, fs: FieldSet):
    """Relative errors in x, v_par and |v| against a physical reference."""
    vp, speed = vp_speed
    B = fs.eval_B(x_ref)
    b = float(np.linalg.norm(B))
    vp_ref = (B @ v_ref) / b ** 2 * B
    ex = float(np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref))
    evp = float(np.linalg.norm(vp - vp_ref) / np.linalg.norm(vp_ref))
    es = abs(speed - float(np.linalg.norm(v_ref))) / float(np.linalg.norm(v_ref))
    return ex, evp, es


@dataclass
class ErrorRecord:
    scheme: str
    field: str
    eps: float
    M: int
    n_tau: int
    error: float
    error_x: float
    error_v: float
    wall_time: float
    energy_error_max: float = float("nan")
    config_hash: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    def row(self):
        return [self.scheme, self.field, self.eps, self.M, self.n_tau, self.error,
                self.error_x, self.error_v, self.wall_time, self.energy_error_max,
                self.config_hash]


def _oracle(cfg: ExperimentConfig, eps: float):
    fs = cfg.field_set()
    return reference_solution(cfg.x0, cfg.v0, fs, eps, cfg.tfinal)


def _sweep_cell(cfg: ExperimentConfig, scheme: str, eps: float, M: int, ref):
    fs = cfg.field_set()
    x_ref, v_ref = ref
    H0 = energy(fs, cfg.x0, cfg.v0) if fs.has_potential else None
    worst = [0.0]

    def track(n, t, x, v):
        if scheme == "mm-reparam":
            vp, sp = v
            H = 0.5 * sp * sp + float(fs.eval_phi(np.asarray(x)))
        else:
            H = energy(fs, x, v)
        worst[0] = max(worst[0], abs(H - H0) / abs(H0))

    t0 = time.perf_counter()
    x, v = run_scheme(scheme, fs, cfg.x0, cfg.v0, eps, cfg.tfinal, M, cfg.ntau,
                      cfg.restart_period, cfg.m_micro, cfg.starter,
                      track if H0 is not None else None)
    wall = time.perf_counter() - t0
    if scheme == "mm-reparam":
        ex, evp, es = reparam_errors(x, v, x_ref, v_ref, fs)
        rec = ErrorRecord(scheme, cfg.field, eps, M, cfg.ntau, ex + evp + es, ex, evp + es, wall,
                          worst[0] if H0 is not None else float("nan"),
                          extra={"error_vpar": evp, "error_speed": es})
    else:
        err, ex, ev = endpoint_error(x, v, x_ref, v_ref)
        rec = ErrorRecord(scheme, cfg.field, eps, M, cfg.ntau, err, ex, ev, wall,
                          worst[0] if H0 is not None else float("nan"))
    rec.config_hash = cfg.config_hash()
    return rec


def convergence_sweep(cfg: ExperimentConfig, refs: Optional[dict] = None):
    """Endpoint error against the oracle for every scheme, eps and M."""
    validate(cfg)
    fs = cfg.field_set()
    for scheme in schemes_of(cfg):
        check_compatible(scheme, fs)
    if refs is None:
        refs = dict(zip(cfg.eps, _map(_oracle, [(cfg, e) for e in cfg.eps])))
    jobs = [(cfg, s, e, m, refs[e]) for s in schemes_of(cfg) for e in cfg.eps for m in cfg.steps]
    return _map(_sweep_cell, jobs)


def fit_slope(M, err, lo: float = 1e-8, hi: float = 1e-2) -> float:
    """Least-squares slope of -log(err) vs log(M) over errors in [lo, hi]."""
    M = np.asarray(M, float)
    err = np.asarray(err, float)
    keep = (err >= lo) & (err <= hi)
    if keep.sum() < 2:
        return float("nan")
    return float(-np.polyfit(np.log(M[keep]), np.log(err[keep]), 1)[0])


def _energy_cell(cfg: ExperimentConfig, scheme: str, eps: float, M: int):
    fs = cfg.field_set()
    if not fs.has_potential:
        raise ConfigurationError(f"field {fs.name!r} has no potential")
    x0 = np.asarray(cfg.x0, float)
    v0 = np.asarray(cfg.v0, float)
    H0 = energy(fs, x0, v0)
    rows = []

    def track(n, t, x, v):
        if n % cfg.record_every:
            return
        if scheme == "mm-reparam":
            vp, sp = v
            H = 0.5 * sp * sp + float(fs.eval_phi(x))
            mu = magnetic_moment_particle(x, vp, sp, fs)
        else:
            H = energy(fs, x, v)
            mu = magnetic_moment(fs, x, v)
        rows.append([scheme, cfg.field, eps, M, n, t, abs(H - H0) / abs(H0), mu])

    run_scheme(scheme, fs, x0, v0, eps, cfg.tfinal, M, cfg.ntau, cfg.restart_period,
               cfg.m_micro, cfg.starter, track)
    h = cfg.config_hash()
    return [r + [h] for r in rows]


def energy_history(cfg: ExperimentConfig):
    """Per-step relative energy error (and magnetic moment) rows."""
    validate(cfg)
    jobs = [(cfg, s, e, m) for s in schemes_of(cfg) for e in cfg.eps for m in cfg.steps]
    return [row for chunk in _map(_energy_cell, jobs) for row in chunk]


def efficiency_compare(cfg: ExperimentConfig, refs: Optional[dict] = None):
    """(error, wall time) ladders. Runs serially so timings are not skewed."""
    validate(cfg)
    if refs is None:
        refs = {e: _oracle(cfg, e) for e in cfg.eps}
    rows = []
    for s in schemes_of(cfg):
        # warm-up run so compilation time is not charged to the first cell
        _sweep_cell(cfg, s, cfg.eps[0], min(cfg.steps), refs[cfg.eps[0]])
        for e in cfg.eps:
            for m in cfg.steps:
                rec = _sweep_cell(cfg, s, e, m, refs[e])
                rows.append([s, cfg.field, e, m, cfg.ntau, rec.error, rec.wall_time,
                             rec.config_hash])
    return rows


def stroboscopic_time(T: float, eps: float) -> float:
    """Largest t <= T with t / eps a multiple of 2 pi."""
    return 2.0 * math.pi * eps * math.floor(T / (2.0 * math.pi * eps) * (1.0 + 1e-12))


def _limit_cell(cfg: ExperimentConfig, eps: float):
    fs = cfg.field_set()
    ts = stroboscopic_time(cfg.tfinal, eps)
    x, v = reference_solution(cfg.x0, cfg.v0, fs, eps, ts)
    xl, vl = integrate_limit(cfg.x0, cfg.v0, fs, ts, ts / max(cfg.steps))
    return ts, endpoint_error(xl, vl, x, v)[0]


def limit_compare(cfg: ExperimentConfig):
    """Strobed distance between the full and the limit characteristics.

    ``steps`` sets the RK4 step count of the limit model (largest entry).
    """
    validate(cfg)
    fs = cfg.field_set()
    check_compatible("limit", fs)
    eps = sorted(cfg.eps, reverse=True)
    out = _map(_limit_cell, [(cfg, e) for e in eps])
    rows, prev = [], None
    for e, (ts, D) in zip(eps, out):
        rows.append([cfg.field, e, ts, D, prev / D if prev else float("nan"), cfg.config_hash()])
        prev = D
    return rows


def make_mesh(cfg: ExperimentConfig) -> Mesh:
    return Mesh(shape=tuple(int(n) for n in cfg.mesh))


def make_ensemble(cfg: ExperimentConfig, mesh: Mesh) -> ParticleEnsemble:
    n = int(cfg.particles_per_cell) * int(np.prod(mesh.shape))
    params = RingParams(n0=cfg.n0, eta=cfg.eta, k=cfg.mode_k,
                        unit_maxwellian=cfg.unit_maxwellian)
    return sample_initial(params, mesh, n, cfg.seed, quarter_symmetric=cfg.quarter_symmetric)


def _significant(rho, frac=0.1):
    return np.abs(rho) >= frac * np.abs(rho).max()


def limit_compare_pic(cfg: ExperimentConfig, on_eps: Optional[Callable] = None):
    """PIC-level comparison of rho^eps (MRC, self-consistent) and the limit
    density (averaged characteristics, same ensemble) at strobed times.

    The L-infinity difference of the x3-averaged densities is taken over the
    nodes where the limit density reaches 10 % of its peak.
    """
    validate(cfg)
    fs = cfg.field_set()
    check_compatible("limit", fs)
    mesh = make_mesh(cfg)
    ens0 = make_ensemble(cfg, mesh)
    efield = self_consistent_field(mesh, ens0.w)
    rows = []
    M = max(cfg.steps)
    for eps in sorted(cfg.eps, reverse=True):
        ts = stroboscopic_time(cfg.tfinal, eps)
        plan = plan_mrc(ts, eps, M, cfg.m_micro)
        ens, _ = vp_run(ens0, mesh, fs, plan, diag_every=max(1, M))
        X, V = integrate_limit(ens0.x, ens0.v, fs, ts, ts / M, efield=efield)
        lim = ParticleEnsemble(mesh.wrap(X), V, ens0.w)
        rho_e = deposit(ens, mesh, neutralize=False).mean(axis=2)
        rho_l = deposit(lim, mesh, neutralize=False).mean(axis=2)
        mask = _significant(rho_l)
        linf = float(np.max(np.abs(rho_e - rho_l)[mask]))
        row = [eps, ts, linf, linf / float(np.abs(rho_l).max()), cfg.config_hash()]
        rows.append(row)
        if on_eps is not None:
            on_eps(row)
    return rows


def recover(cfg: ExperimentConfig, samples: int = 1024, with_oracle: bool = True):
    """Dense MM trajectory on ``samples + 1`` uniform times of [0, T]."""
    validate(cfg)
    fs = cfg.field_set()
    check_compatible("mm", fs)
    eps, M = cfg.eps[0], cfg.steps[0]
    T = cfg.tfinal
    _, _, states = mm_integrate(cfg.x0, cfg.v0, fs, eps, T, M, cfg.ntau,
                                keep_states=True, starter=cfg.starter or "euler")
    system = FilteredSystem(fs)
    grid = TauGrid(cfg.ntau)
    ts = np.linspace(0.0, T, samples + 1)
    ref = None
    if with_oracle:
        per = max(1, int(math.ceil(T / samples / min(2e-3, eps / (16.0 * fs.C_b)))))
        ref = reference_solution(cfg.x0, cfg.v0, fs, eps, T, nsteps=per * samples,
                                 record_every=per)
    dt = T / M
    h = cfg.config_hash()
    rows = []
    for j, t in enumerate(ts):
        n = min(int(t / dt + 1e-9), M - 1)
        u = mm_interpolate(states[n], states[n + 1], t, system, grid)
        x, v = system.physical(reduce_phase(t, eps), u)
        err = float(np.linalg.norm(x - ref[j, :3])) if ref is not None else float("nan")
        rows.append([t, *x, *v, err, h])
    return rows


def vp(cfg: ExperimentConfig, on_diag: Optional[Callable] = None):
    """Vlasov-Poisson run with MRC; writes snapshots and ``diagnostics.csv``
    under ``cfg.out``. Returns the diagnostics history and the asymmetry of
    every recorded density."""
    validate(cfg)
    fs = cfg.field_set()
    mesh = make_mesh(cfg)
    ens = make_ensemble(cfg, mesh)
    plan = plan_mrc(cfg.tfinal, cfg.eps[0], cfg.steps[0], cfg.m_micro)
    os.makedirs(cfg.out, exist_ok=True)
    _, history = vp_run(ens, mesh, fs, plan, cfg.snapshot_times, cfg.out,
                        cfg.diag_every, on_diag)
    write_diagnostics_csv(os.path.join(cfg.out, "diagnostics.csv"), history)
    asym = [fourfold_asymmetry(d.rho2d) for d in history]
    return history, asym


def write_rows(path: str, kind: str, rows: Sequence):
    """Write ``rows`` under the header ``CSV_COLUMNS[kind]`` (one writer)."""
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS[kind])
        for row in rows:
            wr.writerow(row.row() if isinstance(row, ErrorRecord) else row)


__all__ = [
    "ExperimentConfig", "ErrorRecord", "CSV_COLUMNS", "SCHEMES", "WORKERS_ENV",
    "load_config", "parse_config_text", "validate", "worker_count", "run_scheme",
    "endpoint_error", "energy", "magnetic_moment", "reparam_errors", "fit_slope",
    "convergence_sweep", "energy_history", "efficiency_compare", "stroboscopic_time",
    "limit_compare", "limit_compare_pic", "recover", "vp", "make_mesh", "make_ensemble",
    "write_rows",
]
