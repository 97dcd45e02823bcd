"""Command line front end: ``uapic <subcommand> [flags]``.

Flags override values read from ``--config`` (``key = value`` lines with the
same names as the flags). The worker count comes from ``UAPIC_WORKERS``.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys

from ..fields import ConfigurationError
from . import experiments as ex

log = logging.getLogger("uapic")

_DEFAULTS = {
    # subcommand -> config defaults applied before the config file
    "sweep": {},
    "energy": {"scheme": "mrc", "eps": (2.0 ** -14,), "steps": (64, 128),
               "tfinal": 32 * math.pi},
    "efficiency": {"scheme": "mrc,tsf,mm", "steps": (16, 32, 64, 128, 256)},
    "vp": {"scheme": "mrc", "field": "screwpinch:alpha=0", "eps": (2.0 ** -5,),
           "steps": (32,), "tfinal": 4 * math.pi, "snapshot_times": (0.0, 2 * math.pi, 4 * math.pi)},
    "limit-compare": {"scheme": "limit", "eps": tuple(2.0 ** -k for k in range(5, 9)),
                      "steps": (3200,), "tfinal": math.pi},
    "recover": {"scheme": "mm", "eps": (2.0 ** -5,), "steps": (32,), "tfinal": math.pi},
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags take precedence")
    common.add_argument("--scheme", help="comma list of mrc, tsf, mm, mm-reparam, rk4, limit")
    common.add_argument("--field", help="e.g. example1, example2, screwpinch:alpha=0.003")
    common.add_argument("--eps", help="comma list; accepts 2^-5 style powers")
    common.add_argument("--steps", help="comma list of step counts M (dt = T / M)")
    common.add_argument("--ntau", help="number of tau grid points")
    common.add_argument("--tfinal", help="final time; accepts pi multiples such as 32pi")
    common.add_argument("--restart-period", dest="restart_period",
                        help="MM restart period in physical time (mm-reparam: in steps)")
    common.add_argument("--seed", help="sampling seed (vp)")
    common.add_argument("--out", help="output CSV path, or directory for vp")
    common.add_argument("--m-micro", dest="m_micro", help="MRC micro steps per period")
    common.add_argument("--starter", help="MM first-step rule: euler or heun")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="uapic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("sweep", parents=[common], help="endpoint error vs M for each eps")
    sub.add_parser("energy", parents=[common], help="relative energy error histories")
    sub.add_parser("efficiency", parents=[common], help="error vs wall time ladders")
    vp = sub.add_parser("vp", parents=[common], help="Vlasov-Poisson PIC run with MRC")
    vp.add_argument("--mesh", help="nodes per direction, e.g. 64,64,4")
    vp.add_argument("--particles-per-cell", dest="particles_per_cell")
    vp.add_argument("--snapshot-times", dest="snapshot_times")
    vp.add_argument("--diag-every", dest="diag_every")
    vp.add_argument("--quarter-symmetric", dest="quarter_symmetric", action="store_const",
                    const="true", help="copy a quarter of the particles under quarter turns")
    lc = sub.add_parser("limit-compare", parents=[common],
                        help="full vs limit model at strobed times")
    lc.add_argument("--pic", action="store_true", help="density-level comparison")
    lc.add_argument("--mesh")
    lc.add_argument("--particles-per-cell", dest="particles_per_cell")
    rc = sub.add_parser("recover", parents=[common], help="dense MM trajectory output")
    rc.add_argument("--samples", type=int, default=1024)
    return p


_FLAG_KEYS = ("scheme", "field", "eps", "steps", "ntau", "tfinal", "restart_period", "seed",
              "out", "m_micro", "starter", "mesh", "particles_per_cell", "snapshot_times",
              "diag_every", "quarter_symmetric")


def config_from_args(args) -> ex.ExperimentConfig:
    base = dict(_DEFAULTS.get(args.command, {}))
    base.setdefault("out", "out" if args.command == "vp" else
                    f"{args.command.replace('-', '_')}.csv")
    file_values = {}
    if args.config:
        with open(args.config) as fh:
            file_values = ex.parse_config_text(fh.read())
    flags = {k: v for k in _FLAG_KEYS if (v := getattr(args, k, None)) is not None}
    cfg = ex.load_config(None, **{**base, **file_values, **flags})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        log.info("config %s (hash %s), %d worker(s)", cfg, cfg.config_hash(), ex.worker_count())
        if args.command == "sweep":
            ex.write_rows(cfg.out, "sweep", ex.convergence_sweep(cfg))
        elif args.command == "energy":
            ex.write_rows(cfg.out, "energy", ex.energy_history(cfg))
        elif args.command == "efficiency":
            ex.write_rows(cfg.out, "efficiency", ex.efficiency_compare(cfg))
        elif args.command == "limit-compare":
            if args.pic:
                ex.write_rows(cfg.out, "limit_pic", ex.limit_compare_pic(cfg))
            else:
                ex.write_rows(cfg.out, "limit", ex.limit_compare(cfg))
        elif args.command == "recover":
            ex.write_rows(cfg.out, "recover", ex.recover(cfg, samples=args.samples))
        elif args.command == "vp":
            def show(d):
                log.info("t=%.4f total=%.6e rel_err=%.3e", d.t, d.total, d.rel_energy_error)
            history, asym = ex.vp(cfg, on_diag=show)
            worst = max(d.rel_energy_error for d in history)
            print(f"max relative energy error {worst:.3e}; "
                  f"quarter-turn asymmetry {asym[0]:.3e} -> {asym[-1]:.3e}")
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"uapic: error: {exc}", file=sys.stderr)
        return 2
    if args.command != "vp":
        print(f"wrote {os.path.abspath(cfg.out)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
