"""Uniformly accurate integrators for charged particles in strong magnetic
fields of varying direction, with a particle-in-cell Vlasov-Poisson layer."""

__version__ = "0.1.0"
