"""Reference oracles, experiment drivers and the command line interface."""
from .reference import rk4_reference, reference_solution

__all__ = ["rk4_reference", "reference_solution"]
