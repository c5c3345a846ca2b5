"""Markov chain approximations of nonsymmetric jump and diffusion processes on n^-1 Z^d."""

__version__ = "0.1.0"

from .lattice import Ball, LatticeFunction, LatticePoint, Window, round_to_lattice
from .conductance import (AssumptionReport, Conductance, DecomposedConductance, check_ctail, check_k1,
                          check_k2, check_nnrw, decompose, nearest_neighbor)
from .operators import (GeneratorMatrix, assemble, bilinear_form, green_vector, resolvent,
                        semigroup_apply)
from .chain import McConfig, exit_time_mc, simulate

__all__ = [
    "Ball", "LatticeFunction", "LatticePoint", "Window", "round_to_lattice",
    "AssumptionReport", "Conductance", "DecomposedConductance", "check_ctail", "check_k1",
    "check_k2", "check_nnrw", "decompose", "nearest_neighbor",
    "GeneratorMatrix", "assemble", "bilinear_form", "green_vector", "resolvent", "semigroup_apply",
    "McConfig", "exit_time_mc", "simulate",
]
