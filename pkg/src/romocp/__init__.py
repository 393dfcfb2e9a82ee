"""Reduced-order solvers for parametrized PDE-constrained optimal control.

Full-order finite-element optimality systems are compressed per variable
with proper orthogonal decomposition; aggregated Galerkin spaces then
answer parameter queries through small dense systems, with every
parameter-independent quantity assembled once ahead of time.
"""

__version__ = "0.1.0"
