"""Finite element solvers for nonlocal diffusion and bond-based
peridynamics with a one-level FETI domain decomposition method."""

__version__ = "0.1.0"
