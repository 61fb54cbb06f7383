"""Matrix-free snapshot compressive imaging solvers and deep-equilibrium models."""

__version__ = "0.1.0"
