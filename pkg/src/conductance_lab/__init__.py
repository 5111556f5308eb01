"""Random walks among random conductances with long jumps: exact solvers and Monte Carlo checks."""

__version__ = "0.1.0"
