"""Transfer sequential Monte Carlo for power-prior Bayesian transfer learning."""

__version__ = "0.1.0"
