"""Self-interacting stochastic approximation of quasi-stationary distributions."""

__version__ = "0.1.0"
