"""Sequential design for ranking stochastic response surfaces."""

__version__ = "0.1.0"
