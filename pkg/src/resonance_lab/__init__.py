"""Large-deviation toolkit for stochastic resonance in slowly forced double wells."""

__version__ = "0.1.0"
