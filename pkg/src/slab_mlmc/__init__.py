"""Slab-geometry radiative transport with random cross-sections: discrete-ordinates
solver and Monte Carlo / multilevel Monte Carlo uncertainty quantification."""

__version__ = "0.1.0"
