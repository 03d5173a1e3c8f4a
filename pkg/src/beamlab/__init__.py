"""Gaussian beam quasimodes, attenuated geodesic ray transforms and
time-dependent potential recovery on transversally anisotropic geometries."""

__version__ = "0.1.0"
