"""Analytical probabilistic load flow for transmission grids.

Propagates a Gaussian-mixture description of wind-power injections through a
piecewise-linear, frequency-regulation-aware network model to the joint
distribution of bus angles, voltage magnitudes and branch flows, with an AC
Monte Carlo benchmark for validation.
"""

__version__ = "0.1.0"
