"""Stochastic fractional heat equation on a ball with zero exterior values.

Discrete killed generators, their heat kernels, correlated noise,
exponential-Euler ensembles, second-moment Volterra oracles and the
growth-rate analysis that separates decay from growth in the noise level.
"""

__version__ = "0.1.0"
