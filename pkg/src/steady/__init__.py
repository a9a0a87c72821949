"""Learning stochastic hovercraft dynamics from bearing-only observations with Monte Carlo EM."""

__version__ = "0.1.0"
