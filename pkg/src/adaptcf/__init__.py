"""Adaptive calibration of car-following models.

Scores driving styles with entropy weights, labels short trajectory windows
with Bayesian-optimised model parameters, and trains a GRU that predicts the
parameters for the next window.
"""

__version__ = "0.1.0"
