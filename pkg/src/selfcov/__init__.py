"""Self-supervised local covariance estimation.

Estimate per-sample covariance (or precision) matrices in non-stationary
complex-valued environments by training a window-to-matrix predictor on
masked samples, plus the classical shrinkage/Toeplitz baselines and the
adaptive detection metrics used to compare them.
"""

__version__ = "0.1.0"
