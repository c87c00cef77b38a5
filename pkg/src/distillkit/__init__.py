"""Dataset distillation with class-centralization and covariance-matching constraints."""

__version__ = "0.1.0"
