"""From-scratch residual CNN for five-class chest X-ray classification."""

__version__ = "0.1.0"
