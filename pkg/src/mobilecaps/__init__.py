"""MobileCaps: an inverted-residual feature extractor feeding capsule layers
with dynamic routing, plus the training, tuning and evaluation tooling around it."""

__version__ = "0.1.0"
