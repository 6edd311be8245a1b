"""Source-free domain adaptation on synthetic data, with an agreement-based
stopping criterion and validator, BN reference models, and EMA self-training."""

__version__ = "0.1.0"
