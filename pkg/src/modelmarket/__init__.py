"""modelmarket: a deterministic simulator for reputation-gated trading of
pre-trained models, built around a learned (regret-constrained) auction,
a toy consortium ledger, and a synthetic transfer-learning loop."""

__version__ = "0.1.0"
