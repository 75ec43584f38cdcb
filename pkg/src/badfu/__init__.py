"""Deterministic cross-silo federated learning simulator with federated
unlearning and the camouflage-based dormant backdoor attack."""

__version__ = "0.1.0"
