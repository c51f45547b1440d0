"""Cross-device federated learning orchestration: simulation and real distributed runs."""

__version__ = "0.1.0"
