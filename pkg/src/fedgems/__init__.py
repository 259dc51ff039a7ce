"""Large-server federated distillation with selective knowledge fusion."""

__version__ = "0.1.0"
