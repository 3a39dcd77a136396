"""lpfarm: a lightweight processing framework and a simulated reconstruction farm."""

__version__ = "0.1.0"
