"""Node importance estimation in knowledge graphs from multiple partial signals."""

__version__ = "0.1.0"
