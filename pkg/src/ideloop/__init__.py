"""Turn-based, non-blocking single-agent runtime inside a simulated IDE."""

__version__ = "0.1.0"
