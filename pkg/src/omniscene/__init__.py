"""Desk-scale multimodal 3D perception, motion prediction and planning."""
from .errors import ConfigError, ContractViolation

__version__ = "0.1.0"
__all__ = ["ConfigError", "ContractViolation", "__version__"]
