"""Quadruped soccer-dribbling simulator, trainer, and teleoperation stack."""

from .config import Config, load_config

__version__ = "0.1.0"
__all__ = ["Config", "load_config", "__version__"]
