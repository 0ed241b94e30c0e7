"""Animatable human radiance fields from a single image, at desk scale.

Main entry points: :class:`HumanFieldModel` (the network),
:class:`HumanFieldRenderer` (a scikit-learn style estimator around training and
rendering) and the ``humanfield`` command line tool.
"""
from .config import Config, ConfigError, load_config, parse_config
from .estimator import HumanFieldRenderer
from .model import HumanFieldModel

__all__ = ["Config", "ConfigError", "HumanFieldModel", "HumanFieldRenderer", "load_config", "parse_config"]
__version__ = "0.1.0"
