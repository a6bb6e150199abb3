"""Contract pricing and priority matching for licensed/unlicensed spectrum sharing."""

from .config import Scenario, load_config, parse_config
from .errors import (ConfigError, FeasibilityError, InfeasibleDemandError, LTEUError,
                     MatchingError)

__version__ = "0.1.0"

__all__ = [
    "Scenario", "load_config", "parse_config", "ConfigError", "FeasibilityError",
    "InfeasibleDemandError", "LTEUError", "MatchingError", "__version__",
]
