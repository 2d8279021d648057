"""Configuration, stage runners and CLI."""
from .config import DEFAULTS, ConfigError, load_config
from .pipeline import (BudgetMismatchError, MissingArtifactError, MissingCheckpointError, RunPaths, ablate,
                       run_pipeline)

__all__ = ["DEFAULTS", "ConfigError", "load_config", "BudgetMismatchError", "MissingArtifactError",
           "MissingCheckpointError", "RunPaths", "ablate", "run_pipeline"]
