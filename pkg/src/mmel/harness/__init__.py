"""Training, evaluation, checkpointing, configuration and the command line."""
from mmel.harness.config import ConfigError, RunConfig, load_config, save_config

__all__ = ["ConfigError", "RunConfig", "load_config", "save_config"]
