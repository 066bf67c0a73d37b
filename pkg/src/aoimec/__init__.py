"""Age-of-information scheduling for mobile edge computing."""
from ._kernels import BACKEND
from .config import AgentConfig, Config, ConfigError, RunConfig, SimConfig, load_config, parse_config_text
from .env import Action, MecEnv, PostDecisionState, RandomEvents, StepMetrics, SystemState

__version__ = "0.1.0"
