from .base import PREDATOR_PREY, TRAFFIC_JUNCTION, EnvConfig, StepResult, make_env
from .predator_prey import PredatorPreyEnv
from .traffic_junction import TrafficJunctionEnv

__all__ = [
    "PREDATOR_PREY",
    "TRAFFIC_JUNCTION",
    "EnvConfig",
    "StepResult",
    "make_env",
    "PredatorPreyEnv",
    "TrafficJunctionEnv",
]
