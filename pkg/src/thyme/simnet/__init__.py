from .config import ConfigError, SimConfig, read_config_file
from .kernel import KIND_CTRL, KIND_DATA, MS, Simulator
from .mobility import RandomWaypoint
from .churn import TransientChurn, schedule_permanent

__all__ = [
    "ConfigError",
    "SimConfig",
    "read_config_file",
    "Simulator",
    "RandomWaypoint",
    "TransientChurn",
    "schedule_permanent",
    "KIND_CTRL",
    "KIND_DATA",
    "MS",
]
