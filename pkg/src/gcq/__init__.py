"""Graph-convolution Q learning for cooperative lane changing of connected vehicles.

Modules, bottom up: ``sim`` (highway micro-simulator), ``observation``
(graph state), ``reward``, ``nn`` (numpy layers, gradients, Adam,
checkpoints), ``model`` (the Q network), ``dqn`` (replay and training),
``baselines``, ``evaluate`` and ``cli``.
"""

from .config import ConfigError, RunConfig, load_config, preset_config
from .dqn import ReplayBuffer, compute_targets, run_training, train_step
from .env import HighwayEnv
from .evaluate import EvalReport, evaluate, load_network, make_policy
from .model import GCQNetwork
from .observation import ObservationTensor, observe
from .reward import RewardWeights, total_reward
from .sim import Command, Flows, IdmParams, Intention, Kind, RoadSpec, SimState, step

__version__ = "0.1.0"

__all__ = [
    "Command", "ConfigError", "EvalReport", "Flows", "GCQNetwork", "HighwayEnv", "IdmParams",
    "Intention", "Kind", "ObservationTensor", "ReplayBuffer", "RewardWeights", "RoadSpec",
    "RunConfig", "SimState", "compute_targets", "evaluate", "load_config", "load_network",
    "make_policy", "observe", "preset_config", "run_training", "step", "total_reward", "train_step",
]
