"""Safe model-based RL with sparse task-completion costs on point-mass navigation."""
from .envs import TaskSpec, Trajectory, ci_task, default_task, rollout_episode
from .safeset import SafeSetStore

__version__ = "0.1.0"

__all__ = ["TaskSpec", "Trajectory", "SafeSetStore", "ci_task", "default_task", "rollout_episode", "__version__"]
