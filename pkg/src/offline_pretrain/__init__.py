"""Offline reinforcement learning with supervised pre-training of actor and critic.

Submodules:

* ``core``: transitions, trajectories, datasets and return-to-go annotation
* ``envs``: tabular MDPs, point-mass control tasks and behaviour policies
* ``tabular``: Q-learning initialisation studies and fitted Q-iteration
* ``nn``: a small numpy autodiff tape with MLP, Adam and Gaussian policy heads
* ``agents``: BC, TD3+BC, CQL and ensemble soft actor-critic with pre-training
* ``harness``: seeded experiments, evaluation, metrics CSVs
* ``cli``: the ``offline-pretrain`` command line
"""

from .agents import (ActorCritic, AgentConfig, Algorithm, BCMode, MetricsRecord, Phase,
                     PretrainConfig, RegularizerKind, pretrain_then_train)
from .core import (OfflineDataset, ReturnConfig, TimeoutMode, Trajectory, Transition,
                   annotate_dataset, compute_mixed_target, compute_return_to_go,
                   compute_soft_return_to_go, load_jsonl, save_jsonl)
from .envs import generate_dataset, motivational_mdp, pointmass_env, score_anchors
from .harness import ExperimentConfig, preset_config, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ActorCritic", "AgentConfig", "Algorithm", "BCMode", "ExperimentConfig", "MetricsRecord",
    "OfflineDataset", "Phase", "PretrainConfig", "RegularizerKind", "ReturnConfig",
    "TimeoutMode", "Trajectory", "Transition", "annotate_dataset", "compute_mixed_target",
    "compute_return_to_go", "compute_soft_return_to_go", "generate_dataset", "load_jsonl",
    "motivational_mdp", "pointmass_env", "preset_config", "pretrain_then_train",
    "run_experiment", "save_jsonl", "score_anchors",
]
