"""Curriculum reinforcement learning of diverse skills with a mixture of experts.

Experts are contextual Gaussians over motion-primitive parameters, each
with an energy-based curriculum over task contexts.
"""
from .kernels import BACKEND
from .trainer import TrainConfig, default_config, infer, load_config, resume, train

__version__ = "0.1.0"

__all__ = ["BACKEND", "TrainConfig", "default_config", "infer", "load_config", "resume", "train", "__version__"]
