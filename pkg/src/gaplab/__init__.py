"""Penetration-testing RL lab: simulator, PPO, first-order MAML and evaluation."""

__version__ = "0.1.0"
