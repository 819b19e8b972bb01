"""Constrained multi-agent PPO with a hazard-gated shared blackboard."""

__version__ = "0.1.0"
