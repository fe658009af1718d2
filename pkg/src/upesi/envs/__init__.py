from .params import (CHAIN_RANGES, DEFAULT_RANGES, PENDULUM_RANGES, RandomizationRanges,
                     sample_dynamics)
from .core import (SPECS, ZERO_NOISE, Env, EnvSpec, NoiseConfig, NoiseRanges, StepResult,
                   VecEnv, get_spec, reset, step)
from .dataset import TransitionDataset, collect
from .pendulum import pendulum_step
from .chain import chain_step

__all__ = [
    "CHAIN_RANGES", "DEFAULT_RANGES", "PENDULUM_RANGES", "RandomizationRanges", "sample_dynamics",
    "SPECS", "ZERO_NOISE", "Env", "EnvSpec", "NoiseConfig", "NoiseRanges", "StepResult", "VecEnv",
    "get_spec", "reset", "step", "TransitionDataset", "collect", "pendulum_step", "chain_step",
]
