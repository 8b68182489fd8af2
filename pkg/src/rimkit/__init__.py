"""Recursive inference machines on a small numpy autodiff engine.

A RIM alternates a solver (latent state updates) with a generator
(solution updates) and lets a reweighter decide how much of each candidate
to accept. ``rimkit.tabrim`` holds the Gibbs-sampling tabular variant.
"""

from rimkit.loop import RIM, RimConfig, run_rim
from rimkit.tabrim import TabRIM, brute_force_posterior
from rimkit.training import TrainConfig, evaluate, train

__all__ = ["RIM", "RimConfig", "run_rim", "TabRIM", "brute_force_posterior", "TrainConfig",
           "evaluate", "train"]
__version__ = "0.1.0"
