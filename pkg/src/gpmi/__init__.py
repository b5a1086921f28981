"""Model-based policy search with tunable black-box priors (GP-MI)."""
from .cmaes import CmaConfig, CmaResult, bipop_cmaes
from .data import TransitionDataset
from .experiment import ExperimentConfig, RunResults, emit_curves, run_experiment
from .gp import FittedGP, KernelHyperParams, fit, log_marginal_likelihood, optimize_kernel
from .pendubot import ACTUAL, PRIORS, PendubotParams, run_episode
from .policy import NNPolicy, PolicyArch, act
from .policy_search import RolloutConfig, optimize_policy, rollout_model
from .priors import (FittedDynamicsModel, ModelConfig, TunableMeanPrior, evaluate_model,
                     gp_mi, learn_model, mi_mse)

__version__ = "0.1.0"
