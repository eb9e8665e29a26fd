"""Energy-based models on 2D toy data, viewed as gradient-flow generators.

The energy network, its exact derivatives, Langevin/Euler chains, the
continuous gradient flow with log-density tracking, the training objectives
(contrastive, self-adversarial, flow maximum likelihood) and the density
evaluation tools all live in submodules; the most used names are re-exported
here.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .data import MixtureSpec, PointBatch, sample_dataset, sample_gaussian_grid, sample_prior, sample_swiss_roll
from .dynamics import ChainConfig, invert_euler_chain, langevin_step, lipschitz_estimate, run_chain
from .energy import Linear, MLPEnergy, MLPParams, Quadratic
from .errors import ConfigError, DivergenceError, GradflowError, InvertibilityError, UsageError
from .evaluation import DensityGrid, density_grid, ebm_normalizer, grid_kl, test_log_likelihood
from .ode import SolverConfig, log_likelihood, solve_forward, solve_forward_with_logdensity, solve_reverse
from .training import TrainConfig, train

__all__ = [
    "ChainConfig", "ConfigError", "DensityGrid", "DivergenceError", "GradflowError", "InvertibilityError",
    "Linear", "MLPEnergy", "MLPParams", "MixtureSpec", "PointBatch", "Quadratic", "SolverConfig",
    "TrainConfig", "UsageError", "density_grid", "ebm_normalizer", "grid_kl", "invert_euler_chain",
    "langevin_step", "lipschitz_estimate", "load_checkpoint", "log_likelihood", "run_chain",
    "sample_dataset", "sample_gaussian_grid", "sample_prior", "sample_swiss_roll", "save_checkpoint",
    "solve_forward", "solve_forward_with_logdensity", "solve_reverse", "test_log_likelihood", "train",
]
