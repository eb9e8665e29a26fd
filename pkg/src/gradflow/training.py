"""Training objectives, Adam, and the training loop.

Three objectives share one loop:

* ``ebm_contrastive`` - mean dE/dtheta over data minus mean over negatives,
  negatives taken as constants.
* ``self_adversarial`` - the contrastive term plus a generator term: the
  energy of Euler-chain samples, with the outer energy frozen and the
  dependence through every chain step kept. One chain per latent serves both.
* ``flow_mle`` - negative log-likelihood of the gradient flow with a Gaussian
  prior, backpropagated through a fixed-step RK4 solve of the reverse-time
  augmented ODE.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DATASETS, MixtureSpec, sample_dataset, sample_prior, standard_normal_logpdf
from .dynamics import ChainConfig, run_chain, run_chains
from .energy import MLPEnergy, MLPParams
from .errors import ConfigError, DivergenceError, GradflowError, UsageError
from .ode import SolverConfig, integrate_flow, rk4_reverse_logdensity

log = logging.getLogger(__name__)

LOSSES = ("ebm_contrastive", "self_adversarial", "flow_mle")
DYNAMICS = ("langevin", "euler", "ode")

RK4_MATCH_TOL = 1e-4
RK4_MAX_STEPS = 1024
RK4_REFERENCE_TOL = 1e-8


@dataclass
class TrainConfig:
    loss: str = "ebm_contrastive"
    dynamics: str = "ode"
    noise_scale: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 800
    num_iterations: int = 3000
    dataset: str = "grid"
    seed: int = 0
    T: float = 0.2
    chain: ChainConfig = field(default_factory=ChainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    input_dim: int = 2
    hidden_dim: int = 256
    num_layers: int = 5
    generator_weight: float = 1.0
    rk4_steps: int = 8
    rk4_calibrate_every: int = 100
    grid_spacing: float = 4.0
    grid_std: float = 0.17

    def validate(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"must be one of {LOSSES}, got {self.loss!r}", "loss")
        if self.dynamics not in DYNAMICS:
            raise ConfigError(f"must be one of {DYNAMICS}, got {self.dynamics!r}", "dynamics")
        if self.loss == "self_adversarial" and self.dynamics != "euler":
            raise ConfigError("self_adversarial requires euler dynamics", "dynamics")
        if self.dataset not in DATASETS:
            raise ConfigError(f"must be one of {DATASETS}, got {self.dataset!r}", "dataset")
        for name in ("learning_rate", "grid_spacing", "grid_std"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", name)
        for name in ("batch_size", "input_dim", "hidden_dim", "num_layers", "rk4_steps", "rk4_calibrate_every"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                raise ConfigError("must be a positive integer", name)
        if not (isinstance(self.num_iterations, int) and self.num_iterations >= 0):
            raise ConfigError("must be a non-negative integer", "num_iterations")
        if not self.T >= 0:
            raise ConfigError("must be >= 0", "T")
        if not self.noise_scale >= 0:
            raise ConfigError("must be >= 0", "noise_scale")
        if self.dataset == "swiss_roll" and self.input_dim != 2:
            raise ConfigError("toy datasets are 2D", "input_dim")
        return self

    @property
    def mixture(self):
        return MixtureSpec(self.grid_spacing, self.grid_std)

    def sampling_chain(self):
        """Chain used for negatives (noise only for langevin dynamics)."""
        noise = self.noise_scale if self.dynamics == "langevin" else 0.0
        return dataclasses.replace(self.chain, noise_scale=noise)

    def to_flat(self):
        """Flat dict with dotted keys for the nested chain/solver configs."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat):
        top, nested = {}, {"chain": {}, "solver": {}}
        names = {f.name: f for f in dataclasses.fields(cls)}
        sub_types = {"chain": ChainConfig, "solver": SolverConfig}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if tail:
                if head not in nested:
                    raise ConfigError("unknown config key", key)
                allowed = {g.name for g in dataclasses.fields(sub_types[head])}
                if tail not in allowed:
                    raise ConfigError("unknown config key", key)
                nested[head][tail] = value
            elif key in names and key not in nested:
                top[key] = value
            else:
                raise ConfigError("unknown config key", key)
        try:
            chain = ChainConfig(**nested["chain"])
            solver = SolverConfig(**nested["solver"])
        except (TypeError, UsageError) as exc:
            raise ConfigError(str(exc), "chain/solver") from exc
        return cls(chain=chain, solver=solver, **top).validate()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, theta):
        return cls(np.zeros_like(theta), np.zeros_like(theta))


def adam_step(theta, grad, state: AdamState, lr=1e-3):
    """Bias-corrected Adam update of ``theta`` in place; returns (theta, state)."""
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta, state


# ---------------------------------------------------------------------------
# gradients


def ebm_grad(e, data, negatives):
    data = np.asarray(data, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if len(data) == 0 or len(negatives) == 0:
        raise UsageError("data and negatives must be nonempty")
    return e.grad_params(data) - e.grad_params(negatives)


def contrastive_loss(e, data, negatives):
    return float(np.mean(e.energy(data)) - np.mean(e.energy(negatives)))


def generator_grad(e, x0_batch, cfg: ChainConfig, trajectory=None):
    """Gradient of mean_i E_sg(G(x0_i)) through the unrolled Euler chain.

    The outer energy only supplies the adjoint grad_x E(x_K); parameters enter
    through each step x_{k+1} = x_k - (eta/2) grad_x E(x_k). Backward
    recursion with a_K = grad_x E(x_K) / n:

        theta_bar += -(eta/2) d/dtheta <grad_x E(x_k), a_{k+1}>
        a_k        = a_{k+1} - (eta/2) Hess E(x_k) a_{k+1}
    """
    if cfg.noise_scale != 0:
        raise UsageError("generator gradient needs the noise-free chain")
    X0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    if trajectory is None:
        trajectory = run_chain(e, X0, cfg, trajectory=True)
    half = 0.5 * cfg.step_size
    out = np.zeros_like(e.theta)
    a = e.grad_x(trajectory[-1]) / len(X0)
    for k in range(cfg.num_steps - 1, -1, -1):
        x_bar, theta_bar = e.field_vjp(trajectory[k], a)
        out -= half * theta_bar
        a = a - half * x_bar
    return out


def combined_grad(e, data, x0_batch, cfg: ChainConfig, generator_weight=1.0, return_negatives=False):
    """Contrastive gradient plus generator gradient from a single chain per latent."""
    X0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    traj = run_chain(e, X0, cfg, trajectory=True)
    negatives = traj[-1]
    grad = ebm_grad(e, data, negatives)
    if generator_weight != 0:
        grad = grad + generator_weight * generator_grad(e, X0, cfg, trajectory=traj)
    return (grad, negatives) if return_negatives else grad


def flow_nll(e, data, T, n_steps):
    """Mean negative log-likelihood of ``data`` under the RK4-discretized flow."""
    y, ell, _ = rk4_reverse_logdensity(e, data, T, n_steps)
    return float(-np.mean(standard_normal_logpdf(y) + ell))


def flow_mle_grad(e, data, T, n_steps=8, return_loss=False):
    """Gradient of ``flow_nll`` by exact backprop through the RK4 steps."""
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if len(X) == 0:
        raise UsageError("data must be nonempty")
    n = len(X)
    y, ell, stages = rk4_reverse_logdensity(e, X, T, n_steps, record=True)
    loss = float(-np.mean(standard_normal_logpdf(y) + ell))
    out = np.zeros_like(e.theta)
    h = T / n_steps if n_steps else 0.0
    y_bar = y / n
    l_bar = np.full(n, -1.0 / n)
    for y1, y2, y3, y4 in reversed(stages):
        acc = y_bar.copy()
        xb, tb = e.field_vjp(y4, h / 6.0 * y_bar, h / 6.0 * l_bar)
        out += tb
        acc += xb
        xb, tb = e.field_vjp(y3, h / 3.0 * y_bar + h * xb, h / 3.0 * l_bar)
        out += tb
        acc += xb
        xb, tb = e.field_vjp(y2, h / 3.0 * y_bar + 0.5 * h * xb, h / 3.0 * l_bar)
        out += tb
        acc += xb
        xb, tb = e.field_vjp(y1, h / 6.0 * y_bar + 0.5 * h * xb, h / 6.0 * l_bar)
        out += tb
        acc += xb
        y_bar = acc
    return (out, loss) if return_loss else out


def calibrate_rk4_steps(e, data, T, solver: SolverConfig | None = None, start=8):
    """Step count (at least ``start``) whose RK4 endpoint x is within
    ``RK4_MATCH_TOL`` (max abs) of the adaptive solver's.

    The reference solve runs at ``RK4_REFERENCE_TOL`` or the configured
    tolerance, whichever is tighter, so its own error cannot mask the match.
    Misses are refined with the fourth-order error model gap ~ steps^-4
    rather than plain doubling, which could overshoot by up to 2x.
    """
    solver = solver or SolverConfig()
    tol = min(solver.rel_tol, solver.abs_tol, RK4_REFERENCE_TOL)
    ref_cfg = dataclasses.replace(solver, rel_tol=tol, abs_tol=tol)
    res = integrate_flow(e, data, T, ref_cfg, reverse=True)
    ok = res.ok
    if not ok.any():
        return start
    steps = start
    while True:
        try:
            y, _, _ = rk4_reverse_logdensity(e, data[ok], T, steps)
            gap = np.max(np.abs(y - res.x[ok]))
        except DivergenceError:
            gap = np.inf
        if gap <= RK4_MATCH_TOL or steps >= RK4_MAX_STEPS:
            return steps
        if np.isfinite(gap):
            guess = int(np.ceil(1.05 * steps * (gap / RK4_MATCH_TOL) ** 0.25))
            nxt = min(max(guess, steps + 1), 2 * steps)
        else:
            nxt = 2 * steps
        steps = min(nxt, RK4_MAX_STEPS)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    energy: MLPEnergy
    config: TrainConfig
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    rk4_steps: int = 0

    @property
    def iterations(self):
        return len(self.losses)


class TrainingDiverged(DivergenceError):
    """Training hit non-finite values; ``result`` holds the partial trace."""

    def __init__(self, message, step, result):
        super().__init__(message, step=step)
        self.result = result


def _seed_key(seed, *key):
    return [int(seed), *key]


def generate_negatives(e, cfg: TrainConfig, x0, iteration, threads=1):
    if cfg.dynamics == "ode":
        res = integrate_flow(e, x0, cfg.T, cfg.solver, threads=threads)
        res.raise_for_status()
        return res.x
    return run_chains(e, x0, cfg.sampling_chain(), seed=cfg.seed, key=(2, iteration), threads=threads)


def train(cfg: TrainConfig, threads=1, energy=None, callback=None) -> TrainResult:
    """Run ``cfg.num_iterations`` Adam steps of the configured objective.

    Per iteration: draw a data batch and standard-normal latents from
    iteration-keyed seeds, generate negatives with the configured dynamics,
    compute the gradient, step. The logged loss is the contrastive gap
    mean E(data) - mean E(negatives) (NLL for ``flow_mle``).
    """
    cfg.validate()
    if energy is None:
        energy = MLPEnergy(MLPParams.initialize(cfg.input_dim, cfg.hidden_dim, cfg.num_layers, cfg.seed))
    state = AdamState.zeros_like(energy.theta)
    result = TrainResult(energy, cfg, rk4_steps=cfg.rk4_steps)
    mixture = cfg.mixture
    for it in range(cfg.num_iterations):
        t0 = time.perf_counter()
        data = sample_dataset(cfg.dataset, cfg.batch_size, _seed_key(cfg.seed, 0, it), mixture).points
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                if cfg.loss == "flow_mle":
                    if it % cfg.rk4_calibrate_every == 0:
                        result.rk4_steps = max(result.rk4_steps, calibrate_rk4_steps(
                            energy, data, cfg.T, cfg.solver, result.rk4_steps))
                    grad, loss = flow_mle_grad(energy, data, cfg.T, result.rk4_steps, return_loss=True)
                else:
                    x0 = sample_prior(cfg.batch_size, cfg.input_dim, _seed_key(cfg.seed, 1, it)).points
                    if cfg.loss == "self_adversarial":
                        grad, neg = combined_grad(energy, data, x0, cfg.sampling_chain(),
                                                  cfg.generator_weight, return_negatives=True)
                    else:
                        neg = generate_negatives(energy, cfg, x0, it, threads)
                        grad = ebm_grad(energy, data, neg)
                    loss = contrastive_loss(energy, data, neg)
        except GradflowError as exc:
            raise TrainingDiverged(f"training diverged: {exc}", it, result) from exc
        gnorm = float(np.linalg.norm(grad))
        if not (np.isfinite(gnorm) and np.isfinite(loss)):
            raise TrainingDiverged("training diverged: non-finite gradient or loss", it, result)
        adam_step(energy.theta, grad, state, cfg.learning_rate)
        if not np.isfinite(energy.theta).all():
            raise TrainingDiverged("training diverged: non-finite parameters", it, result)
        result.losses.append(loss)
        result.grad_norms.append(gnorm)
        result.wall_ms.append(1e3 * (time.perf_counter() - t0))
        if callback is not None:
            callback(it, result)
        if it % 100 == 0:
            log.debug("iter %d loss %.5f |g| %.3e", it, loss, gnorm)
    return result
