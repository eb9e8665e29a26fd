"""Discrete sampling chains: Langevin, noise-free Euler, and Euler-chain inversion.

One step is ``x - (eta/2) grad E(x) + noise_scale * sqrt(eta) * omega``.
``noise_scale=1`` is exact discretized Langevin, ``0`` the noise-free Euler
chain (a residual flow), anything in between the reduced-noise regime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import _as_batch
from .errors import DivergenceError, InvertibilityError, UsageError
from .parallel import CHUNK_SIZE, map_chunks

FIXED_POINT_TOL = 1e-8
FIXED_POINT_MAX_ITER = 100


@dataclass
class ChainConfig:
    step_size: float = 0.02
    num_steps: int = 20
    noise_scale: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise UsageError("step_size must be finite and positive")
        if self.num_steps < 0:
            raise UsageError("num_steps must be >= 0")
        if not (np.isfinite(self.noise_scale) and self.noise_scale >= 0):
            raise UsageError("noise_scale must be finite and >= 0")

    @property
    def horizon(self):
        """Continuous time covered by the chain (each step advances eta/2)."""
        return 0.5 * self.step_size * self.num_steps


def langevin_step(e, x, cfg: ChainConfig, omega=None, step_index=0):
    """One chain step with caller-supplied standard-normal noise ``omega``."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.noise_scale > 0 and omega is None:
        raise UsageError("noise_scale > 0 requires noise omega")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x - 0.5 * cfg.step_size * e.grad_x(x)
        if cfg.noise_scale > 0:
            out = out + cfg.noise_scale * np.sqrt(cfg.step_size) * np.asarray(omega, dtype=np.float64)
    if not np.isfinite(out).all():
        raise DivergenceError("chain produced non-finite values", step=step_index)
    return out


def run_chain(e, x0, cfg: ChainConfig, rng: np.random.Generator | None = None, trajectory=False):
    """Run ``cfg.num_steps`` steps from ``x0`` ((d,) or (n, d)).

    Noise, if any, is drawn from ``rng`` with the shape of ``x0`` at every
    step. With ``trajectory=True`` returns the list of visited states
    x_0..x_K instead of only x_K.
    """
    x = np.array(x0, dtype=np.float64)
    if not np.isfinite(x).all():
        raise UsageError("initial point must be finite")
    if cfg.noise_scale > 0 and rng is None:
        raise UsageError("noisy chain needs an rng")
    states = [x]
    for k in range(cfg.num_steps):
        omega = rng.standard_normal(x.shape) if cfg.noise_scale > 0 else None
        x = langevin_step(e, x, cfg, omega, k)
        if trajectory:
            states.append(x)
    return states if trajectory else x


def stream_rng(seed, key, index):
    """Independent generator for chain ``index`` under the given key."""
    return np.random.default_rng([int(seed), *(int(k) for k in key), int(index)])


def chain_noise(seed, key, n, cfg: ChainConfig, d=2):
    """Per-chain noise, shape (K, n, d); row i comes from its own stream."""
    if cfg.noise_scale == 0 or n == 0:
        return None
    rows = [stream_rng(seed, key, i).standard_normal((cfg.num_steps, d)) for i in range(n)]
    return np.stack(rows, axis=1)


def run_chains(e, X0, cfg: ChainConfig, seed=0, key=(), threads=1, chunk_size=CHUNK_SIZE):
    """Batch of independent chains, chain i seeded from stream (seed, *key, i).

    Output is identical for any ``threads`` value and identical to running
    each chain on its own.
    """
    X0, _ = _as_batch(X0, e.input_dim)
    noise = chain_noise(seed, key, len(X0), cfg, X0.shape[1])

    def run(chunk, start):
        x = chunk.copy()
        for k in range(cfg.num_steps):
            omega = None if noise is None else noise[k, start:start + len(chunk)]
            x = langevin_step(e, x, cfg, omega, k)
        return x

    parts = map_chunks(run, X0, threads, chunk_size)
    return np.concatenate(parts) if parts else X0.copy()


def invert_euler_chain(e, y, cfg: ChainConfig):
    """Invert the noise-free chain by Banach fixed-point iteration, step by step.

    Each step solves x = y_k + (eta/2) grad E(x). Raises InvertibilityError if
    an iteration fails to converge, which signals that the Lipschitz
    condition on (eta/2) grad E is violated near that point.
    """
    if cfg.noise_scale != 0:
        raise UsageError("only the noise-free chain is invertible")
    Y, single = _as_batch(y, e.input_dim)
    half = 0.5 * cfg.step_size
    for k in range(cfg.num_steps - 1, -1, -1):
        x = Y.copy()
        active = np.ones(len(Y), dtype=bool)
        for _ in range(FIXED_POINT_MAX_ITER):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            new = Y[idx] + half * e.grad_x(x[idx])
            delta = np.max(np.abs(new - x[idx]), axis=1)
            x[idx] = new
            active[idx[delta <= FIXED_POINT_TOL]] = False
            if not np.isfinite(new).all():
                break
        if active.any() or not np.isfinite(x).all():
            raise InvertibilityError(
                f"fixed-point inversion of chain step {k} did not converge", step=k)
        Y = x
    return Y[0] if single else Y


def lipschitz_estimate(e, points, step_size, iterations=100):
    """Largest spectral norm of the Jacobian of (eta/2) grad E over ``points``.

    The Jacobian is (eta/2) Hess E, symmetric, so power iteration with exact
    Hessian-vector products converges to its largest-magnitude eigenvalue.
    """
    X, _ = _as_batch(points, e.input_dim)
    if len(X) == 0:
        raise UsageError("need at least one point")
    d = X.shape[1]
    v = np.tile(1.0 + np.arange(d) * 0.6180339887, (len(X), 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    norm = np.zeros(len(X))
    for _ in range(iterations):
        w = e.hvp(X, v)
        norm = np.linalg.norm(w, axis=1)
        nz = norm > 0
        v[nz] = w[nz] / norm[nz, None]
    return float(0.5 * step_size * norm.max())
