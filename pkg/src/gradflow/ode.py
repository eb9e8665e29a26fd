"""The continuous generator: gradient-flow ODE x' = -grad E(x).

Integration uses the Dormand-Prince 5(4) pair with FSAL and per-row step
control, so every point in a batch follows its own adaptive trajectory and
its result does not depend on which other points share the batch.

The log-density change along a trajectory obeys d(logp)/dt = tr Hess E(x);
it is integrated jointly with x under the same error controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import standard_normal_logpdf
from .energy import _as_batch
from .errors import DivergenceError, StiffnessError, UsageError
from .parallel import CHUNK_SIZE, map_chunks

OK, DIVERGED, STIFF = 0, 1, 2

# Dormand & Prince (1980) RK5(4)7M
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_HAT = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B_HAT


@dataclass
class SolverConfig:
    rel_tol: float = 1e-5
    abs_tol: float = 1e-5
    initial_step: float | None = None
    max_steps: int = 10000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0
    max_norm: float = 1e6

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise UsageError("solver tolerances must be positive")
        if self.initial_step is not None and not self.initial_step > 0:
            raise UsageError("initial_step must be positive")
        if self.max_steps < 1:
            raise UsageError("max_steps must be positive")


@dataclass
class AugmentedState:
    x: np.ndarray
    delta_logp: float | np.ndarray = 0.0
    t: float = 0.0


@dataclass
class FlowResult:
    """Batched solve outcome; failed rows keep their last state."""

    x: np.ndarray
    delta_logp: np.ndarray
    status: np.ndarray
    steps: np.ndarray = field(repr=False)

    @property
    def ok(self):
        return self.status == OK

    def raise_for_status(self):
        if np.any(self.status == DIVERGED):
            i = int(np.flatnonzero(self.status == DIVERGED)[0])
            raise DivergenceError(f"flow diverged for point {i}", step=int(self.steps[i]))
        if np.any(self.status == STIFF):
            i = int(np.flatnonzero(self.status == STIFF)[0])
            raise StiffnessError(f"step budget exhausted for point {i} after {int(self.steps[i])} steps")


def _rms(a):
    return np.sqrt(np.mean(a * a, axis=1))


def _initial_step(f, y0, f0, T, cfg):
    sc = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = _rms(y0 / sc)
    d1 = _rms(f0 / sc)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, T)
    f1 = f(y0 + h0[:, None] * f0)
    d2 = _rms((f1 - f0) / sc) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
    return np.minimum(np.minimum(100.0 * h0, h1), T)


def dopri5(f, Y0, T, cfg: SolverConfig | None = None, norm_dims=None):
    """Integrate Y' = f(Y) row-wise over [0, T] with per-row adaptive steps.

    ``f`` maps an (m, D) array to (m, D). Local error per accepted step is
    kept below ``abs_tol + rel_tol * |y|`` in every component. ``norm_dims``
    selects the columns checked against ``cfg.max_norm`` (default: all).

    Returns (Y, status, steps).
    """
    cfg = cfg or SolverConfig()
    Y = np.array(Y0, dtype=np.float64, copy=True)
    n = Y.shape[0]
    status = np.zeros(n, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    if T < 0:
        raise UsageError("integration horizon T must be >= 0")
    if T == 0 or n == 0:
        return Y, status, steps
    norm_cols = slice(None) if norm_dims is None else slice(0, norm_dims)
    t = np.zeros(n)
    K1 = f(Y)
    if cfg.initial_step is None:
        h = _initial_step(f, Y, K1, T, cfg)
    else:
        h = np.full(n, min(cfg.initial_step, T))
    bad = ~np.isfinite(K1).all(axis=1)
    status[bad] = DIVERGED

    while True:
        idx = np.flatnonzero((status == OK) & (t < T))
        if idx.size == 0:
            break
        y = Y[idx]
        remaining = T - t[idx]
        last = h[idx] >= remaining
        hh = np.where(last, remaining, h[idx])[:, None]
        k = [K1[idx]]
        for s in range(1, 7):
            ys = y + hh * sum(a * k[j] for j, a in enumerate(_A[s]) if a != 0.0)
            k.append(f(ys))
        y_new = ys  # stage 7 is evaluated at the 5th-order solution (FSAL)
        err = hh * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        with np.errstate(invalid="ignore", over="ignore"):
            ratio = np.max(np.abs(err) / scale, axis=1)
        finite = np.isfinite(ratio) & np.isfinite(k[6]).all(axis=1)
        ratio = np.where(finite, ratio, np.inf)
        accept = ratio <= 1.0

        with np.errstate(divide="ignore"):
            factor = cfg.safety * ratio ** -0.2
        factor = np.clip(np.where(finite, factor, cfg.min_factor), cfg.min_factor, cfg.max_factor)
        factor = np.where(accept, factor, np.minimum(factor, 1.0))

        acc = idx[accept]
        Y[acc] = y_new[accept]
        K1[acc] = k[6][accept]
        t[acc] = np.where(last[accept], T, t[acc] + hh[accept, 0])
        h[idx] = hh[:, 0] * factor
        steps[idx] += 1

        escaped = np.linalg.norm(Y[acc][:, norm_cols], axis=1) > cfg.max_norm
        status[acc[escaped]] = DIVERGED
        tiny = (h[idx] <= 1e-14 * T) & (t[idx] < T)
        status[idx[(steps[idx] >= cfg.max_steps) & (t[idx] < T)]] = STIFF
        status[idx[tiny & (status[idx] == OK)]] = STIFF
    return Y, status, steps


# ---------------------------------------------------------------------------
# energy flows


def vector_field(e, x):
    """The gradient-flow velocity -grad E(x)."""
    return -e.grad_x(x)


def _augmented_field(e, sign):
    d = e.input_dim

    def f(Y):
        g, tr = e.grad_and_trace(Y[:, :d])
        return np.concatenate([sign * g, tr[:, None]], axis=1)

    return f


def integrate_flow(e, x, T, cfg: SolverConfig | None = None, *, reverse=False,
                   logdensity=False, threads=1, chunk_size=CHUNK_SIZE) -> FlowResult:
    """Batched flow solve that reports per-point failures instead of raising.

    Forward integrates x' = -grad E; ``reverse=True`` integrates x' = +grad E
    (the inverse map over the same horizon). With ``logdensity`` the
    accumulated integral of tr Hess E is returned as ``delta_logp``.
    """
    cfg = cfg or SolverConfig()
    X, _ = _as_batch(x, e.input_dim)
    d = X.shape[1]
    sign = 1.0 if reverse else -1.0

    def solve(chunk, _start):
        if logdensity:
            Y0 = np.concatenate([chunk, np.zeros((len(chunk), 1))], axis=1)
            Y, status, steps = dopri5(_augmented_field(e, sign), Y0, T, cfg, norm_dims=d)
            return Y[:, :d], Y[:, d], status, steps
        Y, status, steps = dopri5(lambda Z: sign * e.grad_x(Z), chunk, T, cfg)
        return Y, np.zeros(len(chunk)), status, steps

    if T < 0:
        raise UsageError("integration horizon T must be >= 0")
    parts = map_chunks(solve, X, threads, chunk_size)
    if not parts:
        return FlowResult(np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return FlowResult(*(np.concatenate([p[i] for p in parts]) for i in range(4)))


def _unbatch(res, single, T):
    if single:
        return AugmentedState(res.x[0], float(res.delta_logp[0]), T)
    return AugmentedState(res.x, res.delta_logp, T)


def solve_forward(e, x0, T, cfg: SolverConfig | None = None, threads=1):
    """x(T) under x' = -grad E(x), x(0) = x0."""
    _, single = _as_batch(x0, e.input_dim)
    res = integrate_flow(e, x0, T, cfg, threads=threads)
    res.raise_for_status()
    return res.x[0] if single else res.x


def solve_forward_with_logdensity(e, x0, T, cfg: SolverConfig | None = None, threads=1) -> AugmentedState:
    _, single = _as_batch(x0, e.input_dim)
    res = integrate_flow(e, x0, T, cfg, logdensity=True, threads=threads)
    res.raise_for_status()
    return _unbatch(res, single, T)


def solve_reverse(e, x, T, cfg: SolverConfig | None = None, threads=1) -> AugmentedState:
    """Recover the initial point of a forward trajectory ending at ``x``.

    ``delta_logp`` is the trace integral along the trajectory, so
    log p(x) = log p0(state.x) + state.delta_logp.
    """
    _, single = _as_batch(x, e.input_dim)
    res = integrate_flow(e, x, T, cfg, reverse=True, logdensity=True, threads=threads)
    res.raise_for_status()
    return _unbatch(res, single, T)


def log_likelihood_batch(e, x, T, cfg: SolverConfig | None = None, threads=1):
    """Flow log-density under a standard Gaussian prior; returns (logp, ok)."""
    res = integrate_flow(e, x, T, cfg, reverse=True, logdensity=True, threads=threads)
    logp = standard_normal_logpdf(res.x) + res.delta_logp if len(res.x) else np.zeros(0)
    return np.where(res.ok, logp, np.nan), res.ok


def log_likelihood(e, x, T, cfg: SolverConfig | None = None, threads=1):
    _, single = _as_batch(x, e.input_dim)
    state = solve_reverse(e, x, T, cfg, threads)
    logp = standard_normal_logpdf(np.atleast_2d(state.x)) + state.delta_logp
    return float(logp[0]) if single else logp


# ---------------------------------------------------------------------------
# fixed-step RK4 on the reverse-time augmented system (used for MLE training)


def rk4_reverse_logdensity(e, X, T, n_steps, record=False):
    """Classical RK4 with ``n_steps`` equal steps of y' = grad E(y), l' = tr Hess E(y).

    Returns (y_T, l_T, stages) where ``stages`` (if recorded) holds, per step,
    the four stage inputs used for backpropagation.
    """
    X = np.asarray(X, dtype=np.float64)
    y = X.copy()
    ell = np.zeros(len(X))
    h = T / n_steps if n_steps else 0.0
    stages = []
    for step in range(n_steps):
        g1, s1 = e.grad_and_trace(y)
        y2 = y + 0.5 * h * g1
        g2, s2 = e.grad_and_trace(y2)
        y3 = y + 0.5 * h * g2
        g3, s3 = e.grad_and_trace(y3)
        y4 = y + h * g3
        g4, s4 = e.grad_and_trace(y4)
        if record:
            stages.append((y, y2, y3, y4))
        y = y + h / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        ell = ell + h / 6.0 * (s1 + 2.0 * s2 + 2.0 * s3 + s4)
        if not (np.isfinite(y).all() and np.isfinite(ell).all()):
            raise DivergenceError("RK4 reverse flow produced non-finite values", step=step)
    return y, ell, stages
