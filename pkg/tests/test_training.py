import dataclasses

import numpy as np
import pytest

from gradflow.dynamics import ChainConfig, run_chain
from gradflow.energy import MLPEnergy, MLPParams
from gradflow.errors import ConfigError, UsageError
from gradflow.ode import SolverConfig, integrate_flow
from gradflow.training import (AdamState, TrainConfig, TrainingDiverged, adam_step, calibrate_rk4_steps,
                               combined_grad, contrastive_loss, ebm_grad, flow_mle_grad, flow_nll, generator_grad,
                               train)

from conftest import small_mlp


def fd_theta(e, f, h=1e-6):
    theta = e.theta.copy()
    out = np.zeros_like(theta)
    for i in range(theta.size):
        e.theta[:] = theta
        e.theta[i] += h
        fp = f()
        e.theta[:] = theta
        e.theta[i] -= h
        fm = f()
        out[i] = (fp - fm) / (2 * h)
    e.theta[:] = theta
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class ScalarQuadratic:
    """E_theta(x) = theta |x|^2 / 2 with one trainable parameter; a hand-written oracle."""

    input_dim = 2

    def __init__(self, theta):
        self.theta = np.array([float(theta)])

    def energy(self, x):
        X = np.atleast_2d(x)
        return 0.5 * self.theta[0] * np.sum(X ** 2, axis=1)

    def grad_x(self, x):
        return self.theta[0] * np.asarray(x, dtype=float)

    def grad_params(self, x, weights=None):
        X = np.atleast_2d(x)
        return np.array([np.mean(0.5 * np.sum(X ** 2, axis=1))])

    def field_vjp(self, x, a_grad, a_trace=None):
        X, A = np.atleast_2d(x), np.atleast_2d(a_grad)
        return self.theta[0] * A, np.array([np.sum(A * X)])


# ---- Adam


def test_adam_first_step():
    theta = np.zeros(5)
    st = AdamState.zeros_like(theta)
    adam_step(theta, np.ones(5), st, 1e-3)
    np.testing.assert_allclose(theta, -1e-3 / (1 + 1e-8), rtol=1e-12)
    assert st.step == 1


def test_adam_zero_gradient_and_two_steps():
    theta = np.array([1.0, -2.0])
    st = AdamState.zeros_like(theta)
    adam_step(theta, np.zeros(2), st)
    np.testing.assert_array_equal(theta, [1.0, -2.0])
    theta = np.array([0.0])
    st = AdamState.zeros_like(theta)
    g, lr, b1, b2, eps = 0.5, 0.01, 0.9, 0.999, 1e-8
    m = v = 0.0
    ref = 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        adam_step(theta, np.array([g]), st, lr)
    assert theta[0] == pytest.approx(ref, rel=1e-14)
    assert st.m[0] == pytest.approx(m) and st.v[0] == pytest.approx(v)


# ---- contrastive gradient


def test_ebm_grad_single_linear_layer():
    e = MLPEnergy(MLPParams(2, 1, 1, np.array([0.3, -0.2, 0.1])))
    data = np.array([[1.0, 2.0], [3.0, 0.0]])
    neg = np.array([[0.0, 1.0], [-1.0, 1.0], [2.0, 2.0]])
    g = ebm_grad(e, data, neg)
    np.testing.assert_allclose(g[:2], data.mean(0) - neg.mean(0), atol=1e-15)
    assert g[2] == pytest.approx(0.0, abs=1e-15)
    assert np.all(ebm_grad(small_mlp(0), data, data) == 0)


@pytest.mark.parametrize("seed", range(20))
def test_ebm_grad_fd(seed):
    e = small_mlp(seed, hidden=5)
    rng = np.random.default_rng(seed)
    data, neg = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    fd = fd_theta(e, lambda: contrastive_loss(e, data, neg))
    assert rel_err(ebm_grad(e, data, neg), fd) < 1e-5


# ---- generator and combined gradients


def test_generator_grad_scalar_toy():
    """J(theta) = theta_sg |(1 - 0.05 theta) x0|^2 / 2, so dJ/dtheta = 0.95 * (-0.05) = -0.0475 at theta=1."""
    e = ScalarQuadratic(1.0)
    g = generator_grad(e, np.array([[1.0, 0.0]]), ChainConfig(0.1, 1, 0.0))
    assert g[0] == pytest.approx(-0.0475, abs=1e-15)
    # independent check: central difference of the closed form
    J = lambda t: 0.5 * (1 - 0.05 * t) ** 2
    assert g[0] == pytest.approx((J(1 + 1e-6) - J(1 - 1e-6)) / 2e-6, abs=1e-9)


def test_combined_grad_scalar_toy():
    e = ScalarQuadratic(1.0)
    x = np.array([[1.0, 0.0]])
    g = combined_grad(e, x, x, ChainConfig(0.1, 1, 0.0))
    assert g[0] == pytest.approx(0.5 - 0.45125 - 0.0475, abs=1e-14)


def test_generator_grad_zero_steps_is_zero():
    e = small_mlp(1)
    assert np.all(generator_grad(e, np.ones((3, 2)), ChainConfig(0.1, 0)) == 0)
    with pytest.raises(UsageError):
        generator_grad(e, np.ones((3, 2)), ChainConfig(0.1, 2, 0.5))


@pytest.mark.parametrize("seed", range(20))
def test_generator_grad_frozen_fd(seed):
    e = small_mlp(seed, hidden=5)
    frozen = e.copy()
    cfg = ChainConfig(0.1, 3, 0.0)
    x0 = np.random.default_rng(seed).normal(size=(4, 2))
    fd = fd_theta(e, lambda: float(np.mean(frozen.energy(run_chain(e, x0, cfg)))))
    assert rel_err(generator_grad(e, x0, cfg), fd) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_combined_grad_three_term_fd(seed):
    e = small_mlp(seed, hidden=5)
    cfg = ChainConfig(0.1, 3, 0.0)
    rng = np.random.default_rng(100 + seed)
    data, x0 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    neg = run_chain(e, x0, cfg)
    frozen = e.copy()
    t1 = fd_theta(e, lambda: float(np.mean(e.energy(data))))
    t2 = fd_theta(e, lambda: float(np.mean(e.energy(neg))))
    t3 = fd_theta(e, lambda: float(np.mean(frozen.energy(run_chain(e, x0, cfg)))))
    assert rel_err(combined_grad(e, data, x0, cfg), t1 - t2 + t3) < 1e-4


def test_combined_grad_decomposition():
    e = small_mlp(3)
    cfg = ChainConfig(0.05, 4, 0.0)
    rng = np.random.default_rng(0)
    data, x0 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    g0, neg = combined_grad(e, data, x0, cfg, generator_weight=0.0, return_negatives=True)
    assert np.array_equal(g0, ebm_grad(e, data, neg))
    gK0 = combined_grad(e, data, x0, ChainConfig(0.05, 0, 0.0))
    assert np.array_equal(gK0, ebm_grad(e, data, x0))


def test_combined_grad_generates_one_trajectory():
    class Counting:
        def __init__(self, inner):
            self.inner, self.grad_calls, self.vjp_calls = inner, 0, 0
            self.input_dim, self.theta = inner.input_dim, inner.theta

        def grad_x(self, x):
            self.grad_calls += 1
            return self.inner.grad_x(x)

        def field_vjp(self, *a):
            self.vjp_calls += 1
            return self.inner.field_vjp(*a)

        def grad_params(self, *a, **k):
            return self.inner.grad_params(*a, **k)

    c = Counting(small_mlp(2))
    combined_grad(c, np.zeros((5, 2)), np.ones((5, 2)), ChainConfig(0.05, 7, 0.0))
    # 7 chain steps + the outer adjoint grad at x_K; backward needs one pullback per step
    assert c.grad_calls == 8 and c.vjp_calls == 7


# ---- flow maximum likelihood


@pytest.mark.parametrize("seed", range(20))
def test_flow_mle_grad_fd(seed):
    e = small_mlp(seed, hidden=6, layers=2)
    data = np.random.default_rng(seed).normal(size=(4, 2))
    g, loss = flow_mle_grad(e, data, 0.2, 4, return_loss=True)
    assert loss == pytest.approx(flow_nll(e, data, 0.2, 4), rel=1e-13)
    fd = fd_theta(e, lambda: flow_nll(e, data, 0.2, 4), h=1e-5)
    assert rel_err(g, fd) < 1e-3


def test_flow_mle_linear_energy_is_translated_prior_nll():
    """One affine layer: zero Hessian, so the reverse flow is x + T w."""
    w = np.array([0.4, -0.7])
    e = MLPEnergy(MLPParams(2, 1, 1, np.array([*w, 0.2])))
    data = np.array([[0.5, 1.0], [-1.0, 0.3]])
    T = 0.2
    y = data + T * w
    nll = np.mean(0.5 * np.sum(y ** 2, 1) + np.log(2 * np.pi))
    g, loss = flow_mle_grad(e, data, T, 3, return_loss=True)
    assert loss == pytest.approx(nll, rel=1e-13)
    np.testing.assert_allclose(g, [*(T * y.mean(0)), 0.0], atol=1e-14)


def test_calibrate_rk4_steps_meets_tolerance():
    from gradflow.ode import rk4_reverse_logdensity
    e = small_mlp(5, hidden=16, scale=4.0)
    data = np.random.default_rng(0).normal(size=(10, 2))
    ref = integrate_flow(e, data, 0.5, SolverConfig(1e-10, 1e-10), reverse=True)
    gap = lambda k: np.max(np.abs(rk4_reverse_logdensity(e, data, 0.5, k)[0] - ref.x))
    k = calibrate_rk4_steps(e, data, 0.5, SolverConfig(), start=1)
    assert gap(k) <= 1e-4
    kmin = next(j for j in range(1, 1025) if gap(j) <= 1e-4)
    assert kmin <= k <= 2 * kmin
    assert calibrate_rk4_steps(e, data, 0.5, SolverConfig(), start=kmin + 3) == kmin + 3


# ---- config and loop


def tiny(**kw):
    base = dict(batch_size=16, num_iterations=4, hidden_dim=8, num_layers=3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation_names_field():
    with pytest.raises(ConfigError) as info:
        TrainConfig(loss="nope").validate()
    assert info.value.field == "loss"
    with pytest.raises(ConfigError) as info:
        TrainConfig(loss="self_adversarial", dynamics="ode").validate()
    assert info.value.field == "dynamics"
    with pytest.raises(ConfigError) as info:
        TrainConfig(batch_size=0).validate()
    assert info.value.field == "batch_size"
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"chain.bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"chain.step_size": -1.0})


def test_config_flat_roundtrip():
    cfg = tiny(loss="self_adversarial", dynamics="euler", chain=ChainConfig(0.04, 10, 0.0))
    flat = cfg.to_flat()
    assert flat["chain.step_size"] == 0.04 and flat["solver.rel_tol"] == 1e-5
    assert TrainConfig.from_flat(flat) == cfg


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.num_iterations, cfg.T) == (1e-3, 800, 3000, 0.2)
    assert (cfg.hidden_dim, cfg.num_layers) == (256, 5)
    assert cfg.chain.horizon == pytest.approx(cfg.T)


def test_zero_iterations_returns_initialization():
    cfg = tiny(num_iterations=0)
    res = train(cfg)
    assert np.array_equal(res.energy.theta, MLPParams.initialize(2, 8, 3, 1).theta)
    assert res.losses == []


@pytest.mark.parametrize("loss,dynamics", [("ebm_contrastive", "ode"), ("ebm_contrastive", "langevin"),
                                           ("ebm_contrastive", "euler"), ("self_adversarial", "euler"),
                                           ("flow_mle", "ode")])
def test_train_reproducible(loss, dynamics):
    cfg = tiny(loss=loss, dynamics=dynamics, rk4_steps=2)
    a, b = train(cfg), train(dataclasses.replace(cfg))
    assert a.losses == b.losses and a.grad_norms == b.grad_norms
    assert np.array_equal(a.energy.theta, b.energy.theta)
    assert len(a.losses) == 4 and np.all(np.isfinite(a.losses))


def test_train_threads_do_not_change_results():
    cfg = tiny(dynamics="langevin", batch_size=300, num_iterations=2, noise_scale=1.0)
    a, b = train(cfg, threads=1), train(cfg, threads=3)
    assert a.losses == b.losses and np.array_equal(a.energy.theta, b.energy.theta)


def test_divergence_reports_iteration():
    cfg = tiny(dynamics="euler", chain=ChainConfig(1e200, 3, 0.0), num_iterations=3)
    with pytest.raises(TrainingDiverged) as info:
        train(cfg)
    assert info.value.step == 0
    assert info.value.result.iterations == 0
