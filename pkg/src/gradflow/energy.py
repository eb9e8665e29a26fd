"""Energy functions E(x) and their exact derivatives.

The MLP energy is a stack of affine layers with swish activations between
them and a scalar output. Derivatives are hand-written for this one layer
type: reverse mode for first order, forward-over-reverse for Hessian-vector
products and the Hessian trace, and a reverse sweep through the
second-order pass for parameter gradients of ``<grad_x E, a>`` and of the
Hessian trace.

Every energy exposes the same input-space interface::

    energy(x), grad_x(x), hvp(x, v), hessian_trace(x), grad_and_trace(x)

with ``x`` either a single point of shape ``(d,)`` or a batch ``(n, d)``.
Parametric energies additionally expose ``theta`` (flat parameter vector),
``grad_params``, ``mixed_second_grad`` and ``field_vjp``; parameter
gradients are flat arrays aligned with ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


def _sigmoid(z):
    s = np.multiply(z, 0.5)
    np.tanh(s, out=s)
    s *= 0.5
    s += 0.5
    return s


def swish(z):
    return z * _sigmoid(z)


def swish_derivatives(z, order=3):
    """Return swish at ``z`` followed by its first ``order`` derivatives."""
    s = _sigmoid(z)
    f = z * s
    out = [f]
    if order >= 1:
        om = 1.0 - s
        d1 = f * om
        d1 += s
        out.append(d1)
    if order >= 2:
        q = s * om
        u = om - s
        zu = z * u
        d2 = zu + 2.0
        d2 *= q
        out.append(d2)
    if order >= 3:
        d3 = zu + 3.0
        d3 *= u
        d3 -= 2.0 * z * q
        d3 *= q
        out.append(d3)
    return tuple(out)


def _flat(T):
    return T.reshape(-1, T.shape[-1])


def _mm(T, M):
    """Matmul on the last axis of a (k, n, m) stack via one 2D BLAS call."""
    T = np.ascontiguousarray(T)
    return (T.reshape(-1, T.shape[-1]) @ M).reshape(T.shape[:-1] + (M.shape[-1],))


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or (dim is not None and X.shape[1] != dim):
        raise UsageError(f"expected points of dimension {dim}, got array of shape {x.shape}")
    return X, single


def _batch_weights(weights, n):
    if weights is None:
        return np.full(n, 1.0 / n) if n else np.zeros(0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise UsageError(f"weights must have shape ({n},), got {w.shape}")
    return w


# ---------------------------------------------------------------------------
# analytic energies (test oracles)


class AnalyticEnergy:
    """Closed-form energies with no trainable parameters."""

    kind = "analytic"
    input_dim: int

    def grad_and_trace(self, x):
        return self.grad_x(x), self.hessian_trace(x)

    def grad_params(self, x, weights=None):
        raise UsageError(f"{type(self).__name__} has no parameters")

    def mixed_second_grad(self, x, v, weights=None):
        raise UsageError(f"{type(self).__name__} has no parameters")

    def field_vjp(self, x, a_grad, a_trace=None):
        raise UsageError(f"{type(self).__name__} has no parameters")


@dataclass(frozen=True)
class Quadratic(AnalyticEnergy):
    """E(x) = scale * |x|^2 / 2."""

    scale: float = 1.0
    input_dim: int = 2
    kind = "quadratic"

    def energy(self, x):
        X, single = _as_batch(x, self.input_dim)
        out = 0.5 * self.scale * np.einsum("ij,ij->i", X, X)
        return out[0] if single else out

    def grad_x(self, x):
        X, single = _as_batch(x, self.input_dim)
        out = self.scale * X
        return out[0] if single else out

    def hvp(self, x, v):
        X, single = _as_batch(x, self.input_dim)
        V = np.broadcast_to(np.asarray(v, dtype=np.float64), X.shape)
        out = self.scale * V
        return out[0] if single else np.array(out)

    def hessian_trace(self, x):
        X, single = _as_batch(x, self.input_dim)
        out = np.full(X.shape[0], self.scale * self.input_dim)
        return out[0] if single else out


@dataclass(frozen=True)
class Linear(AnalyticEnergy):
    """E(x) = w.x + b."""

    w: tuple = (1.0, 2.0)
    b: float = 0.0
    kind = "linear"

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(v) for v in self.w))

    @property
    def input_dim(self):
        return len(self.w)

    def energy(self, x):
        X, single = _as_batch(x, self.input_dim)
        out = X @ np.array(self.w) + self.b
        return out[0] if single else out

    def grad_x(self, x):
        X, single = _as_batch(x, self.input_dim)
        out = np.broadcast_to(np.array(self.w), X.shape).copy()
        return out[0] if single else out

    def hvp(self, x, v):
        X, single = _as_batch(x, self.input_dim)
        out = np.zeros_like(X)
        return out[0] if single else out

    def hessian_trace(self, x):
        X, single = _as_batch(x, self.input_dim)
        out = np.zeros(X.shape[0])
        return out[0] if single else out


# ---------------------------------------------------------------------------
# MLP energy


def layer_shapes(input_dim, hidden_dim, num_layers):
    """(out, in) of each affine layer: d -> hidden -> ... -> hidden -> 1."""
    dims = [input_dim] + [hidden_dim] * (num_layers - 1) + [1]
    return [(dims[i + 1], dims[i]) for i in range(num_layers)]


@dataclass
class MLPParams:
    """Weights and biases of the MLP, stored as one flat float64 vector.

    Layout (also the checkpoint payload): every weight matrix, layer by layer,
    row-major with shape ``(out, in)``, followed by every bias vector.
    """

    input_dim: int
    hidden_dim: int
    num_layers: int
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.num_layers < 1:
            raise UsageError("input_dim, hidden_dim and num_layers must be positive")
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.size,):
            raise UsageError(f"theta must have {self.size} entries, got {self.theta.shape}")

    @property
    def shapes(self):
        return layer_shapes(self.input_dim, self.hidden_dim, self.num_layers)

    @property
    def size(self):
        return sum(o * i + o for o, i in self.shapes)

    def unflatten(self, vec):
        """Split a flat vector shaped like ``theta`` into (weights, biases) views."""
        weights, biases = [], []
        pos = 0
        for o, i in self.shapes:
            weights.append(vec[pos:pos + o * i].reshape(o, i))
            pos += o * i
        for o, _ in self.shapes:
            biases.append(vec[pos:pos + o])
            pos += o
        return weights, biases

    @property
    def weights(self):
        return self.unflatten(self.theta)[0]

    @property
    def biases(self):
        return self.unflatten(self.theta)[1]

    @classmethod
    def initialize(cls, input_dim=2, hidden_dim=256, num_layers=5, seed=0):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        params = cls.zeros(input_dim, hidden_dim, num_layers)
        rng = np.random.default_rng(seed)
        for W in params.weights:
            bound = 1.0 / np.sqrt(W.shape[1])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
        return params

    @classmethod
    def zeros(cls, input_dim=2, hidden_dim=256, num_layers=5):
        size = sum(o * i + o for o, i in layer_shapes(input_dim, hidden_dim, num_layers))
        return cls(input_dim, hidden_dim, num_layers, np.zeros(size))

    def copy(self):
        return MLPParams(self.input_dim, self.hidden_dim, self.num_layers, self.theta.copy())


class MLPEnergy:
    """Swish MLP energy with exact first, second and mixed derivatives."""

    kind = "mlp"

    def __init__(self, params: MLPParams):
        self.params = params

    @property
    def theta(self):
        return self.params.theta

    @property
    def input_dim(self):
        return self.params.input_dim

    def copy(self):
        return MLPEnergy(self.params.copy())

    # -- sweeps --------------------------------------------------------------
    # Tangent quantities carry a leading direction axis: shape (k, n, width).

    def _forward(self, X, order=1):
        """Primal pass; ``acts[j]`` holds swish and its derivatives up to ``order``."""
        W, b = self.params.weights, self.params.biases
        h = [X]
        acts = []
        for j in range(len(W) - 1):
            z = h[-1] @ W[j].T
            z += b[j]
            a = swish_derivatives(z, order)
            acts.append(a)
            h.append(a[0])
        return h, acts

    def _backward(self, X, acts):
        # g[j] = dE/dh[j]; delta[j] = dE/dz[j]
        W = self.params.weights
        L = len(W)
        n = X.shape[0]
        g = [None] * L
        delta = [None] * (L - 1)
        g[L - 1] = np.broadcast_to(W[L - 1][0], (n, W[L - 1].shape[1]))
        for j in range(L - 2, -1, -1):
            delta[j] = acts[j][1] * g[j + 1]
            g[j] = delta[j] @ W[j]
        return g, delta

    def _tangent(self, V, acts, g):
        """Forward-over-reverse sweep along directions ``V`` of shape (k, n, d).

        ``V=None`` means the coordinate basis (k = d). Returns the input
        tangents dz[j], backward tangents dg[j] and ddelta[j]; dg[0] is the
        stack of Hessian-vector products.
        """
        W = self.params.weights
        L = len(W)
        n = g[0].shape[0]
        dz = [None] * (L - 1)
        dh = None
        for j in range(L - 1):
            if j == 0 and V is None:
                dz[0] = np.ascontiguousarray(np.broadcast_to(W[0].T[:, None, :], (self.input_dim, n, W[0].shape[0])))
            else:
                dz[j] = _mm(V if j == 0 else dh, W[j].T)
            dh = acts[j][1] * dz[j]
        k = self.input_dim if V is None else V.shape[0]
        dg = [None] * L
        ddelta = [None] * (L - 1)
        for j in range(L - 2, -1, -1):
            t = acts[j][2] * dz[j] * g[j + 1]
            if dg[j + 1] is not None:
                t += acts[j][1] * dg[j + 1]
            ddelta[j] = t
            dg[j] = _mm(t, W[j])
        if dg[0] is None:
            dg[0] = np.zeros((k, n, self.input_dim))
        return dz, dg, ddelta

    # -- input-space interface -----------------------------------------------

    def energy(self, x):
        X, single = _as_batch(x, self.input_dim)
        W, b = self.params.weights, self.params.biases
        h, _ = self._forward(X, order=0)
        out = h[-1] @ W[-1][0] + b[-1][0]
        return out[0] if single else out

    def grad_x(self, x):
        X, single = _as_batch(x, self.input_dim)
        _, acts = self._forward(X)
        g, _ = self._backward(X, acts)
        out = np.array(g[0])
        return out[0] if single else out

    def hvp(self, x, v):
        X, single = _as_batch(x, self.input_dim)
        V, _ = _as_batch(v, self.input_dim)
        V = np.broadcast_to(V, X.shape)[None]
        _, acts = self._forward(X, order=2)
        g, _ = self._backward(X, acts)
        _, dg, _ = self._tangent(V, acts, g)
        out = dg[0][0]
        return out[0] if single else out

    def grad_and_trace(self, x):
        """Gradient and exact Hessian trace (one HVP per coordinate direction)."""
        X, single = _as_batch(x, self.input_dim)
        _, acts = self._forward(X, order=2)
        g, _ = self._backward(X, acts)
        _, dg, _ = self._tangent(None, acts, g)
        tr = np.einsum("ini->n", dg[0])
        grad = np.array(g[0])
        return (grad[0], tr[0]) if single else (grad, tr)

    def hessian_trace(self, x):
        return self.grad_and_trace(x)[1]

    # -- parameter derivatives -----------------------------------------------

    def grad_params(self, x, weights=None):
        """d E / d theta.

        A single point gives its own gradient; a batch gives the weighted sum
        over points (default weights 1/n, i.e. the batch mean).
        """
        X, single = _as_batch(x, self.input_dim)
        c = np.ones(1) if single else _batch_weights(weights, X.shape[0])
        h, acts = self._forward(X)
        _, delta = self._backward(X, acts)
        out = np.zeros_like(self.theta)
        gW, gb = self.params.unflatten(out)
        L = len(gW)
        gW[L - 1][0] = c @ h[L - 1]
        gb[L - 1][0] = c.sum()
        for j in range(L - 1):
            cd = delta[j] * c[:, None]
            gW[j][...] = cd.T @ h[j]
            gb[j][...] = cd.sum(axis=0)
        return out

    def field_vjp(self, x, a_grad, a_trace=None):
        """Reverse-mode pullback of the field x -> (grad_x E(x), tr Hess E(x)).

        For adjoints ``a_grad`` (n, d) and optional ``a_trace`` (n,), returns
        ``(x_bar, theta_bar)`` where x_bar[i] is the gradient w.r.t. x_i of
        S = sum_i <a_grad[i], grad_x E(x_i)> + a_trace[i] * tr Hess E(x_i)
        and theta_bar is dS/dtheta. With ``a_trace=None`` x_bar is the
        Hessian-vector product H(x_i) a_grad[i].
        """
        X, single = _as_batch(x, self.input_dim)
        A, _ = _as_batch(a_grad, self.input_dim)
        A = np.broadcast_to(A, X.shape)
        n, d = X.shape
        Wt = self.params.weights
        L = len(Wt)
        with_trace = a_trace is not None and L > 1
        h, acts = self._forward(X, order=3 if with_trace else 2)
        g, delta = self._backward(X, acts)
        if with_trace:
            s = np.asarray(a_trace, dtype=np.float64).reshape(n)
            dz, dg, ddelta = self._tangent(None, acts, g)
            dh = [None] + [acts[j][1] * dz[j] for j in range(L - 1)]
            # adjoint of dg[0]: direction i picks component i, scaled by a_trace
            tgb = np.zeros((d, n, d))
            for i in range(d):
                tgb[i, :, i] = s

        out = np.zeros_like(self.theta)
        gW, gbias = self.params.unflatten(out)
        zb = [None] * (L - 1)
        dzb = [None] * (L - 1)

        # pull back through the backward (gradient) sweep, bottom to top
        gb = A
        for j in range(L - 1):
            s1, s2 = acts[j][1], acts[j][2]
            db = gb @ Wt[j].T
            gW[j] += delta[j].T @ gb
            zb[j] = db * s2 * g[j + 1]
            gb_next = db * s1
            if with_trace:
                tdb = _mm(tgb, Wt[j].T)
                gW[j] += _flat(ddelta[j]).T @ _flat(tgb)
                t = acts[j][3] * dz[j] * g[j + 1]
                if dg[j + 1] is not None:
                    t += s2 * dg[j + 1]
                zb[j] += (tdb * t).sum(axis=0)
                dzb[j] = tdb * (s2 * g[j + 1])
                gb_next += (tdb * dz[j]).sum(axis=0) * s2
                tgb = tdb * s1
            gb = gb_next
        gW[L - 1][0] += gb.sum(axis=0)

        # pull back through the forward and tangent sweeps, top to bottom
        for k in range(L - 3, -1, -1):
            s1, s2 = acts[k][1], acts[k][2]
            hb = zb[k + 1] @ Wt[k + 1]
            gW[k + 1] += zb[k + 1].T @ h[k + 1]
            gbias[k + 1] += zb[k + 1].sum(axis=0)
            zb[k] += hb * s1
            if with_trace:
                dhb = _mm(dzb[k + 1], Wt[k + 1])
                gW[k + 1] += _flat(dzb[k + 1]).T @ _flat(dh[k + 1])
                dzb[k] += dhb * s1
                zb[k] += (dhb * dz[k]).sum(axis=0) * s2
        if L > 1:
            gW[0] += zb[0].T @ X
            gbias[0] += zb[0].sum(axis=0)
            x_bar = zb[0] @ Wt[0]
            if with_trace:
                # first-layer tangent is dz[0][i] = W[0][:, i]
                gW[0] += dzb[0].sum(axis=1).T
        else:
            x_bar = np.zeros_like(X)
        return (x_bar[0] if single else x_bar), out

    def mixed_second_grad(self, x, v, weights=None):
        """d/dtheta of <grad_x E(x), v>, weighted-summed over a batch like grad_params."""
        X, single = _as_batch(x, self.input_dim)
        V, _ = _as_batch(v, self.input_dim)
        V = np.broadcast_to(V, X.shape)
        c = np.ones(1) if single else _batch_weights(weights, X.shape[0])
        _, out = self.field_vjp(X, V * c[:, None])
        return out
