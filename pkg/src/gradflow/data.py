"""Toy 2D datasets, the Gaussian latent prior and point-batch serialization."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import UnsupportedError, UsageError

DATASETS = ("grid", "swiss_roll")

# swiss roll: curve radius t in [1.5pi, 4.5pi] scaled to [1.5, 4.5]
SWISS_ROLL_SCALE = 1.0 / np.pi
SWISS_ROLL_JITTER = 0.05


@dataclass
class PointBatch:
    points: np.ndarray
    dataset_id: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise UsageError(f"points must be (n, d), got shape {self.points.shape}")

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture with equal weights on the grid {-s, 0, s}^2."""

    spacing: float = 4.0
    std: float = 0.17
    means: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.std > 0:
            raise UsageError("mixture std must be positive")
        g = np.array([-self.spacing, 0.0, self.spacing])
        means = np.array([(a, b) for a in g for b in g], dtype=np.float64)
        object.__setattr__(self, "means", means)

    @property
    def weights(self):
        return np.full(len(self.means), 1.0 / len(self.means))


def _rng(seed):
    return np.random.default_rng(seed)


def sample_swiss_roll(n, seed=0):
    rng = _rng(seed)
    u = rng.uniform(size=n)
    t = 1.5 * np.pi * (1.0 + 2.0 * u)
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) * SWISS_ROLL_SCALE
    pts = pts + SWISS_ROLL_JITTER * rng.standard_normal((n, 2))
    return PointBatch(pts.reshape(n, 2), "swiss_roll", seed)


def sample_gaussian_grid(n, spec: MixtureSpec | None = None, seed=0):
    spec = spec or MixtureSpec()
    rng = _rng(seed)
    comp = rng.integers(0, len(spec.means), size=n)
    pts = spec.means[comp] + spec.std * rng.standard_normal((n, 2))
    return PointBatch(pts.reshape(n, 2), "grid", seed)


def sample_dataset(name, n, seed=0, spec: MixtureSpec | None = None):
    if name == "grid":
        return sample_gaussian_grid(n, spec, seed)
    if name == "swiss_roll":
        return sample_swiss_roll(n, seed)
    raise UsageError(f"unknown dataset {name!r}; expected one of {DATASETS}")


def sample_prior(n, d=2, seed=0):
    return PointBatch(_rng(seed).standard_normal((n, d)).reshape(n, d), "prior", seed)


def true_log_density(spec, x):
    """Log density of the grid mixture at ``x`` ((2,) or (n, 2))."""
    if not isinstance(spec, MixtureSpec):
        raise UnsupportedError(f"no closed-form density for {spec!r}")
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sq = ((X[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=-1)
    log_comp = -0.5 * sq / spec.std**2 - np.log(2.0 * np.pi * spec.std**2)
    out = logsumexp(log_comp, axis=1, b=spec.weights[None, :])
    return out[0] if np.ndim(x) == 1 else out


def mixture_entropy_mc(spec=None, n=10**6, seed=0):
    """Monte Carlo estimate of the mixture's differential entropy, -E[log p]."""
    spec = spec or MixtureSpec()
    pts = sample_gaussian_grid(n, spec, seed).points
    return float(-np.mean(true_log_density(spec, pts)))


def standard_normal_logpdf(X):
    X = np.atleast_2d(X)
    d = X.shape[1]
    return -0.5 * np.einsum("ij,ij->i", X, X) - 0.5 * d * np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# serialization


def write_points_csv(points, path):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x0", "x1"])
    for p in pts:
        w.writerow([repr(float(p[0])), repr(float(p[1]))])
    Path(path).write_text(buf.getvalue())


def read_points_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x0", "x1"]:
        raise UsageError(f"{path}: expected header x0,x1")
    return np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64).reshape(-1, 2)


def write_points_binary(points, path):
    """uint64 count, uint32 dim, then count*dim little-endian float64 values."""
    pts = np.ascontiguousarray(points, dtype="<f8")
    n, d = pts.shape
    Path(path).write_bytes(struct.pack("<QI", n, d) + pts.tobytes())


def read_points_binary(path):
    raw = Path(path).read_bytes()
    n, d = struct.unpack_from("<QI", raw)
    body = raw[12:]
    if len(body) != 8 * n * d:
        raise UsageError(f"{path}: truncated point file")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
