"""Density grids, the numerical normalizer, test log-likelihood and grid KL.

Three density notions are compared on a rectangular grid of cell centers:

* ``neg_energy``      -E(x), the unnormalized EBM log-density
* ``ebm_normalized``  -E(x) - log Z with Z from midpoint-rule quadrature
* ``flow``            the log-density induced by the gradient flow, one
                      reverse ODE solve per cell

plus ``true`` for the closed-form grid mixture.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.special import logsumexp

from .data import MixtureSpec, true_log_density
from .errors import DivergenceError, UsageError
from .ode import SolverConfig, log_likelihood_batch
from .parallel import map_chunks

MODES = ("neg_energy", "ebm_normalized", "flow", "true")
NORMALIZED_MODES = ("ebm_normalized", "flow", "true")
DEFAULT_BOUNDS = (-6.0, 6.0, -6.0, 6.0)
FLOW_RESOLUTION = 200
ENERGY_RESOLUTION = 600
FLOOR_OFFSET = 10.0
FLOOR_WARN_FRACTION = 0.10
LOGLIK_MAX_FAILURE = 0.01
_ENERGY_CHUNK = 4096


@dataclass
class DensityGrid:
    """Log-density values at cell centers; ``values[i, j]`` is at (xs[i], ys[j])."""

    bounds: tuple
    resolution: tuple
    values: np.ndarray
    mode: str
    floor_mask: np.ndarray = None
    log_normalizer: float | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.floor_mask is None:
            self.floor_mask = np.zeros(self.values.shape, dtype=bool)

    @property
    def xs(self):
        return cell_centers(self.bounds, self.resolution)[0]

    @property
    def ys(self):
        return cell_centers(self.bounds, self.resolution)[1]

    @property
    def cell_area(self):
        return _cell_area(self.bounds, self.resolution)

    def mass(self):
        """Riemann sum of exp(values) over the grid."""
        return float(np.exp(logsumexp(self.values)) * self.cell_area)


def _check_grid_args(bounds, resolution):
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    if not (xmax > xmin and ymax > ymin):
        raise UsageError(f"degenerate bounds {bounds}")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    nx, ny = (int(r) for r in resolution)
    if nx < 1 or ny < 1:
        raise UsageError("resolution must be positive")
    return (xmin, xmax, ymin, ymax), (nx, ny)


def cell_centers(bounds, resolution):
    (xmin, xmax, ymin, ymax), (nx, ny) = _check_grid_args(bounds, resolution)
    xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
    ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
    return xs, ys


def _cell_area(bounds, resolution):
    (xmin, xmax, ymin, ymax), (nx, ny) = _check_grid_args(bounds, resolution)
    return (xmax - xmin) / nx * (ymax - ymin) / ny


def grid_points(bounds, resolution):
    xs, ys = cell_centers(bounds, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _energies(e, pts, threads=1):
    parts = map_chunks(lambda c, _: e.energy(c), pts, threads, _ENERGY_CHUNK)
    return np.concatenate(parts) if parts else np.zeros(0)


def log_normalizer(e, bounds=DEFAULT_BOUNDS, resolution=ENERGY_RESOLUTION, threads=1):
    """log Z by the midpoint rule, accumulated with log-sum-exp."""
    bounds, res = _check_grid_args(bounds, resolution)
    if min(res) < 100:
        raise UsageError("normalizer needs at least 100 cells per axis")
    neg_e = -_energies(e, grid_points(bounds, res), threads)
    if not np.isfinite(neg_e).all():
        raise DivergenceError("energy is non-finite on the normalizer grid")
    out = float(logsumexp(neg_e) + np.log(_cell_area(bounds, res)))
    if not np.isfinite(out):
        raise DivergenceError("normalizer is not finite")
    return out


def ebm_normalizer(e, bounds=DEFAULT_BOUNDS, resolution=ENERGY_RESOLUTION, threads=1):
    """Z = integral of exp(-E) over ``bounds`` (midpoint rule)."""
    logz = log_normalizer(e, bounds, resolution, threads)
    with np.errstate(over="ignore"):
        z = float(np.exp(logz))
    if not np.isfinite(z):
        raise DivergenceError(f"normalizer overflows float64 (log Z = {logz:.1f})")
    return z


def density_grid(model, mode, bounds=DEFAULT_BOUNDS, resolution=None, T=None,
                 solver: SolverConfig | None = None, threads=1, spec: MixtureSpec | None = None) -> DensityGrid:
    """Evaluate one density notion on the grid.

    ``model`` is an energy for ``neg_energy``/``ebm_normalized``/``flow`` and
    ignored for ``true`` (which uses ``spec``). Cells whose reverse solve
    fails in ``flow`` mode get min(valid) - 10 and are flagged in
    ``floor_mask``; more than 10% floored cells adds a warning.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    if resolution is None:
        resolution = FLOW_RESOLUTION if mode == "flow" else ENERGY_RESOLUTION
    bounds, res = _check_grid_args(bounds, resolution)
    pts = grid_points(bounds, res)
    grid = DensityGrid(bounds, res, np.zeros(res), mode)
    if mode == "true":
        values = true_log_density(spec or MixtureSpec(), pts)
    elif mode == "flow":
        if T is None:
            raise UsageError("flow mode needs the horizon T")
        parts = map_chunks(lambda c, _: log_likelihood_batch(model, c, T, solver)[0], pts, threads)
        values = np.concatenate(parts)
        failed = ~np.isfinite(values)
        if failed.all():
            raise DivergenceError("every reverse solve failed")
        values[failed] = np.min(values[~failed]) - FLOOR_OFFSET
        grid.floor_mask = failed.reshape(res)
        if failed.mean() > FLOOR_WARN_FRACTION:
            grid.warnings.append(f"{failed.mean():.1%} of cells floored (reverse solve failed)")
    else:
        values = -_energies(model, pts, threads)
        if mode == "ebm_normalized":
            if min(res) < 100:
                raise UsageError("ebm_normalized needs at least 100 cells per axis")
            grid.log_normalizer = float(logsumexp(values) + np.log(_cell_area(bounds, res)))
            values = values - grid.log_normalizer
    grid.values = values.reshape(res)
    return grid


@dataclass
class LoglikReport:
    mean: float
    n_points: int
    n_failed: int

    @property
    def failure_fraction(self):
        return self.n_failed / self.n_points if self.n_points else 0.0


def test_log_likelihood(model, test, T, solver: SolverConfig | None = None, threads=1) -> LoglikReport:
    """Mean flow log-likelihood over a test batch; failed solves are excluded
    and counted; more than 1% failures raises DivergenceError."""
    pts = getattr(test, "points", test)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if len(pts) == 0:
        raise UsageError("test batch is empty")
    parts = map_chunks(lambda c, _: log_likelihood_batch(model, c, T, solver)[0], pts, threads)
    logp = np.concatenate(parts)
    ok = np.isfinite(logp)
    report = LoglikReport(float(np.mean(logp[ok])) if ok.any() else float("nan"), len(pts), int((~ok).sum()))
    if report.failure_fraction > LOGLIK_MAX_FAILURE:
        raise DivergenceError(f"{report.n_failed}/{report.n_points} reverse solves failed")
    return report


test_log_likelihood.__test__ = False  # keep pytest from collecting it


def grid_kl(p_grid: DensityGrid, q_grid: DensityGrid) -> float:
    """KL(p || q) between two normalized grids, each renormalized to sum to 1."""
    for g in (p_grid, q_grid):
        if g.mode not in NORMALIZED_MODES:
            raise UsageError(f"grid_kl needs normalized grids, got mode {g.mode!r}")
    if tuple(p_grid.bounds) != tuple(q_grid.bounds) or tuple(p_grid.resolution) != tuple(q_grid.resolution):
        raise UsageError("grids must share bounds and resolution")
    lp = p_grid.values.ravel() - logsumexp(p_grid.values)
    lq = q_grid.values.ravel() - logsumexp(q_grid.values)
    p = np.exp(lp)
    return float(max(np.sum(p * (lp - lq)), 0.0))


# ---------------------------------------------------------------------------
# serialization and images


def write_grid_csv(grid: DensityGrid, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "logp", "floored"])
    xs, ys = grid.xs, grid.ys
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(grid.values[i, j])), int(grid.floor_mask[i, j])])
    Path(path).write_text(buf.getvalue())


def grid_metadata(grid: DensityGrid, **extra):
    return {
        "mode": grid.mode,
        "bounds": list(grid.bounds),
        "resolution": list(grid.resolution),
        "log_normalizer": grid.log_normalizer,
        "normalizer": None if grid.log_normalizer is None else float(np.exp(grid.log_normalizer)),
        "mass": grid.mass() if grid.mode in NORMALIZED_MODES else None,
        "floored_cells": int(grid.floor_mask.sum()),
        "warnings": list(grid.warnings),
        **extra,
    }


def write_grid_json(grid: DensityGrid, path, **extra):
    Path(path).write_text(json.dumps(grid_metadata(grid, **extra), indent=2, sort_keys=True) + "\n")


# viridis sampled at 9 evenly spaced points
_VIRIDIS = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=np.float64)


def colormap(u):
    """Map values in [0, 1] to uint8 RGB by piecewise-linear viridis."""
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0) * (len(_VIRIDIS) - 1)
    lo = np.minimum(np.floor(u).astype(int), len(_VIRIDIS) - 2)
    frac = (u - lo)[..., None]
    rgb = _VIRIDIS[lo] * (1.0 - frac) + _VIRIDIS[lo + 1] * frac
    return np.round(rgb).astype(np.uint8)


def render_heatmap(grid: DensityGrid, path, exponentiate=False):
    """PNG heatmap (x to the right, y up). Floored cells take the lowest color."""
    vals = np.exp(grid.values) if exponentiate else grid.values
    valid = vals[~grid.floor_mask]
    lo, hi = (float(valid.min()), float(valid.max())) if valid.size else (0.0, 0.0)
    u = np.zeros_like(vals) if hi <= lo else (vals - lo) / (hi - lo)
    u[grid.floor_mask] = 0.0
    img = colormap(u.T[::-1])
    Image.fromarray(img, "RGB").save(path, format="PNG")


def render_scatter(points, path, bounds=DEFAULT_BOUNDS, size=400):
    """PNG scatter: 2x2-pixel dark dots on a white canvas."""
    (xmin, xmax, ymin, ymax), _ = _check_grid_args(bounds, 1)
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts):
        col = np.floor((pts[:, 0] - xmin) / (xmax - xmin) * size).astype(int)
        row = np.floor((ymax - pts[:, 1]) / (ymax - ymin) * size).astype(int)
        for dr in (0, 1):
            for dc in (0, 1):
                r, c = row + dr, col + dc
                keep = (r >= 0) & (r < size) & (c >= 0) & (c < size)
                img[r[keep], c[keep]] = (31, 58, 147)
    Image.fromarray(img, "RGB").save(path, format="PNG")
