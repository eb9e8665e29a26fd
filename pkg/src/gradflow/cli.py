"""Command-line interface: ``gradflow {train,sample,density,loglik,diagnose}``.

Every command writes into a fresh run directory (``--out``, or a new
subdirectory of ``$GRADFLOW_OUT``, default ``./runs``) and finishes by
atomically writing ``manifest.json`` listing each emitted file with its
sha256. Exit codes: 0 ok, 1 bad configuration or usage, 2 numerical
divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DATASETS, MixtureSpec, sample_dataset, sample_prior, write_points_csv
from .dynamics import ChainConfig, invert_euler_chain, lipschitz_estimate, run_chain, run_chains
from .errors import ConfigError, DivergenceError, GradflowError, InvertibilityError, StiffnessError, UsageError
from .evaluation import (DEFAULT_BOUNDS, density_grid, render_heatmap, render_scatter, test_log_likelihood,
                         write_grid_csv, write_grid_json)
from .ode import SolverConfig, solve_forward
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("gradflow")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

# flag name -> flat config key
TRAIN_FLAGS = {
    "loss": "loss", "dynamics": "dynamics", "dataset": "dataset", "seed": "seed",
    "iterations": "num_iterations", "batch_size": "batch_size", "lr": "learning_rate",
    "T": "T", "noise_scale": "noise_scale", "step_size": "chain.step_size",
    "num_steps": "chain.num_steps", "hidden_dim": "hidden_dim", "num_layers": "num_layers",
    "generator_weight": "generator_weight",
}

# seed-key slots, disjoint from training's (seed, 0, it) / (seed, 1, it)
_SAMPLE_KEY = 3
_TEST_KEY = 4
_DIAG_KEY = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run directories and manifests


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _git_id():
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """A per-run output directory plus the bookkeeping for its manifest."""

    def __init__(self, command, out=None, argv=None):
        self.command = command
        self.argv = list(argv or [])
        self.started = _now()
        self.files = []
        if out is not None:
            self.dir = Path(out)
        else:
            root = Path(os.environ.get("GRADFLOW_OUT") or "runs")
            stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
            self.dir = root / f"{command}-{stamp}"
            n = 1
            while self.dir.exists():
                n += 1
                self.dir = root / f"{command}-{stamp}-{n}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = self.dir / name
        self.files.append(name)
        return p

    def write_text(self, name, text):
        p = self.path(name)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, p)
        return p

    def write_json(self, name, obj):
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, status, config=None, seed=None, **extra):
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "config": config,
            "seed": seed,
            "build": {"version": __version__, "git": _git_id()},
            "started": self.started,
            "finished": _now(),
            "files": [{"path": f, "sha256": _sha256(self.dir / f), "bytes": (self.dir / f).stat().st_size}
                      for f in sorted(set(self.files)) if (self.dir / f).exists()],
            **extra,
        }
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.dir / "manifest.json")
        return manifest


# ---------------------------------------------------------------------------
# config handling


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path):
    try:
        flat = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "config") from exc
    if not isinstance(flat, dict):
        raise ConfigError("config must be a JSON object with flat dotted keys", "config")
    return flat


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then the JSON config file, then ``--set``, then named flags."""
    flat = {}
    if args.config:
        flat.update(load_config_file(args.config))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("expected key=value", item)
        flat[key] = _parse_value(value)
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            flat[key] = v
    return TrainConfig.from_flat(flat)


def _checkpoint_meta(cfg: TrainConfig, iteration):
    return {
        "seed": cfg.seed, "iteration": iteration, "T": cfg.T, "loss": cfg.loss,
        "dynamics": cfg.dynamics, "dataset": cfg.dataset, "noise_scale": cfg.noise_scale,
        "chain": dataclasses.asdict(cfg.chain), "grid_spacing": cfg.grid_spacing, "grid_std": cfg.grid_std,
    }


def _header_chain(header, noise_scale=0.0):
    c = header.get("chain") or {}
    return ChainConfig(c.get("step_size", 0.02), c.get("num_steps", 20), noise_scale)


def _header_T(header, override=None):
    if override is not None:
        return override
    if "T" not in header:
        raise UsageError("checkpoint has no stored T; pass --T")
    return float(header["T"])


def _header_mixture(header):
    return MixtureSpec(header.get("grid_spacing", 4.0), header.get("grid_std", 0.17))


def _solver(args):
    return SolverConfig(rel_tol=args.tol, abs_tol=args.tol)


# ---------------------------------------------------------------------------
# commands


def _loss_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "grad_norm"])
    for i, (loss, g) in enumerate(zip(result.losses, result.grad_norms)):
        w.writerow([i, repr(float(loss)), repr(float(g))])
    return buf.getvalue()


def cmd_train(args, run: Run):
    cfg = resolve_train_config(args)
    flat = cfg.to_flat()
    run.write_json("config.json", flat)
    status, code, result = "ok", EXIT_OK, None
    try:
        result = train(cfg, threads=args.threads)
    except TrainingDiverged as exc:
        result = exc.result
        status, code = "diverged", EXIT_DIVERGED
        print(f"gradflow: training diverged at iteration {exc.step}: {exc}", file=sys.stderr)
    iters = len(result.losses)
    run.write_text("loss.csv", _loss_csv(result))
    run.write_json("timing.json", {"wall_ms": [round(t, 3) for t in result.wall_ms],
                                   "total_s": round(sum(result.wall_ms) / 1e3, 3)})
    if status == "ok":
        save_checkpoint(result.energy, run.path("checkpoint.bin"), _checkpoint_meta(cfg, iters))
    run.finish(status, config=flat, seed=cfg.seed, iterations=iters, rk4_steps=result.rk4_steps)
    if status == "ok":
        print(run.dir)
    return code


def cmd_sample(args, run: Run):
    energy, header = load_checkpoint(args.checkpoint)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    d = header.get("input_dim", 2)
    x0 = sample_prior(args.n, d, [args.seed, _SAMPLE_KEY]).points
    if args.dynamics == "ode":
        out = solve_forward(energy, x0, _header_T(header, args.T), _solver(args), args.threads) if args.n else x0
    else:
        noise = header.get("noise_scale", 0.1) if args.dynamics == "langevin" else 0.0
        cfg = _header_chain(header, noise)
        out = run_chains(energy, x0, cfg, args.seed, (_SAMPLE_KEY, 1), args.threads) if args.n else x0
    out = np.asarray(out).reshape(-1, d)
    write_points_csv(out, run.path("samples.csv"))
    if d == 2:
        render_scatter(out, run.path("samples.png"), args.bounds or DEFAULT_BOUNDS)
    params = {"checkpoint": str(args.checkpoint), "n": args.n, "dynamics": args.dynamics, "T": args.T, "tol": args.tol}
    run.finish("ok", config=params, seed=args.seed)
    print(run.dir)
    return EXIT_OK


def cmd_density(args, run: Run):
    energy, header = load_checkpoint(args.checkpoint)
    modes = ["neg_energy", "ebm_normalized", "flow"] if args.mode == "all" else [args.mode]
    bounds = tuple(args.bounds or DEFAULT_BOUNDS)
    summary = {}
    for mode in modes:
        T = _header_T(header, args.T) if mode == "flow" else None
        grid = density_grid(energy, mode, bounds, args.resolution, T, _solver(args), args.threads,
                            _header_mixture(header))
        for w in grid.warnings:
            print(f"gradflow: warning: {mode}: {w}", file=sys.stderr)
        write_grid_csv(grid, run.path(f"density_{mode}.csv"))
        render_heatmap(grid, run.path(f"density_{mode}.png"))
        if mode != "neg_energy":
            render_heatmap(grid, run.path(f"density_{mode}_exp.png"), exponentiate=True)
        write_grid_json(grid, run.path(f"density_{mode}.json"), T=T)
        summary[mode] = {"floored_cells": int(grid.floor_mask.sum()), "log_normalizer": grid.log_normalizer}
    params = {"checkpoint": str(args.checkpoint), "mode": args.mode, "bounds": list(bounds),
              "resolution": args.resolution, "T": args.T, "tol": args.tol}
    run.finish("ok", config=params, summary=summary)
    print(run.dir)
    return EXIT_OK


def cmd_loglik(args, run: Run):
    energy, header = load_checkpoint(args.checkpoint)
    if args.n_test < 1:
        raise UsageError("--n-test must be >= 1")
    T = _header_T(header, args.T)
    test = sample_dataset(args.dataset, args.n_test, [args.seed, _TEST_KEY], _header_mixture(header))
    report = test_log_likelihood(energy, test, T, _solver(args), args.threads)
    out = {"mean_log_likelihood": report.mean, "n_points": report.n_points, "n_failed": report.n_failed,
           "failure_fraction": report.failure_fraction, "dataset": args.dataset, "T": T}
    run.write_json("loglik.json", out)
    params = {"checkpoint": str(args.checkpoint), "dataset": args.dataset, "n_test": args.n_test,
              "T": args.T, "tol": args.tol}
    run.finish("ok", config=params, seed=args.seed)
    print(repr(report.mean))
    return EXIT_OK


def cmd_diagnose(args, run: Run):
    energy, header = load_checkpoint(args.checkpoint)
    cfg = _header_chain(header)
    if args.step_size is not None:
        cfg = ChainConfig(args.step_size, cfg.num_steps, 0.0)
    d = header.get("input_dim", 2)
    x0 = sample_prior(args.n, d, [args.seed, _DIAG_KEY]).points
    traj = run_chain(energy, x0, cfg, trajectory=True)
    lip = lipschitz_estimate(energy, np.concatenate(traj), cfg.step_size)
    try:
        back = invert_euler_chain(energy, traj[-1], cfg)
        roundtrip = float(np.max(np.abs(back - x0)))
    except InvertibilityError as exc:
        roundtrip = None
        print(f"gradflow: warning: {exc}", file=sys.stderr)
    out = {"lipschitz_estimate": lip, "step_size": cfg.step_size, "num_steps": cfg.num_steps,
           "roundtrip_error": roundtrip, "invertible": roundtrip is not None}
    try:
        grid = density_grid(energy, "flow", tuple(args.bounds or DEFAULT_BOUNDS), args.resolution,
                            _header_T(header, args.T), _solver(args), args.threads)
        out["grid_mass"] = grid.mass()
        out["grid_floored_cells"] = int(grid.floor_mask.sum())
    except DivergenceError as exc:
        out["grid_mass"] = None
        print(f"gradflow: warning: {exc}", file=sys.stderr)
    run.write_json("diagnose.json", out)
    params = {"checkpoint": str(args.checkpoint), "n": args.n, "step_size": args.step_size,
              "resolution": args.resolution, "T": args.T, "tol": args.tol}
    run.finish("ok", config=params, seed=args.seed)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _bounds(p):
    p.add_argument("--bounds", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))


def _common(p, seed=True, solver=True):
    p.add_argument("--out", help="run directory (default: new directory under $GRADFLOW_OUT or ./runs)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    if solver:
        p.add_argument("--T", type=float, help="flow horizon (default: from checkpoint)")
        p.add_argument("--tol", type=float, default=1e-5, help="ODE solver rel/abs tolerance")


def build_parser():
    parser = _Parser(prog="gradflow", description="EBMs as gradient-flow generators on 2D toy data.")
    parser.add_argument("--version", action="version", version=f"gradflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train an energy network")
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--loss", choices=["ebm_contrastive", "self_adversarial", "flow_mle"])
    p.add_argument("--dynamics", choices=["langevin", "euler", "ode"])
    p.add_argument("--dataset", choices=list(DATASETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--noise-scale", type=float)
    p.add_argument("--step-size", type=float)
    p.add_argument("--num-steps", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--num-layers", type=int)
    p.add_argument("--generator-weight", type=float)
    _common(p, seed=False, solver=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dynamics", choices=["langevin", "euler", "ode"], default="ode")
    _bounds(p)
    _common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("density", help="evaluate density grids")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=["neg_energy", "ebm_normalized", "flow", "true", "all"], default="all")
    p.add_argument("--resolution", type=int, help="cells per axis (default 200 for flow, 600 otherwise)")
    _bounds(p)
    _common(p, seed=False)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("loglik", help="test log-likelihood under the flow")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", choices=list(DATASETS), default="grid")
    p.add_argument("--n-test", type=int, default=10000)
    _common(p)
    p.set_defaults(func=cmd_loglik)

    p = sub.add_parser("diagnose", help="invertibility and normalization diagnostics")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=256, help="chains used for the Lipschitz/roundtrip checks")
    p.add_argument("--step-size", type=float, help="chain step size (default: from checkpoint)")
    p.add_argument("--resolution", type=int, default=100, help="flow grid cells per axis for the mass check")
    _bounds(p)
    _common(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("gradflow: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(args.command, args.out, argv)
        return args.func(args, run)
    except ConfigError as exc:
        print(f"gradflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, InvertibilityError, StiffnessError) as exc:
        print(f"gradflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, GradflowError, OSError) as exc:
        print(f"gradflow: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
