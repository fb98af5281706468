"""Command-line driver: load a mesh, flow it toward a target, write results.

Usage::

    harmonic-remesh --input in.obj --target ellipsoid:2,1,1 --solver diffusion \\
        --epsilon 0.03 --iterations 50 --output out.obj --trace trace.csv

Options may also come from a flat ``key=value`` file given by ``--config``;
flags win over file values. ``HR_THREADS`` caps BLAS/OpenMP worker threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics
from .flow import FlowConfig, FlowError, run_flow
from .mesh import MeshError, load_obj, save_obj
from .metric import MetricError
from .targets import (EUCLIDEAN, ISOTROPIC, Ellipsoid, GridHeightfield, GridSDF,
                      ProjectionError, Sphere, TargetError, Torus, named_heightfield)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    input: str
    target: str
    output: str = ""
    mode: str | None = None
    solver: str = "spring"
    alpha: float = 1.0
    epsilon: float = 0.01
    iterations: int = 500
    boundary_weight: float = 1.0
    snapshot_every: int = 0
    trace: str | None = None
    diagnostics: str | None = None
    verbose: bool = False

    def __post_init__(self):
        if not self.input:
            raise ConfigError("missing required option: input")
        if not self.target:
            raise ConfigError("missing required option: target")
        if not self.output:
            self.output = str(Path(self.input).with_name(Path(self.input).stem + "_out.obj"))
        kind_mode = target_mode(self.target)
        if self.mode is None:
            self.mode = kind_mode
        elif self.mode != kind_mode:
            raise ConfigError(f"target {self.target!r} requires mode {kind_mode}, got {self.mode}")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")
        try:
            self.flow_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def flow_config(self) -> FlowConfig:
        return FlowConfig(solver=self.solver, alpha=self.alpha, epsilon=self.epsilon,
                          max_iterations=self.iterations, boundary_weight=self.boundary_weight)


# key -> (type, parser help)
_KEYS = {
    "input": (str, "input triangle mesh (.obj)"),
    "output": (str, "output mesh path (default <input-stem>_out.obj)"),
    "target": (str, "sphere:r | ellipsoid:a,b,c | torus:R,r | gridsdf:path | heightfield:path "
                    "| hf-analytic:name[,params]"),
    "mode": (str, "euclidean or isotropic (inferred from the target when omitted)"),
    "solver": (str, "diffusion or spring (default spring)"),
    "alpha": (float, "anisotropy exponent in [0, 1] (default 1)"),
    "epsilon": (float, "diffusion time step (default 0.01)"),
    "iterations": (int, "iteration budget (default 500)"),
    "boundary_weight": (float, "scale of the boundary curvature terms (default 1)"),
    "snapshot_every": (int, "write <output-stem>_iter<k>.obj every k iterations (0 = off)"),
    "trace": (str, "energy trace CSV path"),
    "diagnostics": (str, "per-face diagnostics CSV path"),
}
_CHOICES = {"mode": (EUCLIDEAN, ISOTROPIC), "solver": ("diffusion", "spring")}


def target_mode(spec: str) -> str:
    kind = spec.split(":", 1)[0]
    if kind in ("sphere", "ellipsoid", "torus", "gridsdf"):
        return EUCLIDEAN
    if kind in ("heightfield", "hf-analytic"):
        return ISOTROPIC
    raise ConfigError(f"unknown target kind {kind!r}")


def _floats(text, n, kind):
    try:
        vals = [float(v) for v in text.split(",")] if text else []
    except ValueError:
        raise ConfigError(f"{kind}: parameters must be numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"{kind}: expected {n} parameter(s), got {len(vals)}")
    return vals


def parse_target(spec: str):
    """Build a target from the ``kind:params`` mini-grammar."""
    kind, _, arg = spec.partition(":")
    if kind == "sphere":
        return Sphere(*_floats(arg, 1, kind))
    if kind == "ellipsoid":
        return Ellipsoid(_floats(arg, 3, kind))
    if kind == "torus":
        return Torus(*_floats(arg, 2, kind))
    if kind == "gridsdf":
        return GridSDF.load(arg)
    if kind == "heightfield":
        return GridHeightfield.load(arg)
    if kind == "hf-analytic":
        name, *params = arg.split(",")
        try:
            return named_heightfield(name, [float(p) for p in params])
        except ValueError as exc:
            raise ConfigError(f"{kind}: {exc}") from None
    raise ConfigError(f"unknown target kind {kind!r}")


def _convert(key, raw):
    typ = _KEYS[key][0]
    try:
        val = typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None
    if key in _CHOICES and val not in _CHOICES[key]:
        raise ConfigError(f"{key}: must be one of {_CHOICES[key]}, got {val!r}")
    return val


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, val.strip())
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="harmonic-remesh",
                                 description="Adapt a triangle mesh to a target surface by "
                                             "shape-operator-weighted harmonic flow.")
    for key, (_, help_) in _KEYS.items():
        # values stay strings so config-file and flag values share one converter
        ap.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=help_)
    ap.add_argument("--config", default=None, help="key=value file; flags override it")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    return ap


def parse_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = read_config_file(args.config) if args.config else {}
    for key in _KEYS:
        raw = getattr(args, key)
        if raw is not None:
            values[key] = _convert(key, raw)
    values["verbose"] = args.verbose
    values.setdefault("input", "")
    values.setdefault("target", "")
    return RunConfig(**values)


def _thread_limit():
    raw = os.environ.get("HR_THREADS")
    if raw in (None, ""):
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"HR_THREADS must be a positive integer, got {raw!r}")
    return n


def _tag(exc):
    if isinstance(exc, MeshError):
        return "mesh"
    if isinstance(exc, (TargetError, ProjectionError)):
        return "targets"
    if isinstance(exc, MetricError):
        return "metric"
    if isinstance(exc, FlowError):
        return "flow"
    if isinstance(exc, ConfigError):
        return "config"
    return "io"


def run(cfg: RunConfig) -> int:
    """Execute one run; returns the process exit status."""
    try:
        mesh = load_obj(cfg.input)
        target = parse_target(cfg.target)
    except FileNotFoundError as exc:
        print(f"harmonic-remesh: io: no such file: {exc.filename}", file=sys.stderr)
        return 1
    except (MeshError, TargetError, ConfigError, OSError) as exc:
        print(f"harmonic-remesh: {_tag(exc)}: {exc}", file=sys.stderr)
        return 1

    out = Path(cfg.output)
    fcfg = cfg.flow_config()

    def snapshot(state):
        if cfg.snapshot_every and state.iteration % cfg.snapshot_every == 0:
            save_obj(mesh, out.with_name(f"{out.stem}_iter{state.iteration}.obj"),
                     positions=state.positions)
        logger.info("iteration %d energy %.6g", state.iteration, state.trace.energy[-1])

    try:
        positions, trace = run_flow(mesh, target, fcfg, snapshot)
    except FlowError as exc:
        if exc.trace is not None and cfg.trace:
            exc.trace.to_csv(cfg.trace)
        print(f"harmonic-remesh: flow: {exc}", file=sys.stderr)
        return 1
    except (ProjectionError, TargetError, MetricError) as exc:
        print(f"harmonic-remesh: {_tag(exc)}: {exc}", file=sys.stderr)
        return 1

    save_obj(mesh, out, positions=positions)
    if cfg.trace:
        trace.to_csv(cfg.trace)
    if cfg.diagnostics:
        write_diagnostics(cfg.diagnostics, mesh, target, positions, fcfg)
    print(f"final energy {trace.energy[-1]:.6g}, iterations {trace.iteration[-1]}, "
          f"flipped faces {trace.flipped_faces[-1]}")
    return 0


def write_diagnostics(path, mesh, target, positions, fcfg: FlowConfig):
    """Per-face CSV plus an aspect-ratio histogram next to it (``<stem>_hist.csv``)."""
    from .flow import evaluate
    metrics, _, _ = evaluate(mesh, target, positions, fcfg)
    dens = diagnostics.face_densities(mesh, metrics, positions, target.mode)
    aspect = diagnostics.aspect_ratios(mesh, metrics, fcfg.alpha, positions, target.mode)
    _, idx = diagnostics.flipped_faces(mesh, target, positions)
    mask = np.zeros(mesh.n_faces, dtype=bool)
    mask[idx] = True
    diagnostics.write_face_csv(path, dens, aspect, mask)
    p = Path(path)
    diagnostics.write_histogram_csv(p.with_name(p.stem + "_hist.csv"), diagnostics.histogram(aspect))


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        nthreads = _thread_limit()
    except ConfigError as exc:
        print(f"harmonic-remesh: config: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if nthreads is None:
        return run(cfg)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=nthreads):
        return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
