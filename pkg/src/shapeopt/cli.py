"""Command line driver: config loading, benchmark runs, and result files.

Config files are flat ``key = value`` lines with dotted section names;
``#`` starts a comment. Unset keys take the defaults in ``SCHEMA``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .fem import LinearSolveError
from .flow import BoundaryConditions, FlowDiscretization, FluidParams, NewtonError, NewtonParams, objective, solve_state
from .geometry import DomainSpec, GeometryError, Point2, ShapeGenerator, build_benchmark_shapes, write_boundary_csv
from .mesh import MeshError, generate_mesh, mesh_quality, write_msh, write_vtk
from .optimize import (
    ALConfig,
    ArmijoParams,
    ElasticityParams,
    HistoryRecord,
    Iterate,
    OptimizationError,
    OptimizationResult,
    OptimizerConfig,
    optimize,
)

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iter", "j", "j_al", "h1_norm", "alpha", "infeasibility", "event")


class ConfigError(ValueError):
    pass


def _pair(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return float(parts[0]), float(parts[1])


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _int(text: str) -> int:
    return int(text.strip())


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    requirement: str = ""
    help: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 < v < 1


SCHEMA: dict[str, Key] = {
    "domain.lower": Key(_pair, (0.0, 0.0), help="hold-all lower-left corner"),
    "domain.upper": Key(_pair, (1.0, 1.0), help="hold-all upper-right corner"),
    "mesh.h": Key(float, 0.023, _pos, "> 0", "target mesh size"),
    "shape1.center": Key(_pair, (0.3, 0.3)),
    "shape1.radius": Key(float, 0.1, _pos, "> 0"),
    "shape1.kinks": Key(_int, 12, _nonneg, ">= 0", "kink nodes (0: smooth-looking polygon)"),
    "shape2.center": Key(_pair, (0.45, 0.75)),
    "shape2.radius": Key(float, 0.1, _pos, "> 0"),
    "shape2.kinks": Key(_int, 0, _nonneg, ">= 0"),
    "l_1": Key(_int, 48, _nonneg, ">= 0", "factors of shape 1 beyond its kink count"),
    "l_2": Key(_int, 60, _nonneg, ">= 0", "factors of shape 2 beyond its kink count"),
    "fluid.mu": Key(float, 1.81, _pos, "> 0"),
    "fluid.rho": Key(float, 1.2e5, _nonneg, ">= 0"),
    "bc.inflow_coefficient": Key(float, -0.08421, help="a in v = (a y (y - 1), 0) on the left side"),
    "newton.tol": Key(float, 1e-10, _pos, "> 0"),
    "newton.max_iter": Key(_int, 50, _pos, ">= 1"),
    "newton.rho_start": Key(float, 1e3, _pos, "> 0"),
    "newton.ramp": Key(float, 10**0.5, lambda v: v > 1, "> 1"),
    "armijo.initial_step": Key(float, 0.0125, _pos, "> 0"),
    "armijo.sigma": Key(float, 1e-4, _unit, "in (0, 1)"),
    "armijo.backtrack": Key(float, 0.1, _unit, "in (0, 1)"),
    "armijo.min_step": Key(float, 1e-8, _pos, "> 0"),
    "elasticity.mu": Key(float, 1.0, _pos, "> 0"),
    "elasticity.lambda": Key(float, 0.0, _nonneg, ">= 0"),
    "optimizer.tol": Key(float, 1e-4, _pos, "> 0", "H1 stopping tolerance on the deformation"),
    "optimizer.max_inner": Key(_int, 2000, _pos, ">= 1"),
    "optimizer.max_al": Key(_int, 20, _pos, ">= 1"),
    "optimizer.max_total_iters": Key(_opt_int, None, lambda v: v is None or v >= 1, ">= 1"),
    "optimizer.remesh_quality": Key(float, 0.2, lambda v: 0 <= v < 1, "in [0, 1)"),
    "optimizer.boundary_only": Key(_bool, True),
    "al.c0": Key(float, 100.0, _pos, "> 0"),
    "al.growth": Key(float, 10.0, lambda v: v >= 1, ">= 1"),
    "al.tau": Key(float, 0.1, _unit, "in (0, 1)"),
    "al.feasibility_tol": Key(float, 1e-6, _pos, "> 0"),
    "al.area_fraction": Key(float, 1.0, _pos, "> 0"),
    "al.shape1.bary_lower": Key(_pair, (-0.03, -0.05)),
    "al.shape1.bary_upper": Key(_pair, (0.04, 0.03)),
    "al.shape2.bary_lower": Key(_pair, (-0.075, -0.02)),
    "al.shape2.bary_upper": Key(_pair, (0.02, 0.05)),
    "output.dir": Key(str, "shapeopt-output"),
    "output.snapshot_interval": Key(_int, 50, _pos, ">= 1"),
    "run.seed": Key(_int, 0),
}


@dataclass(frozen=True)
class RunConfig:
    domain: DomainSpec
    fluid: FluidParams
    bcs: BoundaryConditions
    newton: NewtonParams
    armijo: ArmijoParams
    elasticity: ElasticityParams
    optimizer: OptimizerConfig
    al: ALConfig
    output_dir: Path
    snapshot_interval: int
    seed: int
    values: dict


def parse_config_text(text: str) -> dict[str, Any]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key '{key}' (line {lineno})")
        raw[key] = value
    values = {}
    for key, spec in SCHEMA.items():
        if key in raw:
            try:
                values[key] = spec.parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse '{raw[key]}' ({exc})") from exc
        else:
            values[key] = spec.default
        if spec.check is not None and not spec.check(values[key]):
            raise ConfigError(f"{key} must be {spec.requirement}")
    return values


def _generator(center, radius, kinks, extra, name) -> ShapeGenerator:
    if kinks == 0:
        return ShapeGenerator(Point2(*center), radius, kinks=0, pieces=extra)
    if extra % kinks:
        raise ConfigError(f"{name} must be a multiple of the kink count {kinks}")
    return ShapeGenerator(Point2(*center), radius, kinks=kinks, pieces=1 + extra // kinks)


def build_run_config(values: dict[str, Any]) -> RunConfig:
    v = values
    try:
        gens = (
            _generator(v["shape1.center"], v["shape1.radius"], v["shape1.kinks"], v["l_1"], "l_1"),
            _generator(v["shape2.center"], v["shape2.radius"], v["shape2.kinks"], v["l_2"], "l_2"),
        )
        domain = DomainSpec(Point2(*v["domain.lower"]), Point2(*v["domain.upper"]), gens, v["mesh.h"])
        cfg = RunConfig(
            domain=domain,
            fluid=FluidParams(v["fluid.mu"], v["fluid.rho"]),
            bcs=BoundaryConditions(inflow_coefficient=v["bc.inflow_coefficient"]),
            newton=NewtonParams(
                tol=v["newton.tol"], max_iter=v["newton.max_iter"], rho_start=v["newton.rho_start"], ramp=v["newton.ramp"]
            ),
            armijo=ArmijoParams(v["armijo.initial_step"], v["armijo.sigma"], v["armijo.backtrack"], v["armijo.min_step"]),
            elasticity=ElasticityParams(v["elasticity.mu"], v["elasticity.lambda"]),
            optimizer=OptimizerConfig(
                tol=v["optimizer.tol"],
                max_inner=v["optimizer.max_inner"],
                max_al=v["optimizer.max_al"],
                remesh_quality=v["optimizer.remesh_quality"],
                penalty_growth=v["al.growth"],
                tau=v["al.tau"],
                feasibility_tol=v["al.feasibility_tol"],
                max_total_iters=v["optimizer.max_total_iters"],
                boundary_only=v["optimizer.boundary_only"],
            ),
            al=ALConfig(
                penalty=v["al.c0"],
                area_fraction=v["al.area_fraction"],
                bary_lower=(v["al.shape1.bary_lower"], v["al.shape2.bary_lower"]),
                bary_upper=(v["al.shape1.bary_upper"], v["al.shape2.bary_upper"]),
            ),
            output_dir=Path(v["output.dir"]),
            snapshot_interval=v["output.snapshot_interval"],
            seed=v["run.seed"],
            values=dict(v),
        )
    except (ValueError, GeometryError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse, default and validate a config file (``None`` means all defaults)."""
    text = "" if path is None else Path(path).read_text()
    if overrides:
        text += "\n" + "\n".join(f"{k} = {val}" for k, val in overrides.items())
    return build_run_config(parse_config_text(text))


# --- outputs ------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def history_row(rec: HistoryRecord) -> list[str]:
    return [
        str(rec.iteration),
        _fmt(rec.j),
        _fmt(rec.j_al),
        _fmt(rec.h1_norm),
        _fmt(rec.alpha),
        _fmt(rec.infeasibility),
        rec.event,
    ]


def read_history(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_fields(path: Path, it: Iterate) -> None:
    disc = it.state.disc
    V = it.mesh.n_nodes
    v, p = disc.split(it.state.U)
    data = {"velocity": v[:V], "pressure": p}
    data["deformation"] = it.deformation.values if it.deformation is not None else np.zeros((V, 2))
    write_vtk(path, it.mesh, data)


class RunWriter:
    """Streams history rows and snapshots while the optimizer runs."""

    def __init__(self, out: Path, interval: int):
        self.out = out
        self.interval = interval
        self.hist = open(out / "history.csv", "w", newline="")
        self.csv = csv.writer(self.hist, lineterminator="\n")
        self.csv.writerow(HISTORY_COLUMNS)
        self.hist.flush()
        self.armijo = open(out / "armijo.csv", "w", newline="")
        self.armijo_csv = csv.writer(self.armijo, lineterminator="\n")
        self.armijo_csv.writerow(("iter", "alpha", "j_al", "j_al_trial", "metric_norm_sq", "sigma"))
        self.last: tuple[HistoryRecord, Iterate] | None = None
        self.snapshots: set[int] = set()

    def snapshot(self, rec: HistoryRecord, it: Iterate) -> None:
        write_fields(self.out / f"fields_{rec.iteration}.vtk", it)
        write_boundary_csv(self.out / f"boundary_{rec.iteration}.csv", it.shapes)
        self.snapshots.add(rec.iteration)

    def __call__(self, rec: HistoryRecord, it: Iterate) -> None:
        self.csv.writerow(history_row(rec))
        self.hist.flush()
        self.armijo_csv.writerow(
            [rec.iteration, _fmt(rec.alpha), _fmt(rec.j_al), _fmt(rec.j_al_trial), _fmt(rec.metric_norm_sq), _fmt(rec.sigma)]
        )
        self.armijo.flush()
        if rec.iteration == 1 or rec.iteration % self.interval == 0:
            self.snapshot(rec, it)
        self.last = (rec, it)

    def close(self) -> None:
        if self.last is not None and self.last[0].iteration not in self.snapshots:
            self.snapshot(*self.last)
        self.hist.close()
        self.armijo.close()


def summary_lines(res: OptimizationResult, seed: int) -> list[str]:
    return [
        f"status: {res.status}",
        f"initial_j: {res.initial_j!r}",
        f"final_j: {res.final_j!r}",
        f"reduction_percent: {100 * res.reduction:.4f}",
        f"final_infeasibility: {res.final_infeasibility!r}",
        f"al_iterations: {res.al_iterations}",
        f"remesh_count: {res.remesh_count}",
        f"iterations: {len(res.history)}",
        f"seed: {seed}",
    ]


def run(config: RunConfig) -> int:
    """Optimize and write history, snapshots and summary. Returns the exit status."""
    out = config.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory {out} is not writable ({exc})", file=sys.stderr)
        return 2
    writer = RunWriter(out, config.snapshot_interval)
    try:
        res = optimize(
            config.domain,
            config.optimizer,
            config.fluid,
            config.armijo,
            config.al,
            bcs=config.bcs,
            elasticity=config.elasticity,
            newton=config.newton,
            callback=writer,
        )
    except (OptimizationError, GeometryError, MeshError, NewtonError, LinearSolveError) as exc:
        writer.close()
        print(f"error: {exc}", file=sys.stderr)
        return 3
    writer.close()
    lines = summary_lines(res, config.seed)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not res.converged:
        print(f"not converged: {res.status}", file=sys.stderr)
        return 1
    return 0


def validate(config: RunConfig) -> int:
    """Build shapes and mesh, solve one state problem, report. Exit 0 iff all checks pass."""
    try:
        shapes = build_benchmark_shapes(config.domain)
        mesh = generate_mesh(config.domain, shapes)
        q = mesh_quality(mesh)
        disc = FlowDiscretization(mesh, config.bcs)
        state = solve_state(mesh, config.fluid, config.bcs, newton=config.newton, disc=disc)
    except (GeometryError, MeshError, NewtonError, LinearSolveError) as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return 1
    j = objective(state, mesh, config.fluid)
    print(f"shapes: {shapes.s} (N = {shapes.N} factors)")
    print(f"mesh: {mesh.n_nodes} nodes, {len(mesh.triangles)} triangles, min quality {q.minimum:.4f}")
    print(f"state: {state.newton_iterations} Newton iterations, residual {state.residual:.3e}, rho {state.rho_reached:g}")
    print(f"j = {j!r}")
    if state.rho_reached < config.fluid.rho:
        print("warning: continuation stopped below the requested rho", file=sys.stderr)
        return 1
    return 0


def mesh_only(config: RunConfig) -> int:
    try:
        shapes = build_benchmark_shapes(config.domain)
        mesh = generate_mesh(config.domain, shapes)
        config.output_dir.mkdir(parents=True, exist_ok=True)
        write_msh(config.output_dir / "mesh.msh", mesh)
        write_vtk(config.output_dir / "mesh.vtk", mesh)
        write_boundary_csv(config.output_dir / "boundary_0.csv", shapes)
    except (GeometryError, MeshError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {mesh.n_nodes} nodes, {len(mesh.triangles)} triangles to {config.output_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="shapeopt", description="Multi-shape optimization in a 2D channel flow.")
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the optimization")
    p_run.add_argument("config", nargs="?", help="config file (omit for all defaults)")
    p_run.add_argument("--output-dir")
    p_run.add_argument("--max-iters", type=int)
    p_run.add_argument("--seed", type=int)
    p_val = sub.add_parser("validate", help="check config, mesh and one state solve")
    p_val.add_argument("config", nargs="?")
    p_mesh = sub.add_parser("mesh", help="export the initial mesh only")
    p_mesh.add_argument("config", nargs="?")
    p_mesh.add_argument("--output-dir")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    overrides = {}
    if getattr(args, "output_dir", None):
        overrides["output.dir"] = args.output_dir
    if getattr(args, "max_iters", None) is not None:
        overrides["optimizer.max_total_iters"] = str(args.max_iters)
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = str(args.seed)
    try:
        config = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    np.random.seed(config.seed)
    if args.command == "run":
        return run(config)
    if args.command == "validate":
        return validate(config)
    return mesh_only(config)


if __name__ == "__main__":
    sys.exit(main())
