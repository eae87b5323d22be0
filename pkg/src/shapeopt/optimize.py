"""Gradient descent on multi-shapes with an elasticity metric and AL constraints.

Each inner iteration computes the flow state, its adjoint and the volume
shape derivative, adds the augmented-Lagrangian constraint terms, converts
the derivative into a deformation field by one linear-elasticity solve, and
moves the mesh nodes along that field with an Armijo step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, Field, LinearSolveError, build_dofmap, elasticity_matrix, h1_norm, solve_linear
from .flow import (
    BoundaryConditions,
    FlowDiscretization,
    FlowState,
    FluidParams,
    NewtonError,
    NewtonParams,
    objective,
    shape_derivative,
    solve_adjoint,
    solve_state,
)
from .geometry import (
    DomainSpec,
    MultiShape,
    build_benchmark_shapes,
    loop_area,
    loop_area_gradient,
    loop_barycenter,
    loop_barycenter_gradient,
    loop_is_simple,
    loops_intersect,
    validate_multishape,
)
from .mesh import (
    DEFAULT_QUALITY_THRESHOLD,
    MeshInvertedError,
    TriMesh,
    deform_mesh,
    generate_mesh,
    mesh_quality,
    remesh,
    shapes_from_mesh,
)

logger = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    """Solver or line-search failure; carries the history recorded so far."""

    def __init__(self, msg: str, history: list | None = None):
        super().__init__(msg)
        self.history = history if history is not None else []


class LineSearchError(OptimizationError):
    pass


# --- parameter types ----------------------------------------------------------


@dataclass(frozen=True)
class ElasticityParams:
    lame_mu: float = 1.0
    lame_lambda: float = 0.0

    def __post_init__(self):
        if not self.lame_mu > 0:
            raise ValueError("elasticity.mu must be > 0")
        if not self.lame_lambda >= 0:
            raise ValueError("elasticity.lambda must be >= 0")


@dataclass(frozen=True)
class ArmijoParams:
    initial_step: float = 0.0125
    sufficient_decrease: float = 1e-4
    backtrack: float = 0.1
    min_step: float = 1e-8

    def __post_init__(self):
        if not self.initial_step > 0:
            raise ValueError("armijo.initial_step must be > 0")
        if not 0 < self.sufficient_decrease < 1:
            raise ValueError("armijo.sigma must be in (0, 1)")
        if not 0 < self.backtrack < 1:
            raise ValueError("armijo.backtrack must be in (0, 1)")
        if not self.min_step > 0:
            raise ValueError("armijo.min_step must be > 0")


@dataclass(frozen=True)
class OptimizerConfig:
    """Loop controls. ``max_total_iters`` caps inner iterations over all AL steps.

    ``boundary_only`` drops the derivative's interior-node entries before the
    elasticity solve. Those entries are pure discretization sensitivities
    (they vanish for the continuous problem) and otherwise drive the
    descent into optimizing the mesh rather than the shapes.
    """

    tol: float = 1e-4
    max_inner: int = 2000
    max_al: int = 20
    remesh_quality: float = DEFAULT_QUALITY_THRESHOLD
    penalty_growth: float = 10.0
    tau: float = 0.1
    feasibility_tol: float = 1e-6
    max_total_iters: int | None = None
    boundary_only: bool = True
    debug: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("optimizer.tol must be > 0")
        if self.max_inner < 1:
            raise ValueError("optimizer.max_inner must be >= 1")
        if self.max_al < 1:
            raise ValueError("optimizer.max_al must be >= 1")
        if self.max_total_iters is not None and self.max_total_iters < 1:
            raise ValueError("optimizer.max_total_iters must be >= 1")
        if not 0 <= self.remesh_quality < 1:
            raise ValueError("optimizer.remesh_quality must be in [0, 1)")
        if not self.penalty_growth >= 1:
            raise ValueError("al.growth must be >= 1")
        if not 0 < self.tau < 1:
            raise ValueError("al.tau must be in (0, 1)")
        if not self.feasibility_tol > 0:
            raise ValueError("al.feasibility_tol must be > 0")


@dataclass(frozen=True)
class ALConfig:
    """Constraint bounds, relative to each shape's initial area and barycenter."""

    penalty: float = 100.0
    area_fraction: float = 1.0
    bary_lower: tuple[tuple[float, float], ...] = ((-0.03, -0.05), (-0.075, -0.02))
    bary_upper: tuple[tuple[float, float], ...] = ((0.04, 0.03), (0.02, 0.05))

    def __post_init__(self):
        if not self.penalty > 0:
            raise ValueError("al.c0 must be > 0")
        if not self.area_fraction > 0:
            raise ValueError("al.area_fraction must be > 0")
        if len(self.bary_lower) != len(self.bary_upper):
            raise ValueError("al.bary_lower and al.bary_upper need one entry per shape")
        for lo, hi in zip(self.bary_lower, self.bary_upper):
            if lo[0] > hi[0] or lo[1] > hi[1]:
                raise ValueError("al.bary_lower must not exceed al.bary_upper")


@dataclass
class ALState:
    """Multipliers, penalty and absolute bounds for area and barycenter constraints."""

    area_targets: np.ndarray  # (s,)
    bary_lower: np.ndarray  # (s, 2)
    bary_upper: np.ndarray  # (s, 2)
    penalty: float
    area_multipliers: np.ndarray = None
    lower_multipliers: np.ndarray = None
    upper_multipliers: np.ndarray = None
    infeasibility_history: list = field(default_factory=list)

    def __post_init__(self):
        s = len(self.area_targets)
        if self.area_multipliers is None:
            self.area_multipliers = np.zeros(s)
        if self.lower_multipliers is None:
            self.lower_multipliers = np.zeros((s, 2))
        if self.upper_multipliers is None:
            self.upper_multipliers = np.zeros((s, 2))
        if not self.penalty > 0:
            raise ValueError("AL penalty must be > 0")

    @classmethod
    def initial(cls, shapes: MultiShape, cfg: ALConfig) -> "ALState":
        loops = [sh.loop for sh in shapes.shapes]
        s = len(loops)
        if len(cfg.bary_lower) != s:
            raise ValueError(f"AL bounds given for {len(cfg.bary_lower)} shapes, geometry has {s}")
        area0 = np.array([loop_area(lp) for lp in loops])
        bary0 = np.array([loop_barycenter(lp) for lp in loops])
        return cls(
            area_targets=cfg.area_fraction * area0,
            bary_lower=bary0 + np.asarray(cfg.bary_lower, dtype=float),
            bary_upper=bary0 + np.asarray(cfg.bary_upper, dtype=float),
            penalty=cfg.penalty,
        )

    @property
    def inequality_multipliers(self) -> np.ndarray:
        return np.concatenate([self.lower_multipliers.ravel(), self.upper_multipliers.ravel()])


@dataclass(frozen=True)
class ConstraintValues:
    """``area`` holds equality residuals h; ``lower``/``upper`` hold g <= 0 values."""

    area: np.ndarray  # (s,)
    lower: np.ndarray  # (s, 2)
    upper: np.ndarray  # (s, 2)

    @property
    def inequalities(self) -> np.ndarray:
        return np.concatenate([self.lower.ravel(), self.upper.ravel()])

    @property
    def infeasibility(self) -> float:
        """Max-norm violation over all constraints."""
        g = self.inequalities
        return float(max(np.max(np.abs(self.area), initial=0.0), np.max(np.maximum(g, 0.0), initial=0.0)))


def constraint_values(shapes: MultiShape, al: ALState) -> ConstraintValues:
    loops = [sh.loop for sh in shapes.shapes]
    area = np.array([loop_area(lp) for lp in loops]) - al.area_targets
    bary = np.array([loop_barycenter(lp) for lp in loops]).reshape(-1, 2)
    return ConstraintValues(area, al.bary_lower - bary, bary - al.bary_upper)


@dataclass
class DeformationField:
    """Nodal P1 vector field, zero on the outer boundary."""

    values: np.ndarray  # (V, 2)
    mesh: TriMesh

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.mesh.nodes.shape:
            raise ValueError("deformation field must have one 2-vector per mesh node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("deformation field has non-finite values")

    def h1_norm(self, dofmap: DofMap | None = None) -> float:
        dm = dofmap or build_dofmap(self.mesh)
        return h1_norm(Field(dm.p1, self.values.T.ravel(), 2))


@dataclass
class HistoryRecord:
    iteration: int
    j: float
    j_al: float
    h1_norm: float
    alpha: float
    infeasibility: float
    event: str = "none"
    al_iteration: int = 1
    j_al_trial: float = float("nan")
    metric_norm_sq: float = float("nan")
    sigma: float = float("nan")

    def armijo_satisfied(self) -> bool:
        """Re-check the logged sufficient-decrease inequality (True for no-step rows)."""
        if self.alpha == 0.0:
            return True
        return self.j_al_trial <= self.j_al - self.sigma * self.alpha * self.metric_norm_sq


@dataclass
class OptimizationResult:
    shapes: MultiShape
    mesh: TriMesh
    state: FlowState
    history: list[HistoryRecord]
    al: ALState
    status: str
    initial_j: float
    final_j: float
    final_infeasibility: float
    al_iterations: int
    remesh_count: int

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_j / self.initial_j if self.initial_j else 0.0


# --- operations ---------------------------------------------------------------


def elasticity_operator(
    mesh: TriMesh, eparams: ElasticityParams = ElasticityParams(), dofmap: DofMap | None = None
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Elasticity matrix restricted to the free dofs (all but outer-boundary nodes).

    Dofs are blocked ``[x-components, y-components]`` over mesh nodes.
    Returns the symmetric free-free block and the free dof indices.
    """
    dm = dofmap or build_dofmap(mesh)
    A = elasticity_matrix(dm.p1, eparams.lame_mu, eparams.lame_lambda)
    V = mesh.n_nodes
    fixed = np.zeros(V, dtype=bool)
    fixed[mesh.outer_nodes] = True
    free_nodes = np.flatnonzero(~fixed)
    free = np.concatenate([free_nodes, V + free_nodes])
    return A[free][:, free].tocsr(), free


def steklov_poincare_gradient(
    mesh: TriMesh,
    rhs: np.ndarray,
    eparams: ElasticityParams = ElasticityParams(),
    dofmap: DofMap | None = None,
) -> DeformationField:
    """Deformation ``V`` with ``a(V, W) = rhs . W`` for all ``W`` vanishing on the outer boundary."""
    rhs = np.asarray(rhs, dtype=float)
    A, free = elasticity_operator(mesh, eparams, dofmap)
    b = rhs.T.ravel()[free]
    out = np.zeros(2 * mesh.n_nodes)
    if np.any(b):
        out[free] = solve_linear(A, b)
    return DeformationField(out.reshape(2, -1).T, mesh)


def restrict_to_shapes(D: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Zero every nodal entry except those on shape boundaries."""
    out = np.zeros_like(D)
    idx = np.concatenate(mesh.shape_nodes)
    out[idx] = D[idx]
    return out


def al_objective(j: float, constraints: ConstraintValues, al: ALState) -> float:
    c = al.penalty
    h = constraints.area
    val = j + float(np.sum(al.area_multipliers * h + 0.5 * c * h**2))
    lam = al.inequality_multipliers
    g = constraints.inequalities
    val += float(np.sum((np.maximum(0.0, lam + c * g) ** 2 - lam**2) / (2 * c)))
    return val


def al_shape_derivative_rhs(
    base: np.ndarray, shapes: MultiShape, al: ALState, mesh: TriMesh, constraints: ConstraintValues | None = None
) -> np.ndarray:
    """``base`` plus the constraint terms, placed on the shapes' boundary nodes."""
    cons = constraints or constraint_values(shapes, al)
    c = al.penalty
    out = np.array(base, dtype=float, copy=True)
    w_area = al.area_multipliers + c * cons.area
    w_lo = np.maximum(0.0, al.lower_multipliers + c * cons.lower)
    w_hi = np.maximum(0.0, al.upper_multipliers + c * cons.upper)
    for j, (sh, idx) in enumerate(zip(shapes.shapes, mesh.shape_nodes)):
        loop = sh.loop
        term = w_area[j] * loop_area_gradient(loop)
        if np.any(w_lo[j]) or np.any(w_hi[j]):
            dB = loop_barycenter_gradient(loop)  # [i, a, b]
            term = term + np.einsum("a,iab->ib", w_hi[j] - w_lo[j], dB)
        np.add.at(out, idx, term)
    return out


def update_multipliers(al: ALState, cons: ConstraintValues, previous_infeasibility: float, config: OptimizerConfig) -> None:
    """First-order multiplier update with penalty growth on slow feasibility progress."""
    c = al.penalty
    al.area_multipliers = al.area_multipliers + c * cons.area
    al.lower_multipliers = np.maximum(0.0, al.lower_multipliers + c * cons.lower)
    al.upper_multipliers = np.maximum(0.0, al.upper_multipliers + c * cons.upper)
    infeas = cons.infeasibility
    al.infeasibility_history.append(infeas)
    if infeas > config.tau * previous_infeasibility:
        al.penalty = c * config.penalty_growth


def shapes_admissible(shapes: MultiShape) -> bool:
    """Loops stay simple and pairwise disjoint.

    A valid fluid mesh does not rule out a hole folding over itself, since
    the hole interior carries no triangles.
    """
    loops = [sh.loop for sh in shapes.shapes]
    if not all(loop_is_simple(lp) for lp in loops):
        return False
    return not any(loops_intersect(a, b) for i, a in enumerate(loops) for b in loops[i + 1 :])


@dataclass
class ArmijoResult:
    alpha: float
    value: float
    payload: object
    trials: int


def armijo_search(
    evaluate: Callable[[float], tuple[float, object]],
    j0: float,
    metric_norm_sq: float,
    params: ArmijoParams = ArmijoParams(),
) -> ArmijoResult:
    """Backtrack from ``initial_step`` until ``f(a) <= j0 - sigma a m``.

    ``evaluate(a)`` returns ``(value, payload)``; a non-finite value counts
    as rejection (used for inverted meshes and failed state solves).
    """
    if not metric_norm_sq > 0:
        raise LineSearchError("line search failed: not a descent direction")
    alpha = params.initial_step
    trials = 0
    floor = params.min_step * (1 - 1e-12)
    while alpha >= floor:
        trials += 1
        value, payload = evaluate(alpha)
        if np.isfinite(value) and value <= j0 - params.sufficient_decrease * alpha * metric_norm_sq:
            return ArmijoResult(alpha, value, payload, trials)
        alpha *= params.backtrack
    raise LineSearchError("line search failed")


@dataclass
class Iterate:
    """Everything tied to one accepted design."""

    shapes: MultiShape
    mesh: TriMesh
    disc: FlowDiscretization
    state: FlowState
    j: float
    constraints: ConstraintValues
    deformation: DeformationField | None = None


def _fresh_iterate(shapes, spec, fluid, bcs, newton, al, previous: TriMesh | None = None) -> Iterate:
    mesh = generate_mesh(spec, shapes) if previous is None else remesh(shapes, spec, previous)
    disc = FlowDiscretization(mesh, bcs)
    state = solve_state(mesh, fluid, bcs, newton=newton, disc=disc)
    return Iterate(shapes, mesh, disc, state, objective(state, mesh, fluid), constraint_values(shapes, al))


def optimize(
    spec: DomainSpec,
    config: OptimizerConfig = OptimizerConfig(),
    fluid: FluidParams = FluidParams(),
    armijo: ArmijoParams = ArmijoParams(),
    al_config: ALConfig = ALConfig(),
    *,
    bcs: BoundaryConditions | None = None,
    elasticity: ElasticityParams = ElasticityParams(),
    newton: NewtonParams = NewtonParams(),
    shapes: MultiShape | None = None,
    callback: Callable[[HistoryRecord, Iterate], None] | None = None,
) -> OptimizationResult:
    """Augmented-Lagrangian outer loop around Armijo gradient descent.

    ``callback(record, iterate)`` sees every history row once its event is
    final, together with the design the row describes.
    """
    bcs = bcs or BoundaryConditions(inflow_coefficient=-0.08421)
    shapes = shapes or build_benchmark_shapes(spec)
    history: list[HistoryRecord] = []
    pending: list[tuple[HistoryRecord, Iterate]] = []

    def emit_pending():
        for rec, it_ in pending:
            history.append(rec)
            if callback is not None:
                callback(rec, it_)
        pending.clear()

    al = ALState.initial(shapes, al_config)
    try:
        cur = _fresh_iterate(shapes, spec, fluid, bcs, newton, al)
    except (NewtonError, LinearSolveError) as exc:
        raise OptimizationError(f"initial state solve failed: {exc}", history) from exc
    initial_j = cur.j
    prev_infeas = cur.constraints.infeasibility
    remesh_count = 0
    it = 0
    status = "max_al"
    k = 0

    def do_remesh(c: Iterate) -> Iterate:
        nonlocal remesh_count
        remesh_count += 1
        logger.info("remeshing (generation %d)", c.mesh.generation + 1)
        return _fresh_iterate(c.shapes, spec, fluid, bcs, newton, al, previous=c.mesh)

    try:
        for k in range(1, config.max_al + 1):
            cur = Iterate(cur.shapes, cur.mesh, cur.disc, cur.state, cur.j, constraint_values(cur.shapes, al))
            inner_converged = False
            retried = False
            for _ in range(config.max_inner):
                if config.max_total_iters is not None and it >= config.max_total_iters:
                    status = "iteration_cap"
                    break
                it += 1
                emit_pending()
                if config.debug:
                    problems = validate_multishape(cur.shapes, spec.lower, spec.upper)
                    if problems:
                        raise OptimizationError("; ".join(problems), history)
                adj = solve_adjoint(cur.mesh, cur.state, fluid)
                D = shape_derivative(cur.mesh, cur.state, adj, fluid)
                if config.boundary_only:
                    D = restrict_to_shapes(D, cur.mesh)
                D_al = al_shape_derivative_rhs(D, cur.shapes, al, cur.mesh, cur.constraints)
                V = steklov_poincare_gradient(cur.mesh, D_al, elasticity, cur.disc.dm)
                cur.deformation = V
                hn = V.h1_norm(cur.disc.dm)
                j_al = al_objective(cur.j, cur.constraints, al)
                rec = HistoryRecord(it, cur.j, j_al, hn, 0.0, cur.constraints.infeasibility, al_iteration=k)
                if hn <= config.tol:
                    pending.append((rec, cur))
                    inner_converged = True
                    break
                m = float(np.sum(D_al * V.values))
                base = cur

                def evaluate(alpha: float):
                    try:
                        mesh_t = deform_mesh(base.mesh, V.values, -alpha)
                        disc_t = base.disc.with_mesh(mesh_t)
                        st = solve_state(mesh_t, fluid, bcs, initial_guess=base.state.U, newton=newton, disc=disc_t)
                    except (MeshInvertedError, NewtonError, LinearSolveError):
                        return np.inf, None
                    shapes_t = shapes_from_mesh(mesh_t, base.shapes)
                    if not shapes_admissible(shapes_t):
                        return np.inf, None
                    j_t = objective(st, mesh_t, fluid)
                    cons_t = constraint_values(shapes_t, al)
                    return al_objective(j_t, cons_t, al), Iterate(shapes_t, mesh_t, disc_t, st, j_t, cons_t)

                try:
                    res = armijo_search(evaluate, j_al, m, armijo)
                except LineSearchError as exc:
                    if retried:
                        pending.append((rec, cur))
                        raise LineSearchError(f"{exc} after remesh (iteration {it})", history) from exc
                    retried = True
                    rec.event = "remesh"
                    pending.append((rec, cur))
                    cur = do_remesh(cur)
                    continue
                retried = False
                rec.alpha = res.alpha
                rec.j_al_trial = res.value
                rec.metric_norm_sq = m
                rec.sigma = armijo.sufficient_decrease
                pending.append((rec, cur))
                cur = res.payload
                if mesh_quality(cur.mesh).minimum < config.remesh_quality:
                    rec.event = "remesh"
                    cur = do_remesh(cur)
            if status == "iteration_cap":
                break
            cons = cur.constraints
            if pending:
                last = pending[-1][0]
                last.event = "al_update" if last.event == "none" else f"{last.event}+al_update"
            emit_pending()
            infeas = cons.infeasibility
            logger.info("AL step %d: j=%.6g infeasibility=%.3e c=%g", k, cur.j, infeas, al.penalty)
            if inner_converged and infeas <= config.feasibility_tol:
                al.infeasibility_history.append(infeas)
                status = "converged"
                break
            update_multipliers(al, cons, prev_infeas, config)
            prev_infeas = infeas
    except (NewtonError, LinearSolveError) as exc:
        emit_pending()
        raise OptimizationError(f"solver failure at iteration {it}: {exc}", history) from exc
    except OptimizationError as exc:
        emit_pending()
        exc.history = history
        raise
    emit_pending()
    return OptimizationResult(
        shapes=cur.shapes,
        mesh=cur.mesh,
        state=cur.state,
        history=history,
        al=al,
        status=status,
        initial_j=initial_j,
        final_j=cur.j,
        final_infeasibility=cur.constraints.infeasibility,
        al_iterations=k,
        remesh_count=remesh_count,
    )
