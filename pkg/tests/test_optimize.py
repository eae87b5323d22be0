import numpy as np
import pytest

from shapeopt.fem import build_dofmap, elasticity_matrix
from shapeopt.flow import BoundaryConditions, FluidParams, objective, shape_derivative, solve_adjoint, solve_state
from shapeopt.geometry import DomainSpec, build_benchmark_shapes
from shapeopt.mesh import deform_mesh, generate_mesh, shapes_from_mesh
from shapeopt.optimize import (
    ALConfig,
    ALState,
    ArmijoParams,
    ConstraintValues,
    ElasticityParams,
    LineSearchError,
    OptimizerConfig,
    al_objective,
    al_shape_derivative_rhs,
    armijo_search,
    constraint_values,
    elasticity_operator,
    optimize,
    restrict_to_shapes,
    shapes_admissible,
    steklov_poincare_gradient,
    update_multipliers,
)

BCS = BoundaryConditions(inflow_coefficient=-0.08421)
STOKES = FluidParams(1.81, 0.0)


@pytest.fixture(scope="module")
def setup():
    spec = DomainSpec(h=0.07)
    shapes = build_benchmark_shapes(spec)
    return spec, shapes, generate_mesh(spec, shapes)


def random_field(mesh, seed):
    W = np.random.default_rng(seed).normal(size=mesh.nodes.shape)
    W[mesh.outer_nodes] = 0.0
    return W


def test_zero_rhs_gives_zero_deformation(setup):
    _, _, mesh = setup
    V = steklov_poincare_gradient(mesh, np.zeros_like(mesh.nodes))
    assert np.abs(V.values).max() == 0.0


def test_galerkin_identity(setup):
    _, _, mesh = setup
    rhs = random_field(mesh, 0)
    eparams = ElasticityParams(1.0, 0.5)
    V = steklov_poincare_gradient(mesh, rhs, eparams)
    assert np.abs(V.values[mesh.outer_nodes]).max() == 0.0
    A = elasticity_matrix(build_dofmap(mesh).p1, 1.0, 0.5)
    v = V.values.T.ravel()
    for seed in range(1, 21):
        W = random_field(mesh, seed)
        gap = W.T.ravel() @ (A @ v) - np.sum(rhs * W)
        assert abs(gap) <= 1e-9


def test_elasticity_operator_spd():
    spec = DomainSpec(h=0.15)
    mesh = generate_mesh(spec, build_benchmark_shapes(spec))
    A, free = elasticity_operator(mesh)
    assert abs(A - A.T).max() < 1e-13
    np.linalg.cholesky(A.toarray())


def test_al_objective_examples():
    al = ALState(np.zeros(1), np.full((1, 2), -1.0), np.full((1, 2), 1.0), penalty=10.0)
    cons = ConstraintValues(np.array([0.0]), np.full((1, 2), -0.5), np.full((1, 2), -0.5))
    assert al_objective(0.3, cons, al) == 0.3
    al.area_multipliers = np.array([1.0])
    cons = ConstraintValues(np.array([0.1]), np.full((1, 2), -0.5), np.full((1, 2), -0.5))
    assert al_objective(0.3, cons, al) == pytest.approx(0.3 + 0.1 + 0.05, abs=1e-15)
    # one inactive inequality with g <= -lambda/c contributes -lambda^2 / (2c)
    al.area_multipliers = np.zeros(1)
    al.lower_multipliers = np.array([[2.0, 0.0]])
    cons = ConstraintValues(np.array([0.0]), np.array([[-0.3, -0.5]]), np.full((1, 2), -0.5))
    assert al_objective(0.3, cons, al) == pytest.approx(0.3 - 4.0 / 20.0, abs=1e-15)


def test_al_rhs_inactive_and_translation(setup):
    _, shapes, mesh = setup
    al = ALState.initial(shapes, ALConfig(penalty=10.0))
    base = np.random.default_rng(3).normal(size=mesh.nodes.shape)
    out = al_shape_derivative_rhs(base, shapes, al, mesh)
    assert np.array_equal(out, base)
    # area-only constraint active: translation of a whole shape changes nothing
    al.area_multipliers = np.array([1.0, -2.0])
    zero = np.zeros_like(mesh.nodes)
    rhs = al_shape_derivative_rhs(zero, shapes, al, mesh)
    T = np.zeros_like(mesh.nodes)
    T[mesh.shape_nodes[0]] = [0.3, -0.2]
    assert abs(np.sum(rhs * T)) < 1e-14


def test_al_derivative_matches_finite_difference(setup):
    _, shapes, mesh = setup
    cfg = ALConfig(penalty=10.0, area_fraction=0.9, bary_lower=((0.0, -0.05), (-0.075, -0.02)))
    al = ALState.initial(shapes, cfg)
    al.area_multipliers = np.array([0.5, -0.2])
    al.upper_multipliers = np.array([[0.1, 0.0], [0.0, 0.3]])
    state = solve_state(mesh, STOKES, BCS)
    adj = solve_adjoint(mesh, state, STOKES)
    D = shape_derivative(mesh, state, adj, STOKES)
    rhs = al_shape_derivative_rhs(D, shapes, al, mesh)
    W = random_field(mesh, 4) * 0.05

    def total(eps):
        m = deform_mesh(mesh, W, eps)
        j = objective(solve_state(m, STOKES, BCS), m, STOKES)
        return al_objective(j, constraint_values(shapes_from_mesh(m, shapes), al), al)

    eps = 1e-6
    fd = (total(eps) - total(-eps)) / (2 * eps)
    assert abs(np.sum(rhs * W) - fd) <= 1e-2 * abs(fd)


def test_restrict_to_shapes(setup):
    _, _, mesh = setup
    D = np.ones_like(mesh.nodes)
    R = restrict_to_shapes(D, mesh)
    assert R.sum() == 2 * len(mesh.shape_boundary_nodes)


def test_update_multipliers_grows_penalty(setup):
    _, shapes, _ = setup
    al = ALState.initial(shapes, ALConfig(penalty=10.0))
    cons = ConstraintValues(np.array([0.01, 0.0]), np.zeros((2, 2)) - 1, np.zeros((2, 2)) - 1)
    update_multipliers(al, cons, 0.02, OptimizerConfig())
    assert al.area_multipliers == pytest.approx([0.1, 0.0])
    assert al.penalty == 100.0
    update_multipliers(al, cons, 1.0, OptimizerConfig())
    assert al.penalty == 100.0


def test_armijo_search():
    with pytest.raises(LineSearchError, match="line search failed"):
        armijo_search(lambda a: (np.inf, None), 1.0, 1.0)
    res = armijo_search(lambda a: (1.0 - a, "ok"), 1.0, 1.0, ArmijoParams(initial_step=0.5))
    assert res.alpha == 0.5 and res.trials == 1 and res.payload == "ok"
    # quadratic f(a) = (1 - a)^2 from f(0) = 1 with slope -2: full step 1.5 fails, 0.15 passes
    res = armijo_search(lambda a: ((1 - a) ** 2, None), 1.0, 2.0, ArmijoParams(initial_step=1.5, sufficient_decrease=0.5))
    assert res.alpha == pytest.approx(0.15) and res.trials == 2


def test_shapes_admissible(setup):
    _, shapes, _ = setup
    assert shapes_admissible(shapes)
    loop = shapes.shapes[0].loop.copy()
    loop[[2, 20]] = loop[[20, 2]]
    assert not shapes_admissible(shapes.with_loops([loop, shapes.shapes[1].loop]))


def test_config_validation():
    with pytest.raises(ValueError, match="optimizer.tol"):
        OptimizerConfig(tol=0.0)
    with pytest.raises(ValueError, match="armijo.sigma"):
        ArmijoParams(sufficient_decrease=1.5)
    with pytest.raises(ValueError, match="al.c0"):
        ALConfig(penalty=0.0)


def test_huge_tolerance_stops_after_one_iteration_per_al_step():
    spec = DomainSpec(h=0.07)
    res = optimize(spec, OptimizerConfig(tol=1e3, max_al=3), STOKES, bcs=BCS)
    assert len(res.history) == res.al_iterations
    assert all(r.alpha == 0.0 for r in res.history)
    assert res.final_j == res.initial_j
    assert res.history[-1].event == "al_update"


def test_stokes_descent_is_monotone_within_subproblems():
    spec = DomainSpec(h=0.07)
    res = optimize(spec, OptimizerConfig(max_inner=15, max_al=2), STOKES, bcs=BCS)
    assert len(res.history) == 30
    assert all(r.armijo_satisfied() for r in res.history)
    for k in (1, 2):
        rows = [r for r in res.history if r.al_iteration == k and r.alpha > 0]
        assert all(r.j_al_trial < r.j_al for r in rows)
        steps = [(a, b) for a, b in zip(rows, rows[1:]) if "remesh" not in a.event]
        assert all(b.j_al < a.j_al for a, b in steps)
    assert res.final_j < res.initial_j
