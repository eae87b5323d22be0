import math

import numpy as np
import pytest
import scipy.sparse as sp

from shapeopt.fem import (
    QUAD_POINTS,
    QUAD_WEIGHTS,
    FEMError,
    Field,
    LinearSolveError,
    ReusableSolver,
    apply_dirichlet,
    assemble_matrix,
    build_dofmap,
    divergence_matrices,
    elasticity_matrix,
    h1_norm,
    interpolate,
    mass_matrix,
    solve_linear,
    stiffness_matrix,
)
from shapeopt.geometry import DomainSpec, build_benchmark_shapes
from shapeopt.mesh import OUTER_TAGS, TriMesh, generate_mesh


def two_triangle_square():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
    return TriMesh(nodes, tris, edges, np.array([4, 2, 3, 1]), ())


@pytest.fixture(scope="module")
def square():
    spec = DomainSpec(shapes=(), h=0.1)
    return build_dofmap(generate_mesh(spec, build_benchmark_shapes(spec)))


def test_dof_counts():
    dm = build_dofmap(two_triangle_square())
    assert dm.n_p2_vector == 18
    assert dm.n_p1_scalar == 4
    assert dm.n_p1_vector == 8


def test_benchmark_dof_counts():
    spec = DomainSpec(h=0.05)
    mesh = generate_mesh(spec, build_benchmark_shapes(spec))
    dm = build_dofmap(mesh)
    assert dm.n_p1_scalar == mesh.n_nodes
    assert dm.n_p2_vector == 2 * (mesh.n_nodes + len(mesh.edges()))
    outer = [set(dm.p1_boundary[t].tolist()) for t in OUTER_TAGS]
    assert all(outer)


def test_empty_mesh_errors():
    empty = TriMesh(np.zeros((0, 2)), np.zeros((0, 3), dtype=int), np.zeros((0, 2), dtype=int), np.zeros(0), ())
    with pytest.raises(FEMError):
        build_dofmap(empty)


def test_dofmap_deterministic(square):
    again = build_dofmap(square.mesh)
    assert np.array_equal(again.p2.cell_dofs, square.p2.cell_dofs)


def test_quadrature_exactness():
    # integral of x^a y^b over the reference triangle = a! b! / (a + b + 2)!
    ref = QUAD_POINTS[:, 1:]
    for a in range(5):
        for b in range(5 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            approx = 0.5 * np.sum(QUAD_WEIGHTS * ref[:, 0] ** a * ref[:, 1] ** b)
            assert approx == pytest.approx(exact, abs=1e-14)


def test_mass_and_stiffness(square):
    M = mass_matrix(square.p2)
    assert M.sum() == pytest.approx(1.0, abs=1e-12)
    K = stiffness_matrix(square.p2)
    assert np.abs(K @ np.ones(square.p2.n_dofs)).max() < 1e-12
    assert abs(K - K.T).max() < 1e-13


def test_divergence_of_identity_field(square):
    Bx, By = divergence_matrices(square)
    xy = square.p2_coords
    div = Bx @ xy[:, 0] + By @ xy[:, 1]
    ones_p1 = mass_matrix(square.p1) @ np.ones(square.p1.n_dofs)
    assert np.abs(div - 2 * ones_p1).max() < 1e-13


def test_assemble_mismatched_spaces(square):
    other = build_dofmap(two_triangle_square())
    with pytest.raises(FEMError):
        assemble_matrix(lambda u, v: v.val[..., :, None] * u.val[..., None, :], square.p1, other.p1)


def test_p2_interpolation_reproduces_quadratics(square):
    vals = interpolate(square.p2, lambda xy: np.column_stack([xy[:, 0] ** 2, xy[:, 0] * xy[:, 1]]), square)
    f = Field(square.p2, vals, 2)
    pts = np.random.default_rng(0).uniform(0.01, 0.99, (20, 2))
    expected = np.column_stack([pts[:, 0] ** 2, pts[:, 0] * pts[:, 1]])
    assert np.abs(f(pts) - expected).max() < 1e-12


def test_identity_solve():
    b = np.arange(5.0)
    assert np.array_equal(solve_linear(sp.identity(5, format="csr"), b), b)


def test_elasticity_solve_and_symmetry(square):
    A = elasticity_matrix(square.p1, 1.0, 0.5)
    assert abs(A - A.T).max() < 1e-13
    n = square.p1.n_dofs
    bnd = np.unique(np.concatenate([square.p1_boundary[t] for t in OUTER_TAGS]))
    dofs = np.concatenate([bnd, n + bnd])
    rhs = np.random.default_rng(1).normal(size=2 * n)
    Ad, bd = apply_dirichlet(A, rhs, dofs, 0.0, symmetric=True)
    assert abs(Ad - Ad.T).max() < 1e-13
    x = solve_linear(Ad, bd)
    assert np.linalg.norm(Ad @ x - bd) <= 1e-10 * (1 + np.linalg.norm(bd))
    np.linalg.cholesky(Ad.toarray())


def test_dirichlet_rows_are_identity(square):
    A = stiffness_matrix(square.p1)
    b = np.ones(square.p1.n_dofs)
    Ad, bd = apply_dirichlet(A, b, np.array([0, 3]), np.array([2.0, 5.0]))
    assert np.array_equal(Ad[0].toarray().ravel(), np.eye(square.p1.n_dofs)[0])
    assert bd[0] == 2.0 and bd[3] == 5.0


def test_singular_solve_errors(square):
    K = stiffness_matrix(square.p1)
    with pytest.raises(LinearSolveError):
        solve_linear(K, np.random.default_rng(2).normal(size=square.p1.n_dofs))


def test_reusable_solver(square):
    A = elasticity_matrix(square.p1, 1.0, 0.0) + sp.identity(2 * square.p1.n_dofs)
    b = np.ones(A.shape[0])
    s = ReusableSolver()
    x1 = s.solve(A.tocsr(), b)
    x2 = s.solve((A * 1.001).tocsr(), b)
    assert s.factorizations == 1
    assert np.linalg.norm(1.001 * (A @ x2) - b) <= 1e-10 * (1 + np.linalg.norm(b))
    xt = s.solve(A.tocsr(), b, transpose=True, refactor=True)
    assert np.linalg.norm(A.T @ xt - b) <= 1e-10 * (1 + np.linalg.norm(b))
    assert np.allclose(x1, xt)


def test_h1_norm_examples(square):
    n = square.p1.n_dofs
    assert h1_norm(Field(square.p1, np.zeros(2 * n), 2)) == 0.0
    const = np.concatenate([np.full(n, -3.0), np.zeros(n)])
    assert h1_norm(Field(square.p1, const, 2)) == pytest.approx(3.0, rel=1e-12)
    xfield = np.concatenate([square.mesh.nodes[:, 0], np.zeros(n)])
    assert h1_norm(Field(square.p1, xfield, 2)) == pytest.approx(math.sqrt(4 / 3), rel=1e-12)
