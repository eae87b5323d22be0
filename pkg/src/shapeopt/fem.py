"""Taylor-Hood (P2/P1) and P1-vector finite elements on :class:`TriMesh`.

Vector fields are stored component-blocked: all x-dofs, then all y-dofs.
P2 scalar dofs are numbered vertices first, then mesh edges in the order of
:meth:`TriMesh.edges`. Local P2 ordering per triangle is
``[v0, v1, v2, e01, e12, e20]``.

Assembly works on "form descriptions": a callable receiving evaluated test
and trial bases (values and gradients at quadrature points, vectorised over
elements) and returning the integrand, which is then integrated with a
degree-5 Gauss rule and scattered into a CSR matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriMesh, triangle_signed_areas


class FEMError(RuntimeError):
    pass


class LinearSolveError(FEMError):
    pass


# Degree-5, 7-point rule (barycentric coordinates, weights sum to 1).
_s15 = np.sqrt(15.0)
_a1, _b1 = (9 - 2 * _s15) / 21, (6 + _s15) / 21
_a2, _b2 = (9 + 2 * _s15) / 21, (6 - _s15) / 21
QUAD_POINTS = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_a1, _b1, _b1],
        [_b1, _a1, _b1],
        [_b1, _b1, _a1],
        [_a2, _b2, _b2],
        [_b2, _a2, _b2],
        [_b2, _b2, _a2],
    ]
)
QUAD_WEIGHTS = np.array([9 / 40] + [(155 + _s15) / 1200] * 3 + [(155 - _s15) / 1200] * 3)
QUAD_DEGREE = 5

_EDGE_LOCAL = ((0, 1), (1, 2), (2, 0))


def p2_values(lam: np.ndarray) -> np.ndarray:
    """P2 basis values at barycentric points ``lam`` (..., 3) -> (..., 6)."""
    out = [lam[..., i] * (2 * lam[..., i] - 1) for i in range(3)]
    out += [4 * lam[..., i] * lam[..., j] for i, j in _EDGE_LOCAL]
    return np.stack(out, axis=-1)


def p2_gradients(lam: np.ndarray, glam: np.ndarray) -> np.ndarray:
    """P2 basis gradients.

    ``lam``: (Q, 3) barycentric points; ``glam``: (T, 3, 2) gradients of the
    barycentric coordinates. Returns (T, Q, 6, 2).
    """
    L = lam[None, :, :, None]  # (1, Q, 3, 1)
    G = glam[:, None, :, :]  # (T, 1, 3, 2)
    out = [(4 * L[:, :, i] - 1) * G[:, :, i] for i in range(3)]
    out += [4 * (L[:, :, i] * G[:, :, j] + L[:, :, j] * G[:, :, i]) for i, j in _EDGE_LOCAL]
    return np.stack(out, axis=2)


@dataclass(frozen=True)
class Basis:
    """Basis functions evaluated at quadrature points of every element."""

    val: np.ndarray  # (1 or T, Q, n)
    grad: np.ndarray  # (T, Q, n, 2)


class Space:
    """Scalar Lagrange space (P1 or P2) on a mesh."""

    def __init__(self, geo: "ElementGeometry", degree: int, cell_dofs: np.ndarray, n_dofs: int):
        self.geo = geo
        self.degree = degree
        self.cell_dofs = cell_dofs
        self.n_dofs = n_dofs

    @cached_property
    def basis(self) -> Basis:
        lam = QUAD_POINTS
        if self.degree == 1:
            val = lam[None]
            grad = np.broadcast_to(self.geo.glam[:, None], (self.geo.n_cells, len(lam), 3, 2))
        else:
            val = p2_values(lam)[None]
            grad = p2_gradients(lam, self.geo.glam)
        return Basis(val, grad)

    def evaluate(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Field values and gradients at quadrature points.

        ``values`` is (n_dofs,) or (n_dofs, c). Returns arrays of shape
        (T, Q[, c]) and (T, Q[, c], 2).
        """
        loc = values[self.cell_dofs]  # (T, n[, c])
        b = self.basis
        if loc.ndim == 2:
            return np.einsum("zqn,tn->tq", b.val, loc), np.einsum("tqnd,tn->tqd", b.grad, loc)
        return np.einsum("zqn,tnc->tqc", b.val, loc), np.einsum("tqnd,tnc->tqcd", b.grad, loc)


class ElementGeometry:
    def __init__(self, mesh: TriMesh):
        if len(mesh.triangles) == 0:
            raise FEMError("empty mesh")
        self.mesh = mesh
        self.n_cells = len(mesh.triangles)
        p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
        self.area = triangle_signed_areas(mesh.nodes, mesh.triangles)
        if np.any(self.area <= 0):
            raise FEMError("mesh has non-positive triangle areas")
        # grad lambda_i = rot90(opposite edge) / (2 area)
        glam = np.empty((self.n_cells, 3, 2))
        for i in range(3):
            a, b = p[:, (i + 1) % 3], p[:, (i + 2) % 3]
            e = b - a
            glam[:, i, 0] = -e[:, 1]
            glam[:, i, 1] = e[:, 0]
        self.glam = glam / (2 * self.area)[:, None, None]
        self.dx = self.area[:, None] * QUAD_WEIGHTS[None, :]  # (T, Q)
        self.quad_xy = np.einsum("qi,tid->tqd", QUAD_POINTS, p)


class DofMap:
    """Taylor-Hood dof layout plus per-tag boundary dof sets."""

    def __init__(self, mesh: TriMesh):
        if len(mesh.triangles) == 0 or mesh.n_nodes == 0:
            raise FEMError("empty mesh")
        self.mesh = mesh
        self.geo = ElementGeometry(mesh)
        V = mesh.n_nodes
        edges = mesh.edges()
        self.edges = edges
        t = mesh.triangles
        loc = np.stack([np.sort(t[:, list(e)], axis=1) for e in _EDGE_LOCAL], axis=1)  # (T, 3, 2)
        key = edges[:, 0] * V + edges[:, 1]
        order = np.argsort(key)
        pos = np.searchsorted(key[order], loc[..., 0] * V + loc[..., 1])
        tri_edges = order[pos]
        self.n_vertices = V
        self.n_edges = len(edges)
        self.p1 = Space(self.geo, 1, t, V)
        self.p2 = Space(self.geo, 2, np.hstack([t, V + tri_edges]), V + len(edges))

        be = np.sort(mesh.boundary_edges, axis=1)
        bpos = order[np.searchsorted(key[order], be[:, 0] * V + be[:, 1])]
        self.p1_boundary: dict[int, np.ndarray] = {}
        self.p2_boundary: dict[int, np.ndarray] = {}
        for tag in np.unique(mesh.edge_tags):
            sel = mesh.edge_tags == tag
            nodes = np.unique(be[sel])
            self.p1_boundary[int(tag)] = nodes
            self.p2_boundary[int(tag)] = np.concatenate([nodes, V + np.unique(bpos[sel])])

    def with_mesh(self, mesh: TriMesh) -> "DofMap":
        """Same dof layout on a mesh with identical connectivity, moved nodes."""
        if mesh.triangles is not self.mesh.triangles and not np.array_equal(mesh.triangles, self.mesh.triangles):
            raise FEMError("with_mesh requires identical connectivity")
        new = object.__new__(DofMap)
        new.__dict__.update({k: v for k, v in self.__dict__.items() if k != "p2_coords"})
        new.mesh = mesh
        new.geo = ElementGeometry(mesh)
        new.p1 = Space(new.geo, 1, self.p1.cell_dofs, self.p1.n_dofs)
        new.p2 = Space(new.geo, 2, self.p2.cell_dofs, self.p2.n_dofs)
        return new

    @property
    def n_p2_vector(self) -> int:
        return 2 * self.p2.n_dofs

    @property
    def n_p1_scalar(self) -> int:
        return self.p1.n_dofs

    @property
    def n_p1_vector(self) -> int:
        return 2 * self.p1.n_dofs

    @cached_property
    def p2_coords(self) -> np.ndarray:
        nodes = self.mesh.nodes
        mid = 0.5 * (nodes[self.edges[:, 0]] + nodes[self.edges[:, 1]])
        return np.vstack([nodes, mid])

    def p2_dofs(self, tags) -> np.ndarray:
        sets = [self.p2_boundary[t] for t in tags if t in self.p2_boundary]
        return np.unique(np.concatenate(sets)) if sets else np.empty(0, dtype=int)

    def p1_dofs(self, tags) -> np.ndarray:
        sets = [self.p1_boundary[t] for t in tags if t in self.p1_boundary]
        return np.unique(np.concatenate(sets)) if sets else np.empty(0, dtype=int)


def build_dofmap(mesh: TriMesh) -> DofMap:
    return DofMap(mesh)


@dataclass
class Field:
    """Dof values bound to a scalar space with ``ncomp`` blocked components."""

    space: Space
    values: np.ndarray
    ncomp: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size != self.ncomp * self.space.n_dofs:
            raise FEMError(
                f"field has {self.values.size} values, space needs {self.ncomp * self.space.n_dofs}"
            )

    def components(self) -> np.ndarray:
        """(n_dofs, ncomp) view."""
        return self.values.reshape(self.ncomp, self.space.n_dofs).T

    def at_quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        if self.ncomp == 1:
            return self.space.evaluate(self.values)
        return self.space.evaluate(self.components())

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Point evaluation (brute-force element search)."""
        points = np.atleast_2d(points)
        geo = self.space.geo
        p0 = geo.mesh.nodes[geo.mesh.triangles[:, 0]]
        comps = self.components()
        out = np.empty((len(points), self.ncomp))
        for k, x in enumerate(points):
            d = x - p0
            lam12 = np.einsum("tid,td->ti", geo.glam[:, 1:], d)
            lam = np.column_stack([1 - lam12.sum(axis=1), lam12])
            t = int(np.argmax(lam.min(axis=1)))
            if lam[t].min() < -1e-10:
                raise FEMError(f"point {x} outside mesh")
            phi = lam[t] if self.space.degree == 1 else p2_values(lam[t])
            out[k] = phi @ comps[self.space.cell_dofs[t]]
        return out[:, 0] if self.ncomp == 1 else out


def interpolate(space: Space, func: Callable[[np.ndarray], np.ndarray], dofmap: DofMap) -> np.ndarray:
    """Nodal interpolation; ``func`` maps (n, 2) points to (n,) or (n, c)."""
    xy = dofmap.p2_coords if space.degree == 2 else dofmap.mesh.nodes
    vals = np.asarray(func(xy), dtype=float)
    return vals if vals.ndim == 1 else vals.T.ravel()


# --- assembly -----------------------------------------------------------------

Form = Callable[[Basis, Basis], np.ndarray]


def assemble_matrix(form: Form, test: Space, trial: Space | None = None) -> sp.csr_matrix:
    """Assemble ``sum_T sum_q dx * form(trial, test)[t, q, i, j]``.

    The form returns an integrand of shape (T, Q, n_test, n_trial)
    (broadcastable), with ``i`` indexing test and ``j`` trial functions.
    """
    trial = test if trial is None else trial
    if test.geo is not trial.geo:
        raise FEMError("test and trial spaces live on different meshes")
    integrand = form(trial.basis, test.basis)
    T, nt, nu = test.geo.n_cells, test.cell_dofs.shape[1], trial.cell_dofs.shape[1]
    integrand = np.broadcast_to(integrand, (T, len(QUAD_WEIGHTS), nt, nu))
    local = np.einsum("tq,tqij->tij", test.geo.dx, integrand)
    rows = np.broadcast_to(test.cell_dofs[:, :, None], local.shape)
    cols = np.broadcast_to(trial.cell_dofs[:, None, :], local.shape)
    return sp.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())), shape=(test.n_dofs, trial.n_dofs)
    ).tocsr()


def assemble_vector(form: Callable[[Basis], np.ndarray], test: Space) -> np.ndarray:
    """Assemble ``sum_T sum_q dx * form(test)[t, q, i]``."""
    integrand = np.broadcast_to(form(test.basis), (test.geo.n_cells, len(QUAD_WEIGHTS), test.cell_dofs.shape[1]))
    local = np.einsum("tq,tqi->ti", test.geo.dx, integrand)
    return np.bincount(test.cell_dofs.ravel(), local.ravel(), minlength=test.n_dofs)


def integrate(values: np.ndarray, geo: ElementGeometry) -> float:
    """Integral of quadrature-point values (T, Q)."""
    return float(np.sum(geo.dx * values))


def mass_matrix(space: Space, coef: np.ndarray | float = 1.0) -> sp.csr_matrix:
    c = np.asarray(coef)
    c = c[..., None, None] if c.ndim else c
    return assemble_matrix(lambda u, v: c * v.val[..., :, None] * u.val[..., None, :], space)


def stiffness_matrix(space: Space, coef: np.ndarray | float = 1.0) -> sp.csr_matrix:
    c = np.asarray(coef)
    c = c[..., None, None] if c.ndim else c
    return assemble_matrix(lambda u, v: c * np.einsum("tqid,tqjd->tqij", v.grad, u.grad), space)


def derivative_matrix(test: Space, trial: Space, axis: int) -> sp.csr_matrix:
    """``int test * d(trial)/dx_axis``."""
    return assemble_matrix(lambda u, v: v.val[..., :, None] * u.grad[..., None, :, axis], test, trial)


def divergence_matrices(dm: DofMap) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(Bx, By) with ``[Bx By] @ v = int q div v`` for P1 q, P2 vector v."""
    return derivative_matrix(dm.p1, dm.p2, 0), derivative_matrix(dm.p1, dm.p2, 1)


def elasticity_matrix(space: Space, lame_mu: float, lame_lambda: float) -> sp.csr_matrix:
    """``int 2 mu eps(V):eps(W) + lambda div V div W`` on a blocked vector space."""
    def blk(a, b):
        return assemble_matrix(lambda u, v: np.einsum("tqi,tqj->tqij", a(v), b(u)), space)

    dx_ = lambda b: b.grad[..., 0]  # noqa: E731
    dy_ = lambda b: b.grad[..., 1]  # noqa: E731
    Dxx, Dyy = blk(dx_, dx_), blk(dy_, dy_)
    Dxy, Dyx = blk(dx_, dy_), blk(dy_, dx_)  # Dxy[i,j] = int dx(phi_i) dy(phi_j)
    mu, lam = lame_mu, lame_lambda
    A11 = mu * (2 * Dxx + Dyy) + lam * Dxx
    A22 = mu * (2 * Dyy + Dxx) + lam * Dyy
    A12 = mu * Dyx + lam * Dxy
    A21 = mu * Dxy + lam * Dyx
    return sp.bmat([[A11, A12], [A21, A22]], format="csr")


# --- constraints and solves ---------------------------------------------------


def apply_dirichlet(
    A: sp.spmatrix, b: np.ndarray, dofs: np.ndarray, values: np.ndarray | float = 0.0, symmetric: bool = False
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Replace constrained rows by identity rows with matching rhs.

    With ``symmetric`` the constrained columns are eliminated as well and
    their contribution moved to the right-hand side.
    """
    n = A.shape[0]
    dofs = np.asarray(dofs, dtype=int)
    vals = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    keep = np.ones(n)
    keep[dofs] = 0.0
    P = sp.diags(keep)
    D = sp.diags(1.0 - keep)
    A = sp.csr_matrix(A)
    b = np.array(b, dtype=float, copy=True)
    if symmetric:
        x = np.zeros(n)
        x[dofs] = vals
        b -= A @ x
        A = P @ A @ P + D
    else:
        A = P @ A + D
    b[dofs] = vals
    return A.tocsr(), b


def _check_square(A) -> None:
    if A.shape[0] != A.shape[1]:
        raise LinearSolveError(f"operator is not square: {A.shape}")


def _factorize(A: sp.csc_matrix, robust: bool = False):
    """LU factors of ``A``.

    The default uses a minimum-degree ordering on ``A + A^T`` with weak
    diagonal pivoting, which keeps fill low for saddle-point systems with a
    symmetric pattern. ``robust`` switches to column ordering with partial
    pivoting.
    """
    try:
        if robust:
            return spla.splu(A)
        return spla.splu(
            A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=1e-4, options=dict(SymmetricMode=True)
        )
    except RuntimeError as exc:
        if not robust:
            return _factorize(A, robust=True)
        raise LinearSolveError(f"factorization failed ({exc})") from exc


def _lu_solve(A, lu, b, bound, refine):
    x = lu.solve(b)
    r = b - A @ x
    for _ in range(refine):
        if np.linalg.norm(r) <= bound:
            break
        x = x + lu.solve(r)
        r = b - A @ x
    return x, float(np.linalg.norm(r))


def solve_linear(A: sp.spmatrix, b: np.ndarray, rtol: float = 1e-10, refine: int = 3) -> np.ndarray:
    """Direct sparse solve; residual must satisfy ``|Ax-b| <= rtol (1 + |b|)``."""
    _check_square(A)
    A = sp.csc_matrix(A)
    bound = rtol * (1.0 + np.linalg.norm(b))
    x, res = _lu_solve(A, _factorize(A), b, bound, refine)
    if not np.isfinite(res) or res > bound:
        x, res = _lu_solve(A, _factorize(A, robust=True), b, bound, refine)
    if not np.isfinite(res) or res > bound:
        raise LinearSolveError(f"linear solve residual {res:.3e} exceeds {bound:.3e}")
    return x


class ReusableSolver:
    """Direct solver that recycles an old factorization as a preconditioner.

    Successive Newton or optimization steps produce matrices that differ
    only slightly. Each solve first tries GMRES preconditioned with the last
    LU factors; only if that does not reach the residual bound within
    ``max_krylov`` iterations is the current matrix factorized afresh.
    """

    def __init__(self, max_krylov: int = 25, rtol: float = 1e-10):
        self.max_krylov = max_krylov
        self.rtol = rtol
        self._lu = None
        self.factorizations = 0

    def reset(self) -> None:
        self._lu = None

    def solve(
        self,
        A: sp.spmatrix,
        b: np.ndarray,
        rtol: float | None = None,
        transpose: bool = False,
        refactor: bool = False,
    ) -> np.ndarray:
        """Solve ``A x = b`` (or ``A^T x = b`` with ``transpose``).

        The default bound is ``self.rtol (1 + |b|)``. Passing ``rtol`` asks
        for the purely relative bound ``rtol |b|`` instead, which inexact
        Newton uses for its correction steps. Factors are always kept for
        ``A`` itself so forward and transposed solves share them.
        ``refactor`` skips the Krylov attempt and factorizes ``A`` directly.
        """
        _check_square(A)
        nb = np.linalg.norm(b)
        bound = self.rtol * (1.0 + nb) if rtol is None else max(rtol * nb, self.rtol * 1e-6 * (1.0 + nb))
        trans = "T" if transpose else "N"
        op = A.T.tocsr() if transpose else A
        if not refactor and self._lu is not None and self._lu.shape == A.shape:
            lu = self._lu
            M = spla.LinearOperator(A.shape, matvec=lambda r: lu.solve(r, trans=trans), dtype=float)
            x, _ = spla.gmres(
                op, b, x0=lu.solve(b, trans=trans), M=M, rtol=0.0, atol=0.5 * bound,
                restart=self.max_krylov, maxiter=1,
            )
            res = float(np.linalg.norm(b - op @ x))
            if np.isfinite(res) and res <= bound:
                return x
        Ac = sp.csc_matrix(A)
        for robust in (False, True):
            self._lu = _factorize(Ac, robust)
            self.factorizations += 1
            lu = self._lu
            x = lu.solve(b, trans=trans)
            r = b - op @ x
            for _ in range(3):
                if np.linalg.norm(r) <= bound:
                    break
                x = x + lu.solve(r, trans=trans)
                r = b - op @ x
            res = float(np.linalg.norm(r))
            if np.isfinite(res) and res <= bound:
                return x
        raise LinearSolveError(f"linear solve residual {res:.3e} exceeds {bound:.3e}")


def h1_norm(field: Field) -> float:
    """``sqrt(int |u|^2 + |grad u|^2)`` over the field's mesh."""
    val, grad = field.at_quadrature()
    T, Q = val.shape[:2]
    sq = np.sum(val.reshape(T, Q, -1) ** 2, axis=-1) + np.sum(grad.reshape(T, Q, -1) ** 2, axis=-1)
    return float(np.sqrt(integrate(sq, field.space.geo)))
