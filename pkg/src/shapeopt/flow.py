"""Steady incompressible Navier-Stokes state, adjoint, and shape derivative.

Unknown layout: ``U = [v_x (n2), v_y (n2), p (n1)]`` with P2 velocity and
P1 pressure. The discrete residual is

    F_w = int mu grad v : grad w + rho (grad v v) . w - p div w
    F_q = -int q div v

with Dirichlet velocity on inflow, walls and shapes and do-nothing outflow.
Gradients are stored as ``grad[..., c, d] = d v_c / d x_d``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, Field, LinearSolveError, ReusableSolver, apply_dirichlet, build_dofmap
from .mesh import INFLOW, OUTFLOW, WALL_BOTTOM, WALL_TOP, TriMesh

logger = logging.getLogger(__name__)


class FlowError(RuntimeError):
    pass


class NewtonError(FlowError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class FluidParams:
    mu: float = 1.81
    rho: float = 1.2e5

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("fluid.mu must be > 0")
        if not self.rho >= 0:
            raise ValueError("fluid.rho must be >= 0")


@dataclass(frozen=True)
class BoundaryConditions:
    """Inflow profile ``(a * y * (y - 1), 0)`` on the inflow side.

    ``no_slip`` lists outer tags with zero velocity; every shape boundary is
    no-slip as well. ``natural`` tags carry the do-nothing condition.
    """

    inflow_coefficient: float = 0.08421
    inflow_tags: tuple[int, ...] = (INFLOW,)
    no_slip: tuple[int, ...] = (WALL_TOP, WALL_BOTTOM)
    natural: tuple[int, ...] = (OUTFLOW,)

    def inflow(self, xy: np.ndarray) -> np.ndarray:
        y = xy[:, 1]
        return np.column_stack([self.inflow_coefficient * y * (y - 1.0), np.zeros_like(y)])


@dataclass(frozen=True)
class NewtonParams:
    tol: float = 1e-10
    max_iter: int = 50
    rho_start: float = 1e3
    ramp: float = 3.1622776601683795
    max_refinements: int = 4
    linear_rtol: float = 1e-2


class _Pattern:
    """CSR sparsity of the full Taylor-Hood Jacobian and scatter maps into it."""

    def __init__(self, cd: np.ndarray, cd1: np.ndarray, n2: int, n1: int):
        T = len(cd)
        n = 2 * n2 + n1
        off = n2 * np.arange(2)
        vdof = cd[:, None, :] + off[None, :, None]  # (T, 2, 6)
        shape5 = (T, 2, 6, 2, 6)
        r_vel = np.broadcast_to(vdof[:, :, :, None, None], shape5).ravel()
        c_vel = np.broadcast_to(vdof[:, None, None, :, :], shape5).ravel()
        pdof = 2 * n2 + cd1  # (T, 3)
        shape4 = (T, 2, 3, 6)
        r_B = np.broadcast_to(pdof[:, None, :, None], shape4).ravel()
        c_B = np.broadcast_to(vdof[:, :, None, :], shape4).ravel()
        diag = np.arange(n)
        rows = np.concatenate([r_vel, c_B, r_B, diag])
        cols = np.concatenate([c_vel, r_B, c_B, diag])
        keys = rows.astype(np.int64) * n + cols
        uniq, self.inverse = np.unique(keys, return_inverse=True)
        self.indices = (uniq % n).astype(np.int32)
        row_of = uniq // n
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(row_of, minlength=n))]).astype(np.int32)
        self.nnz = len(uniq)
        self.n = n
        self.row_of = row_of
        self.diag_pos = np.searchsorted(uniq, diag.astype(np.int64) * n + diag)

    def matrix(self, vel: np.ndarray, B_loc: np.ndarray) -> sp.csr_matrix:
        w = np.concatenate([vel.ravel(), -B_loc.ravel(), -B_loc.ravel(), np.zeros(self.n)])
        data = np.bincount(self.inverse, weights=w, minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


class FlowDiscretization:
    """Mesh-dependent Taylor-Hood operators shared by state and adjoint solves.

    Use :meth:`with_mesh` after moving nodes: connectivity-dependent data
    (dofs, sparsity, Dirichlet sets, solver factorizations) carries over.
    """

    def __init__(self, mesh: TriMesh, bcs: BoundaryConditions, dofmap: DofMap | None = None):
        self.bcs = bcs
        dm = dofmap or build_dofmap(mesh)
        if not any(t in dm.p1_boundary for t in bcs.natural):
            raise FlowError("no natural (outflow) boundary: pressure would be undetermined")
        self.n2 = dm.p2.n_dofs
        self.n1 = dm.p1.n_dofs
        self.n = 2 * self.n2 + self.n1
        self.cd = dm.p2.cell_dofs
        self.cd1 = dm.p1.cell_dofs
        self.pattern = _Pattern(self.cd, self.cd1, self.n2, self.n1)

        shape_tags = [int(t) for t in np.unique(mesh.edge_tags) if t >= 100]
        zero_tags = list(bcs.no_slip) + shape_tags
        in_dofs = dm.p2_dofs(bcs.inflow_tags)
        zero_dofs = dm.p2_dofs(zero_tags)
        self._inflow_only = np.setdiff1d(in_dofs, zero_dofs)
        self.vel_dirichlet = np.union1d(in_dofs, zero_dofs)
        self.dirichlet = np.concatenate([self.vel_dirichlet, self.n2 + self.vel_dirichlet])
        self._dir_entries = np.flatnonzero(np.isin(self.pattern.row_of, self.dirichlet))
        self.state_solver = ReusableSolver()
        self.adjoint_solver = ReusableSolver()
        self._set_geometry(dm)

    def with_mesh(self, mesh: TriMesh) -> "FlowDiscretization":
        new = object.__new__(FlowDiscretization)
        new.__dict__.update(self.__dict__)
        new._set_geometry(self.dm.with_mesh(mesh))
        return new

    def _set_geometry(self, dm: DofMap) -> None:
        self.dm = dm
        self.mesh = dm.mesh
        geo = dm.geo
        self.dx = geo.dx  # (T, Q)
        self.phi = dm.p2.basis.val[0]  # (Q, 6)
        self.G = dm.p2.basis.grad  # (T, Q, 6, 2)
        T, Q = self.dx.shape
        Gt = self.G.transpose(0, 2, 1, 3).reshape(T, 6, 2 * Q)
        w = np.repeat(self.dx, 2, axis=1)[:, None, :]
        self.K_loc = (Gt * w) @ Gt.transpose(0, 2, 1)
        self.phiT_dx = self.phi.T[None, :, :] * self.dx[:, None, :]  # (T, 6, Q)
        self.PP = (self.phi[:, :, None] * self.phi[:, None, :]).reshape(Q, 36)
        psi = dm.p1.basis.val[0]  # (Q, 3)
        # B_loc[t, c, a, j] = int psi_a d_c phi_j
        self.B_loc = np.einsum("tq,qa,tqjc->tcaj", self.dx, psi, self.G, optimize=True)
        rows = np.broadcast_to(self.cd[:, :, None], self.K_loc.shape).ravel()
        cols = np.broadcast_to(self.cd[:, None, :], self.K_loc.shape).ravel()
        self.K = sp.coo_matrix((self.K_loc.ravel(), (rows, cols)), shape=(self.n2, self.n2)).tocsr()
        T = len(self.cd)
        rB = np.broadcast_to(self.cd1[:, None, :, None], self.B_loc.shape).ravel()
        cB = np.broadcast_to(self.cd[:, None, None, :] + self.n2 * np.arange(2)[None, :, None, None], self.B_loc.shape).ravel()
        self.B = sp.coo_matrix((self.B_loc.ravel(), (rB, cB)), shape=(self.n1, 2 * self.n2)).tocsr()
        vals = np.zeros((self.n2, 2))
        vals[self._inflow_only] = self.bcs.inflow(dm.p2_coords[self._inflow_only])
        self.dirichlet_values = np.concatenate([vals[self.vel_dirichlet, 0], vals[self.vel_dirichlet, 1]])
        del T

    def split(self, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(n2, 2) velocity dofs and (n1,) pressure dofs."""
        return U[: 2 * self.n2].reshape(2, self.n2).T, U[2 * self.n2 :]

    def velocity_at_quadrature(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        loc = v[self.cd]  # (T, 6, 2)
        val = self.phi[None] @ loc  # (T, Q, 2)
        grad = (self.G.transpose(0, 1, 3, 2) @ loc[:, None]).transpose(0, 1, 3, 2)  # (T, Q, c, d)
        return val, grad

    def pressure_at_quadrature(self, p: np.ndarray) -> np.ndarray:
        return p[self.cd1] @ self.dm.p1.basis.val[0].T  # (T, Q)

    def lift(self) -> np.ndarray:
        U = np.zeros(self.n)
        U[self.dirichlet] = self.dirichlet_values
        return U

    def residual(self, U: np.ndarray, params: FluidParams) -> np.ndarray:
        v, p = self.split(U)
        F = np.empty(self.n)
        Kv = self.K @ v
        if params.rho != 0.0:
            vq, gq = self.velocity_at_quadrature(v)
            a = (gq @ vq[..., None])[..., 0]  # (T, Q, 2) = grad v . v
            conv = self.phiT_dx @ a  # (T, 6, 2)
            for c in range(2):
                Kv[:, c] = params.mu * Kv[:, c] + params.rho * np.bincount(
                    self.cd.ravel(), conv[:, :, c].ravel(), minlength=self.n2
                )
        else:
            Kv *= params.mu
        F[: 2 * self.n2] = Kv.T.ravel() - self.B.T @ p
        F[2 * self.n2 :] = -(self.B @ U[: 2 * self.n2])
        F[self.dirichlet] = 0.0
        return F

    def _velocity_blocks(self, U: np.ndarray, params: FluidParams) -> np.ndarray:
        v, _ = self.split(U)
        T = len(self.cd)
        blocks = np.zeros((T, 2, 6, 2, 6))
        diag = params.mu * self.K_loc
        if params.rho != 0.0:
            vq, gq = self.velocity_at_quadrature(v)
            b = (self.G @ vq[..., None])[..., 0]  # (T, Q, 6) = v . grad phi_j
            diag = diag + params.rho * (self.phiT_dx @ b)
            W = (self.dx[..., None, None] * gq).reshape(T, -1, 4).transpose(0, 2, 1)  # (T, 4, Q)
            R = (W @ self.PP).reshape(T, 2, 2, 6, 6)  # [t, c, k, i, j]
            blocks += params.rho * R.transpose(0, 1, 3, 2, 4)
        blocks[:, 0, :, 0, :] += diag
        blocks[:, 1, :, 1, :] += diag
        return blocks

    def jacobian(self, U: np.ndarray, params: FluidParams) -> sp.csr_matrix:
        """Unconstrained Newton matrix at ``U`` (no Dirichlet rows applied)."""
        return self.pattern.matrix(self._velocity_blocks(U, params), self.B_loc)

    def newton_matrix(self, U: np.ndarray, params: FluidParams) -> sp.csr_matrix:
        """Jacobian with Dirichlet rows replaced by identity rows."""
        J = self.jacobian(U, params)
        J.data[self._dir_entries] = 0.0
        J.data[self.pattern.diag_pos[self.dirichlet]] = 1.0
        return J


@dataclass
class FlowState:
    v: Field
    p: Field
    U: np.ndarray
    residual: float
    newton_iterations: int
    rho_reached: float
    disc: FlowDiscretization = field(repr=False)


@dataclass
class AdjointState:
    lam: Field
    q_adj: Field
    Z: np.ndarray
    residual: float


def _newton(disc: FlowDiscretization, U: np.ndarray, params: FluidParams, tol_abs: float, np_: NewtonParams):
    U = U.copy()
    U[disc.dirichlet] = disc.dirichlet_values
    F = disc.residual(U, params)
    res = float(np.linalg.norm(F))
    its = 0
    while res > tol_abs:
        if its >= np_.max_iter:
            raise NewtonError("Newton did not converge", res)
        J = disc.newton_matrix(U, params)
        try:
            dU = disc.state_solver.solve(J, -F, rtol=np_.linear_rtol)
        except LinearSolveError as exc:
            raise NewtonError(f"Newton linear solve failed: {exc}", res) from exc
        its += 1
        t = 1.0
        for _ in range(8):
            Ut = U + t * dU
            Ft = disc.residual(Ut, params)
            rt = float(np.linalg.norm(Ft))
            if np.isfinite(rt) and (rt < (1 - 1e-4 * t) * res or rt <= tol_abs):
                break
            t *= 0.5
        else:
            raise NewtonError("Newton stalled", res)
        U, F, res = Ut, Ft, rt
    return U, res, its


def residual_scale(disc: FlowDiscretization, params: FluidParams) -> float:
    """Residual norm at the Dirichlet lifting; Newton tolerances are relative to it."""
    return float(np.linalg.norm(disc.residual(disc.lift(), params)))


def solve_state(
    mesh: TriMesh,
    params: FluidParams,
    bcs: BoundaryConditions,
    initial_guess: np.ndarray | None = None,
    newton: NewtonParams = NewtonParams(),
    disc: FlowDiscretization | None = None,
) -> FlowState:
    """Newton solve, with continuation in ``rho`` if full-``rho`` Newton fails.

    Without an initial guess Newton starts from the Stokes solution and goes
    straight to continuation when ``rho`` exceeds ``newton.rho_start``.
    """
    disc = disc or FlowDiscretization(mesh, bcs)
    total = 0

    def attempt(U0, rho):
        nonlocal total
        p = FluidParams(params.mu, rho)
        tol = newton.tol * residual_scale(disc, p)
        U, res, its = _newton(disc, U0, p, tol, newton)
        total += its
        return U, res

    if initial_guess is None:
        U0, res = attempt(disc.lift(), 0.0)
    else:
        U0 = np.array(initial_guess, dtype=float)
    if params.rho == 0.0:
        if initial_guess is not None:
            U0, res = attempt(U0, 0.0)
        return _state(disc, U0, res, total, 0.0)
    if initial_guess is not None or params.rho <= newton.rho_start:
        try:
            U, res = attempt(U0, params.rho)
            return _state(disc, U, res, total, params.rho)
        except NewtonError as exc:
            logger.info("direct Newton at rho=%g failed (%s); continuing in rho", params.rho, exc)

    if initial_guess is not None:
        U0, _ = attempt(disc.lift(), 0.0)
    rho_lo, U_lo = 0.0, U0
    rho_next = min(params.rho, newton.rho_start)
    ramp = newton.ramp
    refinements = 0
    while True:
        try:
            U_lo, res = attempt(U_lo, rho_next)
            rho_lo = rho_next
            if rho_lo >= params.rho:
                break
            rho_next = min(params.rho, rho_lo * ramp)
        except NewtonError as exc:
            refinements += 1
            if refinements > newton.max_refinements:
                raise NewtonError(f"continuation exhausted at rho={rho_lo:g}", exc.residual) from exc
            if rho_lo > 0:
                ramp = math.sqrt(ramp)
                rho_next = rho_lo + (rho_next - rho_lo) / 2 if ramp * rho_lo >= rho_next else rho_lo * ramp
            else:
                rho_next /= newton.ramp
            logger.info("continuation step failed; retrying at rho=%g", rho_next)
    return _state(disc, U_lo, res, total, rho_lo)


def _state(disc, U, res, its, rho):
    v, p = disc.split(U)
    return FlowState(
        v=Field(disc.dm.p2, v.T.ravel(), 2),
        p=Field(disc.dm.p1, p.copy()),
        U=U,
        residual=res,
        newton_iterations=its,
        rho_reached=rho,
        disc=disc,
    )


def objective(state: FlowState, mesh: TriMesh | None = None, params: FluidParams = FluidParams()) -> float:
    """Viscous dissipation ``int mu/2 grad v : grad v``."""
    disc = state.disc
    v, _ = disc.split(state.U)
    return 0.5 * params.mu * float(np.sum(v * (disc.K @ v)))


def solve_adjoint(mesh: TriMesh | None, state: FlowState, params: FluidParams) -> AdjointState:
    """Solve ``J(U)^T Z = -dj/dU`` with homogeneous velocity Dirichlet data.

    With ``J_D`` the Jacobian whose Dirichlet rows are identity rows, the
    interior block of ``J_D^T z = r`` (with ``r`` zero on Dirichlet dofs) is
    exactly the constrained adjoint system. ``J_D`` is factorized afresh and
    solved transposed; Dirichlet entries are reset to 0 afterwards. The new
    factors stay with the state solver and precondition the next Newton
    solves on nearby meshes.
    """
    disc = state.disc
    v, _ = disc.split(state.U)
    rhs = np.zeros(disc.n)
    rhs[: 2 * disc.n2] = -params.mu * (disc.K @ v).T.ravel()
    rhs[disc.dirichlet] = 0.0
    JD = disc.newton_matrix(state.U, params)
    Z = disc.state_solver.solve(JD, rhs, transpose=True, refactor=True)
    Z[disc.dirichlet] = 0.0
    A, b = apply_dirichlet(disc.jacobian(state.U, params).T.tocsr(), rhs, disc.dirichlet, 0.0)
    res = float(np.linalg.norm(A @ Z - b))
    if res > 1e-8 * (1.0 + np.linalg.norm(b)):
        raise LinearSolveError(f"adjoint residual {res:.3e} too large")
    lam, q = disc.split(Z)
    return AdjointState(Field(disc.dm.p2, lam.T.ravel(), 2), Field(disc.dm.p1, q.copy()), Z, res)


def shape_derivative(
    mesh: TriMesh | None, state: FlowState, adjoint: AdjointState, params: FluidParams
) -> np.ndarray:
    """Volume-form shape derivative tested with every P1 vector hat function.

    Returns an (V, 2) array ``D`` with ``dj[W] = sum_a D[a] . W[a]`` for a
    P1 field ``W`` given by its node values.
    """
    disc = state.disc
    mu, rho = params.mu, params.rho
    v, p = disc.split(state.U)
    lam, q = disc.split(adjoint.Z)
    vq, gv = disc.velocity_at_quadrature(v)
    lq, gl = disc.velocity_at_quadrature(lam)
    pq = disc.pressure_at_quadrature(p)
    qq = disc.pressure_at_quadrature(q)
    div_v = gv[..., 0, 0] + gv[..., 1, 1]
    div_l = gl[..., 0, 0] + gl[..., 1, 1]
    conv = (gv @ vq[..., None])[..., 0]
    S = (
        np.sum(gv * (0.5 * mu * gv + mu * gl), axis=(-2, -1))
        + rho * np.sum(lq * conv, axis=-1)
        - pq * div_l
        - qq * div_v
    )
    # integrand = sum_m G[..., m, :] . grad(phi_a) for W = phi_a e_m
    gsum = gv + gl
    gvT = gv.transpose(0, 1, 3, 2)
    G = np.empty(vq.shape[:2] + (2, 2))
    for m in range(2):
        dmv = gv[..., :, m]
        dml = gl[..., :, m]
        Gm = -mu * (gsum.transpose(0, 1, 3, 2) @ dmv[..., None])[..., 0]
        Gm -= mu * (gvT @ dml[..., None])[..., 0]
        Gm -= rho * np.sum(lq * dmv, axis=-1)[..., None] * vq
        Gm += pq[..., None] * dml + qq[..., None] * dmv
        Gm[..., m] += S
        G[..., m, :] = Gm
    glam = disc.dm.geo.glam  # (T, 3, 2)
    Gint = np.einsum("tq,tqmk->tmk", disc.dx, G)
    loc = glam @ Gint.transpose(0, 2, 1)  # (T, 3, m)
    V = disc.mesh.n_nodes
    out = np.empty((V, 2))
    for m in range(2):
        out[:, m] = np.bincount(disc.cd1.ravel(), loc[:, :, m].ravel(), minlength=V)
    return out
