"""Regularized variable-density Navier-Stokes step on the MAC grid.

Velocities are kept in the range of the discrete curl ``C`` of a stream
function on the interior nodes, so every state is exactly divergence-free
with zero normal flux.  Both the momentum step and the velocity filter are
Galerkin projections onto that space: testing with ``C eta`` removes the
pressure and realizes the Leray projection without a separate solve.

The Stokes operator is A = -P L with ``L`` the MAC vector Laplacian.  With
u = C psi and G = C^T C,

    (A u, A xi) = (B psi)^T G^{-1} (B eta),    B = C^T L C,

which is assembled through an auxiliary unknown z = G^{-1} B psi, so each
solve is one sparse LU of a block system.

Per step (implicit Euler, lagged advecting field a = v_{n-1}):

    (R_n v - R_{n-1} v_{n-1}) / h - (R_n - R_{n-1}) v / (2h)
        + N(m) v + A_nu v + beta A^2 v = -chi_{n-1} grad w

with R the face densities, N the skew part of the centred convection by
the mass flux m = rho_h a + Jt, Jt = -(rho1 - rho2) grad u, and A_nu the
quadratic form of int nu(chi) |Dv|^2.  Testing with v gives

    K_n + h[nu|Dv|^2 + beta|Av|^2] + 1/2 |v - v_{n-1}|^2_{R_{n-1}}
        = K_{n-1} - h int chi v . grad w

so the kinetic-energy inequality holds up to round-off.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .field_core import (Grid, PreconditionError, SolverError, Velocity, apply_neg_laplacian,
                         cell_to_xface, cell_to_yface, grad)

log = logging.getLogger(__name__)

BOUNDARY_CONDITIONS = ("no-slip", "free-slip")


@dataclass
class FluidParams:
    rho1: float = 1.0
    rho2: float = 1.0
    nu1: float = 1.0
    nu2: float = 1.0
    k: float = 1.0
    beta: float = 1.0
    bc: str = "no-slip"
    coupled: bool = True      # k, beta derived from h
    override: str = ""        # reason when not coupled

    def __post_init__(self):
        for name in ("rho1", "rho2", "nu1", "nu2", "k"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"{name} must be positive")
        if self.beta < 0:
            raise PreconditionError("beta must be non-negative")
        if self.bc not in BOUNDARY_CONDITIONS:
            raise PreconditionError(f"unknown boundary condition {self.bc!r}")

    @classmethod
    def scale_coupled(cls, h: float, **kw) -> "FluidParams":
        """k = h^(-1/8), beta = 1/k."""
        if not h > 0:
            raise PreconditionError("h must be positive")
        k = h ** (-1.0 / 8.0)
        return cls(k=k, beta=1.0 / k, coupled=True, **kw)

    @classmethod
    def exploration(cls, k: float, beta: float, reason: str = "exploration", **kw) -> "FluidParams":
        log.info("scale coupling overridden: k=%g beta=%g (%s)", k, beta, reason)
        return cls(k=k, beta=beta, coupled=False, override=reason, **kw)

    @property
    def rho_bounds(self) -> tuple[float, float]:
        return min(self.rho1, self.rho2), max(self.rho1, self.rho2)

    def density(self, chi: np.ndarray) -> np.ndarray:
        return self.rho1 * chi + self.rho2 * (1.0 - chi)

    def viscosity(self, chi: np.ndarray) -> np.ndarray:
        return self.nu1 * chi + self.nu2 * (1.0 - chi)


# ---------------------------------------------------------------- operators

def _d1(n: int) -> sparse.csr_matrix:
    """(n, n-1): cell i gets f_{i+1} - f_i from the interior faces."""
    return sparse.diags([np.ones(n - 1), -np.ones(n - 1)], [0, -1], shape=(n, n - 1)).tocsr()


def _g1(n: int, sigma: float) -> sparse.csr_matrix:
    """(n+1, n): node j gets f_j - f_{j-1}, ghosts f_{-1} = sigma f_0, f_n = sigma f_{n-1}."""
    m = sparse.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n)).tolil()
    m[0, 0] = 1.0 - sigma
    m[n, n - 1] = sigma - 1.0
    return m.tocsr()


def _inner(n: int) -> sparse.csr_matrix:
    """(n+1, n-1): node i picks interior face i (1 <= i <= n-1)."""
    return sparse.eye(n + 1, n - 1, k=-1, format="csr")


def _centred(n: int, sigma: float | None) -> sparse.csr_matrix:
    """Centred difference on n points; outside values 0 or sigma-mirrored."""
    m = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n)).tolil() * 0.5
    if sigma is not None:
        m[0, 0] = -0.5 * sigma
        m[n - 1, n - 1] = 0.5 * sigma
    return m.tocsr()


@dataclass
class Operators:
    grid: Grid
    bc: str
    C: sparse.csr_matrix          # stream values -> interior faces
    G: sparse.csr_matrix          # C^T C
    L: sparse.csr_matrix          # MAC vector Laplacian on interior faces
    B: sparse.csr_matrix          # C^T L C
    Dx: sparse.csr_matrix         # d/dx of u at cells
    Dy: sparse.csr_matrix         # d/dy of v at cells
    S: sparse.csr_matrix          # shear du/dy + dv/dx at nodes
    node_weight: np.ndarray       # trapezoid weights (relative to dA)
    Cx_u: sparse.csr_matrix       # centred d/dx, d/dy of u and v
    Cy_u: sparse.csr_matrix
    Cx_v: sparse.csr_matrix
    Cy_v: sparse.csr_matrix
    G_lu: object = None

    @property
    def nu_(self) -> int:
        return (self.grid.nx - 1) * self.grid.ny

    def split(self, x: np.ndarray) -> Velocity:
        g = self.grid
        V = Velocity.zeros(g)
        V.u[1:-1] = x[:self.nu_].reshape(g.nx - 1, g.ny)
        V.v[:, 1:-1] = x[self.nu_:].reshape(g.nx, g.ny - 1)
        return V

    def join(self, V: Velocity) -> np.ndarray:
        return np.concatenate([V.u[1:-1].ravel(), V.v[:, 1:-1].ravel()])

    def velocity(self, psi: np.ndarray) -> Velocity:
        return self.split(self.C @ psi)

    def stream(self, V: Velocity) -> np.ndarray:
        """Least-squares stream function: the discrete Leray projection of V."""
        return self.G_lu.solve(self.C.T @ self.join(V))


@lru_cache(maxsize=16)
def operators(grid: Grid, bc: str = "no-slip") -> Operators:
    if bc not in BOUNDARY_CONDITIONS:
        raise PreconditionError(f"unknown boundary condition {bc!r}")
    nx, ny, dx, dy = grid.nx, grid.ny, grid.dx, grid.dy
    sigma = -1.0 if bc == "no-slip" else 1.0
    Ix, Iy = sparse.identity(nx, format="csr"), sparse.identity(ny, format="csr")
    # stream function on interior nodes, zero on the boundary
    dnx = _g1(nx - 1, 0.0)   # node-to-face differences, zero outside
    dny = _g1(ny - 1, 0.0)
    Ixi, Iyi = sparse.identity(nx - 1, format="csr"), sparse.identity(ny - 1, format="csr")
    Cu = sparse.kron(Ixi, dny / dy)              # u = d psi / dy on (nx-1, ny)
    Cv = -sparse.kron(dnx / dx, Iyi)             # v = -d psi / dx on (nx, ny-1)
    C = sparse.vstack([Cu, Cv]).tocsr()
    G = (C.T @ C).tocsc()

    Dx = sparse.kron(_d1(nx) / dx, Iy).tocsr()
    Dy = sparse.kron(Ix, _d1(ny) / dy).tocsr()
    Sy = sparse.kron(_inner(nx), _g1(ny, sigma) / dy)
    Sx = sparse.kron(_g1(nx, sigma) / dx, _inner(ny))
    S = sparse.hstack([Sy, Sx]).tocsr()
    wx = np.ones(nx + 1)
    wx[[0, -1]] = 0.5
    wy = np.ones(ny + 1)
    wy[[0, -1]] = 0.5
    wn = np.outer(wx, wy).ravel()
    Wn = sparse.diags(wn)
    Luu = -(Dx.T @ Dx + Sy.T @ Wn @ Sy)
    Lvv = -(Dy.T @ Dy + Sx.T @ Wn @ Sx)
    L = sparse.block_diag([Luu, Lvv]).tocsr()
    B = (C.T @ L @ C).tocsr()

    Cx_u = sparse.kron(_centred(nx - 1, None) / dx, Iy)
    Cy_u = sparse.kron(Ixi, _centred(ny, sigma) / dy)
    Cx_v = sparse.kron(_centred(nx, sigma) / dx, Iyi)
    Cy_v = sparse.kron(Ix, _centred(ny - 1, None) / dy)
    ops = Operators(grid, bc, C, G.tocsr(), L, B, Dx, Dy, S, wn,
                    Cx_u.tocsr(), Cy_u.tocsr(), Cx_v.tocsr(), Cy_v.tocsr())
    ops.G_lu = spla.splu(G)
    return ops


def _solve(M: sparse.spmatrix, rhs: np.ndarray, what: str) -> np.ndarray:
    M = M.tocsc()
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:     # singular factor
        raise SolverError(f"{what}: {exc}") from exc
    x = lu.solve(rhs)
    # the biharmonic block is stiff; refinement recovers the lost digits
    for _ in range(2):
        x = x + lu.solve(rhs - M @ x)
    res = backward_error(M, x, rhs)
    if not np.isfinite(x).all() or res > 1e-10:
        raise SolverError(f"{what} did not converge", res)
    return x


def backward_error(M: sparse.spmatrix, x: np.ndarray, rhs: np.ndarray) -> float:
    """Componentwise backward error max |Mx - b| / (|M||x| + |b|)."""
    r = np.abs(M @ x - rhs)
    scale = abs(M) @ np.abs(x) + np.abs(rhs)
    if not scale.any():
        return 0.0
    return float(np.max(r / np.where(scale > 0, scale, 1.0)))


# ----------------------------------------------------------------- states

@dataclass
class FluidState:
    grid: Grid
    v: Velocity
    rho_h: np.ndarray           # cell density at time t
    t: float = 0.0
    psi: np.ndarray | None = None

    @classmethod
    def from_velocity(cls, grid: Grid, V: Velocity, rho: np.ndarray, bc: str = "no-slip",
                      t: float = 0.0) -> "FluidState":
        """Project V onto the discrete divergence-free space."""
        ops = operators(grid, bc)
        psi = ops.stream(V)
        return cls(grid, ops.velocity(psi), np.asarray(rho, dtype=float), t, psi)

    @classmethod
    def rest(cls, grid: Grid, rho: np.ndarray, t: float = 0.0) -> "FluidState":
        return cls(grid, Velocity.zeros(grid), np.asarray(rho, dtype=float), t,
                   np.zeros((grid.nx - 1) * (grid.ny - 1)))


@dataclass
class FilterState:
    """Filter history: stream values of u_k and z = G^{-1} B psi."""
    phi: np.ndarray
    z: np.ndarray

    @classmethod
    def zero(cls, grid: Grid) -> "FilterState":
        n = (grid.nx - 1) * (grid.ny - 1)
        return cls(np.zeros(n), np.zeros(n))


@dataclass
class FilteredVelocity:
    u_k: Velocity
    state: FilterState
    residual: float            # backward error of the block solve
    norm: float                # L2 norm of u_k
    cutoff_norm: float         # L2 norm of M_k(v)
    v_norm: float


def face_density(rho: np.ndarray) -> np.ndarray:
    return np.concatenate([cell_to_xface(rho)[1:-1].ravel(), cell_to_yface(rho)[:, 1:-1].ravel()])


def density_interpolant(chi_prev: np.ndarray, chi_new: np.ndarray, theta: float,
                        params: FluidParams) -> np.ndarray:
    """rho(chi_prev) (1 - theta) + rho(chi_new) theta."""
    if not 0.0 <= theta <= 1.0:
        raise PreconditionError("theta must lie in [0, 1]")
    a = params.density(np.asarray(getattr(chi_prev, "values", chi_prev), dtype=float))
    b = params.density(np.asarray(getattr(chi_new, "values", chi_new), dtype=float))
    if theta == 0.0:
        return a
    if theta == 1.0:
        return b
    return (1.0 - theta) * a + theta * b


def kinetic_energy(grid: Grid, V: Velocity, rho: np.ndarray) -> float:
    ru, rv = cell_to_xface(rho), cell_to_yface(rho)
    return 0.5 * grid.dA * float(np.sum(ru * V.u**2) + np.sum(rv * V.v**2))


def l2_norm(grid: Grid, V: Velocity) -> float:
    return math.sqrt(grid.dA * float(np.sum(V.u**2) + np.sum(V.v**2)))


# ------------------------------------------------------------------ filter

def cutoff(V: Velocity, k: float) -> Velocity:
    """Componentwise clamp to [-k, k]."""
    if not k > 0:
        raise PreconditionError("k must be positive")
    return Velocity(np.clip(V.u, -k, k), np.clip(V.v, -k, k))


@lru_cache(maxsize=8)
def _filter_factor(grid: Grid, bc: str, k: float, h: float | None):
    ops = operators(grid, bc)
    c = 1.0 / k if h is None else 1.0 / (k * h) + 1.0 / k
    M = sparse.bmat([[ops.G, c * ops.B], [ops.B, -ops.G]]).tocsc()
    return M, spla.splu(M)


def filter_velocity(grid: Grid, V: Velocity, k: float, h: float | None,
                    prev: FilterState | None = None, bc: str = "no-slip") -> FilteredVelocity:
    """One implicit step of (1/k) d/dt A^2 u + (1/k) A^2 u + u = P M_k(v).

    ``h=None`` solves the stationary problem (1/k) A^2 u + u = P M_k(v).
    """
    if h is not None and not h > 0:
        raise PreconditionError("h must be positive")
    ops = operators(grid, bc)
    prev = prev or FilterState.zero(grid)
    Mk = cutoff(V, k)
    n = ops.G.shape[0]
    rhs = np.zeros(2 * n)
    rhs[:n] = ops.C.T @ ops.join(Mk)
    if h is not None:
        rhs[:n] += ops.B.T @ prev.z / (k * h)
    M, lu = _filter_factor(grid, bc, float(k), None if h is None else float(h))
    x = lu.solve(rhs)
    for _ in range(2):
        x = x + lu.solve(rhs - M @ x)
    res = backward_error(M, x, rhs)
    if not np.isfinite(x).all() or res > 1e-10:
        raise SolverError("filter solve failed", res)
    st = FilterState(x[:n], x[n:])
    u_k = ops.velocity(st.phi)
    return FilteredVelocity(u_k, st, res, l2_norm(grid, u_k), l2_norm(grid, Mk), l2_norm(grid, V))


def stationary_filter_residual(grid: Grid, V: Velocity, u_k: Velocity, k: float,
                               bc: str = "no-slip") -> float:
    """Relative residual of (1/k) A^2 u + u = P M_k(v) in the weak form."""
    ops = operators(grid, bc)
    phi = ops.stream(u_k)
    z = ops.G_lu.solve(ops.B @ phi)
    rhs = ops.C.T @ ops.join(cutoff(V, k))
    r = ops.B.T @ z / k + ops.G @ phi - rhs
    return float(np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300))


# ---------------------------------------------------------------- momentum

@dataclass
class FluidStepReport:
    kinetic_prev: float
    kinetic: float
    viscous: float            # h int nu |Dv|^2
    regularisation: float     # h beta |Av|^2
    work: float               # h int chi v . grad w
    numerical: float          # 1/2 |v - v_prev|^2 in the R_{n-1} norm
    momentum_correction: float  # h/2 <d.rho - d_t rho, |v|^2>
    residual: float           # v-side inequality residual (<= 0 up to round-off)
    substeps: int
    cfl: float

    @property
    def dissipation(self) -> float:
        return self.viscous + self.regularisation


def viscous_matrix(ops: Operators, nu: np.ndarray) -> sparse.csr_matrix:
    """Quadratic form of int nu |Dv|^2 with D the symmetric gradient."""
    g = ops.grid
    nuc = nu.ravel()
    p = np.pad(nu, 1, mode="edge")
    nun = 0.25 * (p[1:, 1:] + p[:-1, 1:] + p[1:, :-1] + p[:-1, :-1]).ravel()
    Wc = sparse.diags(nuc * g.dA)
    Wn = sparse.diags(0.5 * nun * ops.node_weight * g.dA)
    Dx = sparse.hstack([ops.Dx, sparse.csr_matrix((g.nx * g.ny, g.nx * (g.ny - 1)))])
    Dy = sparse.hstack([sparse.csr_matrix((g.nx * g.ny, (g.nx - 1) * g.ny)), ops.Dy])
    return (Dx.T @ Wc @ Dx + Dy.T @ Wc @ Dy + ops.S.T @ Wn @ ops.S).tocsr()


def mass_flux(grid: Grid, a: Velocity, rho: np.ndarray, u_kin: np.ndarray | None,
              params: FluidParams) -> Velocity:
    """m = rho a + Jt with Jt = -(rho1 - rho2) grad u on the faces."""
    m = Velocity(cell_to_xface(rho) * a.u, cell_to_yface(rho) * a.v)
    if u_kin is not None and params.rho1 != params.rho2:
        g = grad(grid, u_kin)
        m = m - g.scale(params.rho1 - params.rho2)
    m.u[[0, -1]] = 0.0
    m.v[:, [0, -1]] = 0.0
    return m


def convection_matrix(ops: Operators, m: Velocity) -> sparse.csr_matrix:
    """Skew part of the centred (m . grad) acting on each component."""
    g = ops.grid
    mxu = m.u[1:-1]
    pv = np.pad(m.v, ((1, 1), (0, 0)))
    myu = 0.25 * (pv[:-1, :-1] + pv[:-1, 1:] + pv[1:, :-1] + pv[1:, 1:])[1:-1]
    myv = m.v[:, 1:-1]
    pu = np.pad(m.u, ((0, 0), (1, 1)))
    mxv = 0.25 * (pu[:-1, :-1] + pu[1:, :-1] + pu[:-1, 1:] + pu[1:, 1:])[:, 1:-1]
    Nu = sparse.diags(mxu.ravel()) @ ops.Cx_u + sparse.diags(myu.ravel()) @ ops.Cy_u
    Nv = sparse.diags(mxv.ravel()) @ ops.Cx_v + sparse.diags(myv.ravel()) @ ops.Cy_v
    N = sparse.block_diag([Nu, Nv]).tocsr()
    return (0.5 * (N - N.T) * g.dA).tocsr()


def forcing(grid: Grid, chi: np.ndarray, w: np.ndarray | None) -> Velocity:
    """-chi grad w on the faces, chi averaged to the faces."""
    if w is None:
        return Velocity.zeros(grid)
    g = grad(grid, w)
    return Velocity(-cell_to_xface(chi) * g.u, -cell_to_yface(chi) * g.v)


def ns_step(grid: Grid, state: FluidState, chi_prev: np.ndarray, chi_new: np.ndarray,
            u_kin: np.ndarray | None, w: np.ndarray | None, h: float,
            params: FluidParams) -> tuple[FluidState, FluidStepReport]:
    """Advance v over one outer step of length h.

    ``w`` is the time-averaged curvature potential of the step and
    ``u_kin`` the kinetic potential driving the flux Jt.
    """
    if not h > 0:
        raise PreconditionError("h must be positive")
    chi_prev = np.asarray(getattr(chi_prev, "values", chi_prev), dtype=float)
    chi_new = np.asarray(getattr(chi_new, "values", chi_new), dtype=float)
    ops = operators(grid, params.bc)
    spacing = min(grid.dx, grid.dy)
    cfl = state.v.max_abs() * h / spacing
    nsub = 1
    if cfl > 1.0:
        nsub = int(math.ceil(cfl))
        log.warning("CFL %.3g > 1; splitting the fluid step into %d substeps", cfl, nsub)
    hs = h / nsub
    f = ops.join(forcing(grid, chi_prev, w))
    Anu = viscous_matrix(ops, params.viscosity(chi_prev))
    n = ops.G.shape[0]
    psi = state.psi if state.psi is not None else ops.stream(state.v)
    v = ops.C @ psi
    K0 = kinetic_energy(grid, state.v, state.rho_h)
    visc = reg = work = numer = corr = 0.0
    rho_prev = state.rho_h
    # material derivative of the density, (rho1 - rho2) Delta u
    ddot = np.zeros(grid.shape)
    if u_kin is not None and params.rho1 != params.rho2:
        ddot = -(params.rho1 - params.rho2) * apply_neg_laplacian(grid, np.asarray(u_kin, dtype=float), "fd")
    dface = face_density(ddot)
    for s in range(nsub):
        rho_a = rho_prev if s == 0 else density_interpolant(chi_prev, chi_new, s / nsub, params)
        rho_b = density_interpolant(chi_prev, chi_new, (s + 1) / nsub, params)
        Ra, Rb = face_density(rho_a), face_density(rho_b)
        a = ops.split(v)
        m = mass_flux(grid, a, 0.5 * (rho_a + rho_b), u_kin, params)
        N = convection_matrix(ops, m)
        mass = sparse.diags(0.5 * (Ra + Rb) * grid.dA / hs)
        S = ops.C.T @ (mass + N + Anu) @ ops.C
        rhs = np.zeros(2 * n)
        rhs[:n] = ops.C.T @ (grid.dA * (Ra * v / hs + f))
        if params.beta > 0:
            M = sparse.bmat([[S, params.beta * grid.dA * ops.B], [ops.B, -ops.G]])
            x = _solve(M, rhs, "momentum solve")
            psi, z = x[:n], x[n:]
        else:
            psi = _solve(S, rhs[:n], "momentum solve")
            z = np.zeros(n)
        vn = ops.C @ psi
        visc += hs * float(vn @ (Anu @ vn))
        if params.beta > 0:
            reg += hs * params.beta * grid.dA * float((ops.B @ psi) @ z)
        work += -hs * grid.dA * float(f @ vn)
        dv = vn - v
        numer += 0.5 * grid.dA * float(np.sum(Ra * dv * dv))
        corr += 0.5 * grid.dA * float(np.sum((hs * dface - (Rb - Ra)) * vn * vn))
        v = vn
    rho_n = params.density(chi_new)
    Vn = ops.split(v)
    K1 = kinetic_energy(grid, Vn, rho_n)
    resid = K1 + visc + reg - K0 + work
    new = FluidState(grid, Vn, rho_n, state.t + h, psi)
    return new, FluidStepReport(K0, K1, visc, reg, work, numer, corr, resid, nsub, cfl)


def taylor_green_rate(nu: float, beta: float = 0.0, Lx: float = 1.0, Ly: float = 1.0) -> float:
    """Kinetic-energy decay rate of the box mode for int nu Dv:Dxi + beta |Av|^2."""
    lam = (math.pi / Lx) ** 2 + (math.pi / Ly) ** 2
    return nu * lam + 2.0 * beta * lam**2
