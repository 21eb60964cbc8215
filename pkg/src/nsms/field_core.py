"""Discrete domain, staggered operators and the Neumann H^-1 machinery.

Scalars live at cell centres of a uniform rectangle, stored as arrays of
shape (nx, ny) with axis 0 along x.  Velocities are face-centred (MAC):
``u`` has shape (nx+1, ny) on x-faces, ``v`` has shape (nx, ny+1) on
y-faces, and the normal component on the outer boundary is zero.

Two Poisson backends share one DCT-II transform:

* ``"spectral"`` uses the continuous symbol (pi k / L)^2, exact for cosine
  modes;
* ``"fd"`` uses the 5-point symbol, exactly consistent with ``grad``/``div``,
  second order in the spacing.

``"cg"`` solves the 5-point system iteratively and exists as a fallback for
checking the FD transform.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import sparse
from scipy.sparse import linalg as spla

BACKENDS = ("spectral", "fd", "cg")
MEAN_TOL = 1e-10
SOLVER_TOL = 1e-10


class PreconditionError(ValueError):
    """Raised when an operation is called outside its domain."""


class SolverError(RuntimeError):
    """Raised when an iterative solver fails; carries the final residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise PreconditionError(f"grid needs nx, ny >= 8, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise PreconditionError("domain side lengths must be positive")

    @property
    def dx(self) -> float:
        return self.Lx / self.nx

    @property
    def dy(self) -> float:
        return self.Ly / self.ny

    @property
    def dA(self) -> float:
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def area(self) -> float:
        return self.Lx * self.Ly

    @property
    def h(self) -> float:
        """Largest spacing."""
        return max(self.dx, self.dy)

    def xc(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def yc(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xc(), self.yc(), indexing="ij")

    def xfaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates of x-face midpoints, shape (nx+1, ny)."""
        return np.meshgrid(np.arange(self.nx + 1) * self.dx, self.yc(), indexing="ij")

    def yfaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates of y-face midpoints, shape (nx, ny+1)."""
        return np.meshgrid(self.xc(), np.arange(self.ny + 1) * self.dy, indexing="ij")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(np.arange(self.nx + 1) * self.dx,
                           np.arange(self.ny + 1) * self.dy, indexing="ij")


@dataclass
class Velocity:
    """Face-centred velocity; ``u`` on x-faces and ``v`` on y-faces."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, grid: Grid) -> "Velocity":
        return cls(np.zeros((grid.nx + 1, grid.ny)), np.zeros((grid.nx, grid.ny + 1)))

    def copy(self) -> "Velocity":
        return Velocity(self.u.copy(), self.v.copy())

    def __add__(self, other: "Velocity") -> "Velocity":
        return Velocity(self.u + other.u, self.v + other.v)

    def __sub__(self, other: "Velocity") -> "Velocity":
        return Velocity(self.u - other.u, self.v - other.v)

    def scale(self, a: float) -> "Velocity":
        return Velocity(a * self.u, a * self.v)

    def max_abs(self) -> float:
        return float(max(np.abs(self.u).max(), np.abs(self.v).max()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.u).all() and np.isfinite(self.v).all())


def check_shape(grid: Grid, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise PreconditionError(f"field shape {f.shape} does not match grid {grid.shape}")
    return f


# ---------------------------------------------------------------- reductions

def integral(grid: Grid, f: np.ndarray) -> float:
    return float(np.sum(f) * grid.dA)


def volume_mean(grid: Grid, f: np.ndarray) -> float:
    return float(np.sum(f) / f.size)


def project_mean_zero(grid: Grid, f: np.ndarray) -> np.ndarray:
    f = check_shape(grid, f)
    return f - volume_mean(grid, f)


def is_mean_zero(grid: Grid, f: np.ndarray, tol: float = MEAN_TOL) -> bool:
    scale = max(float(np.abs(f).max()), 1.0)
    return abs(volume_mean(grid, f)) <= tol * scale


def l2_inner(grid: Grid, f: np.ndarray, g: np.ndarray) -> float:
    return float(np.sum(f * g) * grid.dA)


def velocity_inner(grid: Grid, a: Velocity, b: Velocity) -> float:
    """Face-lumped L2 product; boundary normal faces carry zero anyway."""
    return float((np.sum(a.u * b.u) + np.sum(a.v * b.v)) * grid.dA)


# ----------------------------------------------------------- DCT machinery

def dct2(f: np.ndarray) -> np.ndarray:
    return sfft.dctn(f, type=2, norm="ortho")


def idct2(c: np.ndarray) -> np.ndarray:
    return sfft.idctn(c, type=2, norm="ortho")


@lru_cache(maxsize=64)
def _symbol(nx: int, ny: int, Lx: float, Ly: float, backend: str) -> np.ndarray:
    kx = np.arange(nx)
    ky = np.arange(ny)
    if backend == "spectral":
        lx = (np.pi * kx / Lx) ** 2
        ly = (np.pi * ky / Ly) ** 2
    elif backend in ("fd", "cg"):
        dx, dy = Lx / nx, Ly / ny
        lx = (2.0 - 2.0 * np.cos(np.pi * kx / nx)) / dx**2
        ly = (2.0 - 2.0 * np.cos(np.pi * ky / ny)) / dy**2
    else:
        raise PreconditionError(f"unknown Poisson backend {backend!r}")
    lam = lx[:, None] + ly[None, :]
    lam.setflags(write=False)
    return lam


def laplace_symbol(grid: Grid, backend: str = "spectral") -> np.ndarray:
    """Eigenvalues of -Delta_N in the DCT-II basis (zero mode first)."""
    return _symbol(grid.nx, grid.ny, float(grid.Lx), float(grid.Ly), backend)


@lru_cache(maxsize=64)
def _inv_symbol(nx: int, ny: int, Lx: float, Ly: float, backend: str) -> np.ndarray:
    lam = _symbol(nx, ny, Lx, Ly, backend)
    inv = np.zeros_like(lam)
    inv[lam > 0] = 1.0 / lam[lam > 0]
    inv[0, 0] = 0.0
    inv.setflags(write=False)
    return inv


def inverse_symbol(grid: Grid, backend: str = "spectral") -> np.ndarray:
    return _inv_symbol(grid.nx, grid.ny, float(grid.Lx), float(grid.Ly), backend)


def apply_neg_laplacian(grid: Grid, phi: np.ndarray, backend: str = "spectral") -> np.ndarray:
    """-Delta_N phi for the chosen backend (5-point mirror stencil for fd/cg)."""
    phi = check_shape(grid, phi)
    if backend == "spectral":
        return idct2(dct2(phi) * laplace_symbol(grid, backend))
    if backend not in ("fd", "cg"):
        raise PreconditionError(f"unknown Poisson backend {backend!r}")
    return -div(grid, grad(grid, phi))


def heat_smooth(grid: Grid, f: np.ndarray, eps: float) -> np.ndarray:
    """Neumann heat kernel of width ``eps``: exp(eps^2/2 * Delta_fd) f."""
    lam = laplace_symbol(grid, "fd")
    return idct2(dct2(f) * np.exp(-0.5 * eps**2 * lam))


# ---------------------------------------------------------- Poisson solves

def _neg_laplacian_matrix(grid: Grid) -> sparse.csr_matrix:
    def lap1(n: int, d: float) -> sparse.csr_matrix:
        main = np.full(n, 2.0)
        main[0] = main[-1] = 1.0
        off = -np.ones(n - 1)
        return sparse.diags([off, main, off], [-1, 0, 1]) / d**2

    ix = sparse.identity(grid.nx)
    iy = sparse.identity(grid.ny)
    return (sparse.kron(lap1(grid.nx, grid.dx), iy) + sparse.kron(ix, lap1(grid.ny, grid.dy))).tocsr()


def dense_neg_laplacian(grid: Grid, backend: str = "fd") -> np.ndarray:
    """Dense matrix of -Delta_N acting on row-major flattened fields."""
    if backend in ("fd", "cg"):
        return _neg_laplacian_matrix(grid).toarray()
    n = grid.nx * grid.ny
    eye = np.eye(n).reshape(n, grid.nx, grid.ny)
    cols = [apply_neg_laplacian(grid, e, "spectral").ravel() for e in eye]
    return np.array(cols).T


def neumann_poisson_solve(grid: Grid, f: np.ndarray, backend: str = "spectral",
                          tol: float = SOLVER_TOL, maxiter: int = 20000,
                          check: bool = True) -> np.ndarray:
    """Mean-zero phi with -Delta_N phi = f.

    ``f`` must have zero mean.  For the transform backends the residual is
    recomputed with the matching operator when ``check`` is set.
    """
    f = check_shape(grid, f)
    if not np.isfinite(f).all():
        raise PreconditionError("non-finite right-hand side")
    if not is_mean_zero(grid, f):
        raise PreconditionError(f"right-hand side has mean {volume_mean(grid, f):.3e}")
    f = f - volume_mean(grid, f)
    fscale = max(float(np.abs(f).max()), np.finfo(float).tiny)

    if backend == "cg":
        A = _neg_laplacian_matrix(grid)
        sol, info = spla.cg(A, f.ravel(), rtol=tol * 1e-2, atol=0.0, maxiter=maxiter)
        phi = sol.reshape(grid.shape)
        phi -= volume_mean(grid, phi)
        res = float(np.abs(A @ phi.ravel() - f.ravel()).max()) / fscale
        if info != 0 or res > tol * 10:
            raise SolverError("conjugate gradient did not converge", res)
        return phi

    phi = idct2(dct2(f) * inverse_symbol(grid, backend))
    phi -= volume_mean(grid, phi)
    if check:
        res = float(np.abs(apply_neg_laplacian(grid, phi, backend) - f).max()) / fscale
        if res > max(tol, 1e3 * np.finfo(float).eps * max(grid.nx, grid.ny) ** 2):
            raise SolverError("Poisson residual above tolerance", res)
    return phi


def hm1_inner(grid: Grid, f: np.ndarray, g: np.ndarray, backend: str = "spectral") -> float:
    """H^-1_(0) inner product int grad(-Delta)^-1 f . grad(-Delta)^-1 g dx."""
    f = check_shape(grid, f)
    g = check_shape(grid, g)
    if not (is_mean_zero(grid, f) and is_mean_zero(grid, g)):
        raise PreconditionError("hm1_inner needs mean-zero arguments")
    fh = dct2(f - volume_mean(grid, f))
    gh = dct2(g - volume_mean(grid, g))
    # orthonormal DCT: Parseval holds coefficient-wise
    return float(np.sum(fh * gh * inverse_symbol(grid, backend)) * grid.dA)


def hm1_norm_sq(grid: Grid, f: np.ndarray, backend: str = "spectral") -> float:
    return hm1_inner(grid, f, f, backend)


# ------------------------------------------------------ staggered operators

def grad(grid: Grid, f: np.ndarray) -> Velocity:
    """Face gradient with zero normal component on the boundary."""
    g = Velocity.zeros(grid)
    g.u[1:-1] = (f[1:] - f[:-1]) / grid.dx
    g.v[:, 1:-1] = (f[:, 1:] - f[:, :-1]) / grid.dy
    return g


def div(grid: Grid, V: Velocity) -> np.ndarray:
    return (V.u[1:] - V.u[:-1]) / grid.dx + (V.v[:, 1:] - V.v[:, :-1]) / grid.dy


def boundary_normal_max(V: Velocity) -> float:
    return float(max(np.abs(V.u[[0, -1]]).max(), np.abs(V.v[:, [0, -1]]).max()))


def adjoint_pair_check(grid: Grid, f: np.ndarray, G: Velocity) -> float:
    """|<grad f, G> + <f, div G>| for a boundary-tangent face field G."""
    f = check_shape(grid, f)
    if boundary_normal_max(G) > 0.0:
        raise PreconditionError("G must have zero normal component on the boundary")
    lhs = velocity_inner(grid, grad(grid, f), G)
    rhs = l2_inner(grid, f, div(grid, G))
    return abs(lhs + rhs)


def face_to_cell(grid: Grid, V: Velocity) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (V.u[1:] + V.u[:-1]), 0.5 * (V.v[:, 1:] + V.v[:, :-1])


def cell_to_xface(f: np.ndarray) -> np.ndarray:
    """Average of the two adjacent cells; boundary faces copy the inner cell."""
    out = np.empty((f.shape[0] + 1, f.shape[1]))
    out[1:-1] = 0.5 * (f[1:] + f[:-1])
    out[0] = f[0]
    out[-1] = f[-1]
    return out


def cell_to_yface(f: np.ndarray) -> np.ndarray:
    out = np.empty((f.shape[0], f.shape[1] + 1))
    out[:, 1:-1] = 0.5 * (f[:, 1:] + f[:, :-1])
    out[:, 0] = f[:, 0]
    out[:, -1] = f[:, -1]
    return out


def sample_velocity(grid: Grid, fn) -> Velocity:
    """Sample an analytic field ``fn(x, y) -> (vx, vy)`` on the MAC faces.

    Boundary normal components are zeroed so the result is tangent.
    """
    xu, yu = grid.xfaces()
    xv, yv = grid.yfaces()
    u = np.asarray(fn(xu, yu)[0], dtype=float) * np.ones_like(xu)
    v = np.asarray(fn(xv, yv)[1], dtype=float) * np.ones_like(xv)
    u[[0, -1]] = 0.0
    v[:, [0, -1]] = 0.0
    return Velocity(u, v)


def taylor_green(grid: Grid, amplitude: float = 1.0) -> Velocity:
    """Box Taylor-Green vortex; exactly tangent on the boundary of [0,Lx]x[0,Ly]."""
    ax, ay = np.pi / grid.Lx, np.pi / grid.Ly

    def fn(x, y):
        return (amplitude * ay * np.sin(ax * x) * np.cos(ay * y),
                -amplitude * ax * np.cos(ax * x) * np.sin(ay * y))

    return sample_velocity(grid, fn)


# -------------------------------------------------------------- snapshots

def write_snapshot(path: str | Path, grid: Grid, values: np.ndarray) -> None:
    values = check_shape(grid, values)
    path = Path(path)
    lines = [f"{grid.nx} {grid.ny} {grid.Lx!r} {grid.Ly!r}"]
    lines.extend(repr(float(a)) for a in values.ravel(order="C"))
    path.write_text("\n".join(lines) + "\n")


def read_snapshot(path: str | Path) -> tuple[Grid, np.ndarray]:
    text = Path(path).read_text().split("\n", 1)
    nx, ny, Lx, Ly = text[0].split()
    grid = Grid(int(nx), int(ny), float(Lx), float(Ly))
    data = np.array(text[1].split(), dtype=float)
    if data.size != grid.nx * grid.ny:
        raise PreconditionError(f"snapshot {path} holds {data.size} values, expected {grid.nx * grid.ny}")
    return grid, data.reshape(grid.shape)
