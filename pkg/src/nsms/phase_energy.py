"""Phase indicators, the capillary energy and discrete interface geometry.

The interior perimeter is an edge-cut (Cauchy-Crofton) total variation on a
16-neighbour stencil: sum over lattice directions e of w_e |chi(x+e) - chi(x)|,
with mirror ghost cells so the walls carry no interface.  The three weights
make axis-aligned, diagonal and angle-averaged lengths exact; the residual
anisotropy is below 3%.  Unlike a mollified TV it charges isolated cells and
one-cell satellites a grid-scale perimeter, which keeps minimizers from
dissolving into dust.  Each term is |linear map|, so the relaxed energy is
convex with an explicit conjugate (one bounded dual variable per edge).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .field_core import Grid, PreconditionError, check_shape, heat_smooth


def _crofton_weights() -> np.ndarray:
    # rows: length density of a straight interface at angle 0, averaged over angle, at 45 degrees
    s2, s5 = np.sqrt(2.0), np.sqrt(5.0)
    A = np.array([[1.0, 2.0, 6.0],
                  [4 / np.pi, 4 * s2 / np.pi, 8 * s5 / np.pi],
                  [s2, s2, 4 * s2]])
    return np.linalg.solve(A, np.ones(3))


_W = _crofton_weights()
# both orientations of every lattice direction at half weight, so ghost edges
# appear on all four walls and the stencil commutes with reflections;
# weights in units of the cell spacing
_HALF: tuple[tuple[int, int], ...] = ((1, 0), (0, 1), (1, 1), (1, -1), (1, 2), (2, 1), (1, -2), (2, -1))
EDGE_DIRECTIONS: tuple[tuple[int, int], ...] = _HALF + tuple((-a, -b) for a, b in _HALF)
EDGE_WEIGHTS = 0.5 * np.array([_W[0], _W[0], _W[1], _W[1], _W[2], _W[2], _W[2], _W[2]] * 2)
PAD = 2
NORMAL_WIDTH = 0.30   # normal-estimate mollifier: eps = NORMAL_WIDTH * sqrt(h * L)


@dataclass(frozen=True)
class CapillaryParams:
    c0: float = 1.0
    gamma: float = np.pi / 2

    def __post_init__(self):
        if not self.c0 > 0:
            raise PreconditionError("c0 must be positive")
        if not (0.0 < self.gamma <= np.pi / 2 + 1e-15):
            raise PreconditionError("contact angle must lie in (0, pi/2]")

    @property
    def cos_gamma(self) -> float:
        # cos(pi/2) is 6e-17 in floating point; snap it
        c = float(np.cos(self.gamma))
        return 0.0 if abs(c) < 1e-15 else c


@dataclass
class PhaseIndicator:
    grid: Grid
    values: np.ndarray
    m0: float | None = None

    def __post_init__(self):
        self.values = check_shape(self.grid, self.values)
        if not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise PreconditionError("indicator values must be exactly 0 or 1")
        if self.m0 is None:
            self.m0 = mass(self.grid, self.values)
        elif abs(mass(self.grid, self.values) - self.m0) > self.grid.dA * (1 + 1e-9):
            raise PreconditionError("indicator mass differs from m0 by more than one cell")

    @property
    def count(self) -> int:
        return int(self.values.sum())


@dataclass
class InterfaceGeometry:
    cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def mollifier_width(grid: Grid, factor: float) -> float:
    return factor * np.sqrt(grid.h * np.sqrt(grid.Lx * grid.Ly))


def _check_square_cells(grid: Grid):
    if abs(grid.dx - grid.dy) > 1e-12 * grid.dx:
        raise PreconditionError("the edge-cut perimeter needs square cells")


def edge_differences(grid: Grid, chi: np.ndarray) -> np.ndarray:
    """D_e chi = chi(M(x+e)) - chi(x) for every stencil direction, shape (16, nx, ny)."""
    p = np.pad(chi, PAD, mode="symmetric")
    nx, ny = chi.shape
    out = np.empty((len(EDGE_DIRECTIONS), nx, ny))
    for k, (a, b) in enumerate(EDGE_DIRECTIONS):
        out[k] = p[PAD + a:PAD + a + nx, PAD + b:PAD + b + ny] - chi
    return out


def _fold(p: np.ndarray, nx: int, ny: int) -> np.ndarray:
    """Add mirror ghost entries of a padded array back onto their source cells."""
    p = p.copy()
    for k in range(PAD):
        p[PAD + k] += p[PAD - 1 - k]
        p[PAD + nx - 1 - k] += p[PAD + nx + k]
    for k in range(PAD):
        p[:, PAD + k] += p[:, PAD - 1 - k]
        p[:, PAD + ny - 1 - k] += p[:, PAD + ny + k]
    return p[PAD:PAD + nx, PAD:PAD + ny]


def scatter_to_partner(Z: np.ndarray) -> np.ndarray:
    """sum_e of Z_e(x) moved to the partner cell M(x+e)."""
    _, nx, ny = Z.shape
    p = np.zeros((nx + 2 * PAD, ny + 2 * PAD))
    for k, (a, b) in enumerate(EDGE_DIRECTIONS):
        p[PAD + a:PAD + a + nx, PAD + b:PAD + b + ny] += Z[k]
    return _fold(p, nx, ny)


def edge_differences_adjoint(grid: Grid, P: np.ndarray) -> np.ndarray:
    """Transpose of :func:`edge_differences` under the plain sum pairing."""
    return scatter_to_partner(P) - P.sum(axis=0)


def self_partner_mask(grid: Grid) -> np.ndarray:
    """True where M(x+e) = x, i.e. the edge folds back onto its own cell."""
    idx = np.arange(grid.nx * grid.ny, dtype=float).reshape(grid.shape)
    return edge_differences(grid, idx) == 0.0


def edge_scale(grid: Grid) -> np.ndarray:
    """Per-direction factor turning |D_e chi| into length."""
    _check_square_cells(grid)
    return EDGE_WEIGHTS * grid.dx


def tv_density(grid: Grid, chi: np.ndarray) -> np.ndarray:
    """Perimeter per cell: half of every incident edge term (sums to the interior TV)."""
    T = np.abs(edge_differences(grid, chi)) * edge_scale(grid)[:, None, None]
    return 0.5 * (T.sum(axis=0) + scatter_to_partner(T))


def tv_interior(grid: Grid, chi: np.ndarray) -> float:
    chi = check_shape(grid, chi)
    T = np.abs(edge_differences(grid, chi))
    return float(np.tensordot(edge_scale(grid), T.sum(axis=(1, 2)), 1))


def flip_tv_delta(grid: Grid, chi: np.ndarray) -> np.ndarray:
    """Exact change of the interior TV when one cell of a binary field is flipped."""
    D = np.abs(edge_differences(grid, chi))
    Z = (1.0 - 2.0 * D) * edge_scale(grid)[:, None, None]
    Z[self_partner_mask(grid)] = 0.0
    return Z.sum(axis=0) + scatter_to_partner(Z)


def centred_gradient(grid: Grid, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(s, 1, mode="edge")
    gx = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * grid.dx)
    gy = (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * grid.dy)
    return gx, gy


def boundary_weights(grid: Grid) -> np.ndarray:
    """Boundary-face length attached to each cell (corner cells get two faces)."""
    w = np.zeros(grid.shape)
    w[0, :] += grid.dy
    w[-1, :] += grid.dy
    w[:, 0] += grid.dx
    w[:, -1] += grid.dx
    return w


def boundary_trace(grid: Grid, chi: np.ndarray) -> float:
    return float(np.sum(chi * boundary_weights(grid)))


def capillary_energy(grid: Grid, chi: np.ndarray, p: CapillaryParams) -> float:
    """c0 * interior TV + c0 cos(gamma) * wetted boundary length.

    Accepts relaxed values in [0, 1] as well as indicators.
    """
    chi = chi.values if isinstance(chi, PhaseIndicator) else check_shape(grid, chi)
    e = p.c0 * tv_interior(grid, chi)
    if p.cos_gamma != 0.0:
        e += p.c0 * p.cos_gamma * boundary_trace(grid, chi)
    return e


def mass(grid: Grid, chi: np.ndarray) -> float:
    chi = chi.values if isinstance(chi, PhaseIndicator) else chi
    return float(np.sum(chi) * grid.dA)


def jump_cells(chi: np.ndarray) -> np.ndarray:
    """Cells with a 4-neighbour of different value."""
    m = np.zeros(chi.shape, dtype=bool)
    dx = chi[1:] != chi[:-1]
    dy = chi[:, 1:] != chi[:, :-1]
    m[1:] |= dx
    m[:-1] |= dx
    m[:, 1:] |= dy
    m[:, :-1] |= dy
    return m


def interface_geometry(grid: Grid, chi) -> InterfaceGeometry:
    """Jump cells with inward normals and perimeter weights.

    Weights are the TV density gathered onto the nearest jump cell, so they
    add up to the interior TV.  Normals point into the phase {chi = 1}.
    """
    chi = chi.values if isinstance(chi, PhaseIndicator) else check_shape(grid, chi)
    mask = jump_cells(chi)
    if not mask.any():
        return InterfaceGeometry()
    idx = np.argwhere(mask)   # lexicographic order
    s = heat_smooth(grid, chi, mollifier_width(grid, NORMAL_WIDTH))
    gx, gy = centred_gradient(grid, s)
    nx, ny = gx[mask], gy[mask]
    norm = np.hypot(nx, ny)
    bad = norm < 1e-12
    if bad.any():
        # fall back on the raw centred gradient; then on the x-axis
        rx, ry = centred_gradient(grid, chi)
        nx[bad], ny[bad] = rx[mask][bad], ry[mask][bad]
        norm = np.hypot(nx, ny)
        still = norm < 1e-12
        nx[still], ny[still], norm[still] = -1.0, 0.0, 1.0
    normals = np.stack([nx / norm, ny / norm], axis=1)

    dens = tv_density(grid, chi)
    _, (ii, jj) = ndimage.distance_transform_edt(~mask, sampling=(grid.dx, grid.dy),
                                                 return_indices=True)
    label = -np.ones(grid.shape, dtype=int)
    label[mask] = np.arange(len(idx))
    w = np.bincount(label[ii, jj].ravel(), weights=dens.ravel(), minlength=len(idx))

    X, Y = grid.centers()
    pts = np.stack([X[mask], Y[mask]], axis=1)
    return InterfaceGeometry(cells=idx, points=pts, normals=normals, weights=w)


def signed_distance(grid: Grid, chi: np.ndarray) -> np.ndarray:
    """Distance to the opposite phase, positive inside {chi = 1}, in physical units."""
    _check_square_cells(grid)
    inside = np.asarray(chi) > 0.5
    d = ndimage.distance_transform_edt(inside) - ndimage.distance_transform_edt(~inside)
    return d * grid.dx


def curvature_estimate(grid: Grid, chi: np.ndarray) -> np.ndarray:
    """Mean curvature -div(n) of the mollified indicator, averaged along the interface.

    Positive on convex pieces of {chi = 1}.  The along-interface average uses a
    normalised convolution with the normal mollifier, restricted to jump cells.
    """
    chi = check_shape(grid, chi)
    eps = mollifier_width(grid, NORMAL_WIDTH)
    gx, gy = centred_gradient(grid, heat_smooth(grid, chi, eps))
    nrm = np.maximum(np.hypot(gx, gy), 1e-12)
    dnx, _ = centred_gradient(grid, gx / nrm)
    _, dny = centred_gradient(grid, gy / nrm)
    kappa = -(dnx + dny)
    mask = jump_cells(chi)
    den = heat_smooth(grid, mask * 1.0, eps)
    avg = heat_smooth(grid, np.where(mask, kappa, 0.0), eps) / np.maximum(den, 1e-12)
    return np.where(mask, avg, 0.0)
