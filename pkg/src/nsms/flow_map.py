"""Backward characteristics of face-centred velocities and indicator pullbacks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .field_core import (Grid, PreconditionError, Velocity, check_shape, div, face_to_cell,
                         hm1_norm_sq, project_mean_zero, volume_mean)


@dataclass
class FlowMapSample:
    grid: Grid
    s: float
    x: np.ndarray          # foot points X_{-s}(cell centre), shape (nx, ny)
    y: np.ndarray
    order: int
    substeps: int
    clamp_max: float       # largest clamp correction applied, physical units


@dataclass
class CompositionRate:
    value: float           # H^-1 norm of the mean-zero difference quotient
    mass_drift: float      # |mass(chi) - mass(pullback)|
    flagged: bool


def interp_velocity(grid: Grid, V: Velocity, x: np.ndarray, y: np.ndarray):
    """Bilinear interpolation of the MAC components at physical points."""
    cu = np.array([x / grid.dx, y / grid.dy - 0.5])
    cv = np.array([x / grid.dx - 0.5, y / grid.dy])
    vx = ndimage.map_coordinates(V.u, cu, order=1, mode="nearest")
    vy = ndimage.map_coordinates(V.v, cv, order=1, mode="nearest")
    return vx, vy


def velocity_c1_norm(grid: Grid, V: Velocity) -> float:
    """max over cells of |v| and of the finite-difference |grad v| (Frobenius)."""
    cu, cv = face_to_cell(grid, V)
    gu = np.gradient(cu, grid.dx, grid.dy)
    gv = np.gradient(cv, grid.dx, grid.dy)
    jac = np.sqrt(gu[0] ** 2 + gu[1] ** 2 + gv[0] ** 2 + gv[1] ** 2)
    return float(max(V.max_abs(), jac.max()))


def default_substeps(grid: Grid, V: Velocity, s: float) -> int:
    vmax = V.max_abs()
    if vmax == 0.0 or s == 0.0:
        return 1
    return max(1, math.ceil(abs(s) * vmax / (0.5 * min(grid.dx, grid.dy))))


def integrate_flow(grid: Grid, V: Velocity, s: float, substeps: int | None = None,
                   points: tuple[np.ndarray, np.ndarray] | None = None) -> FlowMapSample:
    """Foot points X_{-s}(x) of the cell centres via classical RK4.

    Integrates dX/dt = -v(X) for time s; negative s runs forward.
    """
    if not V.is_finite():
        raise PreconditionError("velocity contains non-finite values")
    n = default_substeps(grid, V, s) if substeps is None else int(substeps)
    if n < 1:
        raise PreconditionError("substeps must be positive")
    x, y = grid.centers() if points is None else points
    x = np.array(x, dtype=float)
    y = np.array(y, dtype=float)
    if s != 0.0 and V.max_abs() > 0.0:
        dt = -s / n

        def f(px, py):
            return interp_velocity(grid, V, px, py)

        for _ in range(n):
            k1x, k1y = f(x, y)
            k2x, k2y = f(x + 0.5 * dt * k1x, y + 0.5 * dt * k1y)
            k3x, k3y = f(x + 0.5 * dt * k2x, y + 0.5 * dt * k2y)
            k4x, k4y = f(x + dt * k3x, y + dt * k3y)
            x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            y = y + dt / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y)
    cx = np.clip(x, 0.0, grid.Lx)
    cy = np.clip(y, 0.0, grid.Ly)
    clamp = float(max(np.abs(cx - x).max(), np.abs(cy - y).max()))
    return FlowMapSample(grid, float(s), cx, cy, 4, n, clamp)


def _index_coords(grid: Grid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.array([x / grid.dx - 0.5, y / grid.dy - 0.5])


def pullback(grid: Grid, chi: np.ndarray, fmap: FlowMapSample) -> np.ndarray:
    """chi o X_{-s} by clamped bilinear interpolation of the cell values."""
    chi = check_shape(grid, getattr(chi, "values", chi))
    if fmap.grid != grid:
        raise PreconditionError("flow map belongs to a different grid")
    out = ndimage.map_coordinates(chi, _index_coords(grid, fmap.x, fmap.y), order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def bilinear_gradient(grid: Grid, f: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Gradient of the clamped bilinear interpolant of ``f`` at points."""
    a = np.clip(x / grid.dx - 0.5, 0.0, grid.nx - 1.0)
    b = np.clip(y / grid.dy - 0.5, 0.0, grid.ny - 1.0)
    i = np.minimum(np.floor(a).astype(int), grid.nx - 2)
    j = np.minimum(np.floor(b).astype(int), grid.ny - 2)
    ta, tb = a - i, b - j
    f00, f10, f01, f11 = f[i, j], f[i + 1, j], f[i, j + 1], f[i + 1, j + 1]
    gx = ((1 - tb) * (f10 - f00) + tb * (f11 - f01)) / grid.dx
    gy = ((1 - ta) * (f01 - f00) + ta * (f11 - f10)) / grid.dy
    # the clamped extension is flat outside the centre lattice
    gx = np.where((x / grid.dx - 0.5 < 0) | (x / grid.dx - 0.5 > grid.nx - 1), 0.0, gx)
    gy = np.where((y / grid.dy - 0.5 < 0) | (y / grid.dy - 0.5 > grid.ny - 1), 0.0, gy)
    return gx, gy


def pullback_rate(grid: Grid, chi: np.ndarray, fmap: FlowMapSample, V: Velocity) -> np.ndarray:
    """d/ds of chi o X_{-s} by the chain rule: grad chi(X) . (-v(X))."""
    chi = check_shape(grid, getattr(chi, "values", chi))
    gx, gy = bilinear_gradient(grid, chi, fmap.x, fmap.y)
    vx, vy = interp_velocity(grid, V, fmap.x, fmap.y)
    return -(gx * vx + gy * vy)


def map_jacobian_norm(fmap: FlowMapSample) -> float:
    """max over cells of the spectral norm of the finite-difference grad X."""
    g = fmap.grid
    X = np.pad(fmap.x, 1, mode="reflect", reflect_type="odd")
    Y = np.pad(fmap.y, 1, mode="reflect", reflect_type="odd")
    a = (X[2:, 1:-1] - X[:-2, 1:-1]) / (2 * g.dx)
    b = (X[1:-1, 2:] - X[1:-1, :-2]) / (2 * g.dy)
    c = (Y[2:, 1:-1] - Y[:-2, 1:-1]) / (2 * g.dx)
    d = (Y[1:-1, 2:] - Y[1:-1, :-2]) / (2 * g.dy)
    # largest singular value of [[a, b], [c, d]]
    t = a * a + b * b + c * c + d * d
    det = a * d - b * c
    smax = np.sqrt(0.5 * (t + np.sqrt(np.maximum(t * t - 4 * det * det, 0.0))))
    return float(smax.max())


def gronwall_bound(s: float, c1: float, dim: int = 2) -> float:
    return math.sqrt(dim) * math.exp(abs(s) * c1)


def displacement_bound(s: float, c1: float, tv: float, vmax: float, dim: int = 2) -> float:
    """sqrt(d) * (int_0^s e^{t c1} dt) * TV(chi) * |v|_inf."""
    s = abs(s)
    integ = s if c1 == 0.0 else (math.exp(s * c1) - 1.0) / c1
    return math.sqrt(dim) * integ * tv * vmax


def composition_difference_rate(grid: Grid, chi: np.ndarray, V: Velocity, s: float,
                                drift_tol: float = 1e-3, backend: str = "spectral",
                                substeps: int | None = None) -> CompositionRate:
    """H^-1 norm of the mean-zero part of (chi - chi o X_{-s}) / s."""
    if not s > 0:
        raise PreconditionError("s must be positive")
    chi = check_shape(grid, getattr(chi, "values", chi))
    if V.max_abs() == 0.0:
        return CompositionRate(0.0, 0.0, False)
    pb = pullback(grid, chi, integrate_flow(grid, V, s, substeps))
    q = (chi - pb) / s
    drift = abs(volume_mean(grid, chi - pb)) * grid.area
    m0 = max(float(chi.sum() * grid.dA), grid.dA)
    val = math.sqrt(max(hm1_norm_sq(grid, project_mean_zero(grid, q), backend), 0.0))
    return CompositionRate(val, drift, drift > drift_tol * m0)


def divergence_max(grid: Grid, V: Velocity) -> float:
    return float(np.abs(div(grid, V)).max())
