"""Probe fields, discrete first variations and energy-ledger certification.

Every check is report-only: it returns a dict with ``passed``, the worst
residual and the slack budget it was measured against.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .field_core import Grid, PreconditionError, Velocity, cell_to_xface, cell_to_yface, div
from .phase_energy import CapillaryParams, InterfaceGeometry

Jac = tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


@dataclass
class ProbeField:
    """Boundary-tangent C^1 field given analytically.

    ``fn(x, y) -> (bx, by)`` and ``jac(x, y) -> (dbx/dx, dbx/dy, dby/dx, dby/dy)``.
    """

    name: str
    fn: Callable
    jac: Callable
    mass_preserving: bool = False

    def sample(self, grid: Grid) -> Velocity:
        xu, yu = grid.xfaces()
        xv, yv = grid.yfaces()
        u = np.asarray(self.fn(xu, yu)[0], dtype=float) * np.ones_like(xu)
        v = np.asarray(self.fn(xv, yv)[1], dtype=float) * np.ones_like(xv)
        return Velocity(u, v)

    def scaled(self, c: float) -> "ProbeField":
        return combine([(c, self)], name=f"{c:g}*{self.name}")


def combine(terms: Sequence[tuple[float, ProbeField]], name: str = "combo",
            mass_preserving: bool = False) -> ProbeField:
    terms = [(float(c), p) for c, p in terms]

    def fn(x, y):
        bx = sum(c * np.asarray(p.fn(x, y)[0]) for c, p in terms)
        by = sum(c * np.asarray(p.fn(x, y)[1]) for c, p in terms)
        return bx, by

    def jac(x, y):
        parts = [p.jac(x, y) for _, p in terms]
        return tuple(sum(c * np.asarray(q[m]) for (c, _), q in zip(terms, parts)) for m in range(4))

    return ProbeField(name, fn, jac, mass_preserving)


def _bump(R: float):
    def eta(s):
        return np.where(s < R, np.cos(0.5 * np.pi * np.minimum(s, R) / R) ** 2, 0.0)

    def deta(s):
        # d eta / ds
        a = 0.5 * np.pi * np.minimum(s, R) / R
        return np.where(s < R, -np.pi / R * np.sin(a) * np.cos(a), 0.0)

    return eta, deta


def bump_probe(kind: str, center: tuple[float, float], R: float) -> ProbeField:
    """Compactly supported fields A(x - c) eta(|x - c|) with a fixed 2x2 matrix A,
    or the constant directions e_x eta, e_y eta."""
    cx, cy = center
    eta, deta = _bump(R)
    mats = {
        "radial": ((1, 0), (0, 1)),
        "rotation": ((0, -1), (1, 0)),
        "strain": ((1, 0), (0, -1)),
        "shear": ((0, 1), (1, 0)),
    }
    if kind in mats:
        (a, b), (c, d) = mats[kind]

        def fn(x, y):
            X, Y = x - cx, y - cy
            e = eta(np.hypot(X, Y))
            return (a * X + b * Y) * e, (c * X + d * Y) * e

        def jac(x, y):
            X, Y = x - cx, y - cy
            s = np.hypot(X, Y)
            e = eta(s)
            de = np.where(s > 0, deta(s) / np.where(s > 0, s, 1.0), 0.0)
            px, py = a * X + b * Y, c * X + d * Y
            return (a * e + px * de * X, b * e + px * de * Y,
                    c * e + py * de * X, d * e + py * de * Y)

        return ProbeField(f"bump-{kind}", fn, jac)

    if kind in ("ex", "ey"):
        ax, ay = (1.0, 0.0) if kind == "ex" else (0.0, 1.0)

        def fn(x, y):
            e = eta(np.hypot(x - cx, y - cy))
            return ax * e, ay * e

        def jac(x, y):
            X, Y = x - cx, y - cy
            s = np.hypot(X, Y)
            de = np.where(s > 0, deta(s) / np.where(s > 0, s, 1.0), 0.0)
            return ax * de * X, ax * de * Y, ay * de * X, ay * de * Y

        return ProbeField(f"bump-{kind}", fn, jac)
    raise PreconditionError(f"unknown bump kind {kind!r}")


def polynomial_probe(grid: Grid, component: int, weight: str) -> ProbeField:
    """(xi(1-xi) P, 0) or (0, eta(1-eta) P) with P in {1, xi - 1/2, eta - 1/2}."""
    Lx, Ly = grid.Lx, grid.Ly
    wfun = {
        "1": (lambda a, b: np.ones_like(a), lambda a, b: (np.zeros_like(a), np.zeros_like(a))),
        "x": (lambda a, b: a - 0.5, lambda a, b: (np.ones_like(a), np.zeros_like(a))),
        "y": (lambda a, b: b - 0.5, lambda a, b: (np.zeros_like(a), np.ones_like(a))),
    }[weight]

    def fn(x, y):
        a, b = x / Lx, y / Ly
        if component == 0:
            return a * (1 - a) * wfun[0](a, b), np.zeros_like(a)
        return np.zeros_like(a), b * (1 - b) * wfun[0](a, b)

    def jac(x, y):
        a, b = x / Lx, y / Ly
        P = wfun[0](a, b)
        Pa, Pb = wfun[1](a, b)
        z = np.zeros_like(a)
        if component == 0:
            q = a * (1 - a)
            return ((1 - 2 * a) * P / Lx + q * Pa / Lx, q * Pb / Ly, z, z)
        q = b * (1 - b)
        return (z, z, q * Pa / Lx, (1 - 2 * b) * P / Ly + q * Pb / Ly)

    return ProbeField(f"poly-{'xy'[component]}-{weight}", fn, jac)


def probe_basis(grid: Grid, chi: np.ndarray | None = None,
                center: tuple[float, float] | None = None, R: float | None = None) -> list[ProbeField]:
    """Twelve probes: six polynomial fields and six bump fields around ``center``.

    The centre defaults to the phase centroid; the bump radius is clipped so
    its support stays inside the domain.
    """
    if center is None:
        if chi is not None and chi.sum() > 0:
            X, Y = grid.centers()
            center = (float((X * chi).sum() / chi.sum()), float((Y * chi).sum() / chi.sum()))
        else:
            center = (0.5 * grid.Lx, 0.5 * grid.Ly)
    cx, cy = center
    wall = min(cx, grid.Lx - cx, cy, grid.Ly - cy)
    if R is None:
        R = 0.45 * min(grid.Lx, grid.Ly)
    R = min(R, 0.999 * wall)
    if R <= 2 * grid.h:
        R = 0.45 * min(grid.Lx, grid.Ly)
        cx, cy = 0.5 * grid.Lx, 0.5 * grid.Ly
    out = [polynomial_probe(grid, c, w) for c in (0, 1) for w in ("1", "x", "y")]
    out += [bump_probe(k, (cx, cy), R) for k in ("radial", "rotation", "strain", "shear", "ex", "ey")]
    return out


# --------------------------------------------------------- first variations

def first_variation(geom: InterfaceGeometry, B: ProbeField) -> float:
    """sum_k weight_k (I - n n^T) : grad B(x_k) over interface cells."""
    if geom.size == 0:
        return 0.0
    x, y = geom.points[:, 0], geom.points[:, 1]
    bxx, bxy, byx, byy = (np.asarray(a, dtype=float) * np.ones_like(x) for a in B.jac(x, y))
    n1, n2 = geom.normals[:, 0], geom.normals[:, 1]
    tang = bxx + byy - (n1 * n1 * bxx + n1 * n2 * bxy + n2 * n1 * byx + n2 * n2 * byy)
    return float(np.sum(geom.weights * tang))


def boundary_variation(grid: Grid, chi: np.ndarray, B: ProbeField) -> float:
    """int over the wetted boundary of the tangential divergence of B."""
    xc, yc = grid.xc(), grid.yc()
    total = 0.0
    for yy, row in ((0.0, chi[:, 0]), (grid.Ly, chi[:, -1])):
        bxx = np.asarray(B.jac(xc, np.full_like(xc, yy))[0]) * np.ones_like(xc)
        total += float(np.sum(row * bxx) * grid.dx)
    for xx, col in ((0.0, chi[0, :]), (grid.Lx, chi[-1, :])):
        byy = np.asarray(B.jac(np.full_like(yc, xx), yc)[3]) * np.ones_like(yc)
        total += float(np.sum(col * byy) * grid.dy)
    return total


def energy_variation(grid: Grid, chi: np.ndarray, geom: InterfaceGeometry, B: ProbeField,
                     params: CapillaryParams) -> float:
    """delta mu(B): c0 * varifold first variation + c0 cos(gamma) * boundary term."""
    val = params.c0 * first_variation(geom, B)
    if params.cos_gamma != 0.0:
        val += params.c0 * params.cos_gamma * boundary_variation(grid, chi, B)
    return val


def weighted_divergence(grid: Grid, chi: np.ndarray, w: np.ndarray | float, B: ProbeField) -> float:
    """int chi div(w B) dx with w averaged to faces."""
    S = B.sample(grid)
    if np.isscalar(w):
        wu, wv = float(w), float(w)
    else:
        wu, wv = cell_to_xface(w), cell_to_yface(w)
    F = Velocity(S.u * wu, S.v * wv)
    F.u[[0, -1]] = 0.0
    F.v[:, [0, -1]] = 0.0
    return float(np.sum(chi * div(grid, F)) * grid.dA)


def mass_preserving_set(grid: Grid, chi: np.ndarray, probes: Sequence[ProbeField]) -> list[ProbeField]:
    """B_i - a_i * Bbar with a_i = int chi div B_i and Bbar = sum a_j B_j / sum a_j^2."""
    a = np.array([weighted_divergence(grid, chi, 1.0, p) for p in probes])
    s2 = float(a @ a)
    if s2 == 0.0:
        return [combine([(1.0, p)], p.name, True) for p in probes]
    out = []
    for i, p in enumerate(probes):
        terms = [(1.0, p)] + [(-a[i] * a[j] / s2, q) for j, q in enumerate(probes)]
        out.append(combine(terms, f"mp-{p.name}", mass_preserving=True))
    return out


def gibbs_thomson_terms(grid: Grid, chi: np.ndarray, w: np.ndarray, geom: InterfaceGeometry,
                        probes: Sequence[ProbeField], params: CapillaryParams) -> np.ndarray:
    return np.array([energy_variation(grid, chi, geom, B, params) - weighted_divergence(grid, chi, w, B)
                     for B in probes])


def gibbs_thomson_residual(grid: Grid, chi: np.ndarray, w: np.ndarray, geom: InterfaceGeometry,
                           probes: Sequence[ProbeField], params: CapillaryParams,
                           perimeter: float | None = None) -> float:
    """max over probes of |delta mu(B) - int chi div(w B)|, normalised by perimeter."""
    if not probes:
        raise PreconditionError("empty probe set")
    per = geom.total_weight if perimeter is None else perimeter
    per = per if per > 0 else 1.0
    return float(np.abs(gibbs_thomson_terms(grid, chi, w, geom, probes, params)).max() / per)


# -------------------------------------------------------------- the ledger

LEDGER_COLUMNS = (
    "step", "t", "energy", "kinetic", "grad_u_sq", "grad_w_sq", "viscous", "work",
    "F_h", "mass",
    "interface_work", "mullins_dissipation", "fluid_dissipation", "momentum_correction",
    "gap_sum", "slack_budget", "e_side_residual", "v_side_residual", "total_residual",
    "cp_iterations", "swaps", "threshold_level", "lambda", "gt_residual", "filter_norm",
)


@dataclass
class LedgerRow:
    step: int
    t: float
    energy: float
    kinetic: float
    grad_u_sq: float          # |grad u|^2 at the step
    grad_w_sq: float          # mean over the step of |grad w|^2
    viscous: float            # int nu |Dv|^2 over the step (rate times h)
    work: float               # h * int chi v . grad w (fluid-side work)
    F_h: float
    mass: float
    interface_work: float     # work realised by the advecting field on the interface
    mullins_dissipation: float  # h/2 |grad u|^2 + int 1/2 |grad w|^2
    fluid_dissipation: float  # viscous + regularisation dissipation over the step
    momentum_correction: float
    gap_sum: float
    slack_budget: float
    e_side_residual: float
    v_side_residual: float
    total_residual: float
    cp_iterations: int = 0
    swaps: int = 0
    threshold_level: float = 0.0
    lambda_: float = 0.0
    gt_residual: float = float("nan")
    filter_norm: float = 0.0

    def as_list(self) -> list:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return [d[c] for c in LEDGER_COLUMNS]


@dataclass
class EnergyLedger:
    rows: list[LedgerRow] = field(default_factory=list)
    E0: float = 0.0
    K0: float = 0.0
    mass0: float = 0.0
    slack_floor: float = 0.0   # 1e-6 * initial total energy

    def append(self, row: LedgerRow) -> None:
        vals = [v for v in row.as_list() if isinstance(v, float) and not math.isnan(v)]
        if not all(math.isfinite(v) for v in vals):
            raise PreconditionError(f"non-finite ledger entry at step {row.step}")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        key = "lambda_" if name == "lambda" else name
        return np.array([getattr(r, key) for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(LEDGER_COLUMNS)
            wr.writerow(["0", "0.0", repr(self.E0), repr(self.K0)] + [""] * 5 + [repr(self.mass0)]
                        + [""] * (len(LEDGER_COLUMNS) - 10))
            for r in self.rows:
                wr.writerow([repr(v) if isinstance(v, float) else v for v in r.as_list()])


def _report(name: str, worst: float, budget: float, extra: dict | None = None) -> dict:
    out = {"check": name, "passed": bool(worst <= budget), "worst": float(worst), "slack": float(budget)}
    if extra:
        out.update(extra)
    return out


def check_monotone_F(ledger: EnergyLedger) -> dict:
    """F_h non-increasing and bounded by E[chi_0], within the slack budget."""
    F = np.concatenate([[ledger.E0], ledger.column("F_h")]) if ledger.rows else np.array([ledger.E0])
    slack = np.concatenate([[ledger.slack_floor], ledger.column("slack_budget")]) if ledger.rows else np.array([ledger.slack_floor])
    if len(F) < 2:
        return _report("monotone_F", 0.0, ledger.slack_floor, {"bound_worst": 0.0})
    incr = np.diff(F)
    worst = float(max(incr.max(), 0.0))
    bound = float(max((F - ledger.E0).max(), 0.0))
    rep = _report("monotone_F", worst, float(slack[-1]), {"bound_worst": bound})
    rep["passed"] = bool(worst <= slack[-1] and bound <= slack[-1])
    return rep


def check_dissipation(ledger: EnergyLedger) -> dict:
    """E-side, v-side and total energy inequalities between every pair s < T.

    Per-step residuals are positive when an inequality is violated; between
    recorded times the residuals add up, so the worst pair is the largest
    partial sum over a contiguous window.
    """
    def worst_window(r: np.ndarray) -> float:
        best, run = 0.0, 0.0
        for v in r:
            run = max(v, run + v)
            best = max(best, run)
        return best

    if not ledger.rows:
        return {"check": "dissipation", "passed": True, "parts": []}
    budget = float(ledger.column("slack_budget")[-1])
    parts = [_report(name, worst_window(ledger.column(col)), budget)
             for name, col in (("e_side", "e_side_residual"), ("v_side", "v_side_residual"),
                               ("total", "total_residual"))]
    return {"check": "dissipation", "passed": all(p["passed"] for p in parts), "parts": parts,
            "slack": budget}


def check_mass(ledger: EnergyLedger, tol: float = 1e-12) -> dict:
    m = ledger.column("mass")
    worst = float(np.abs(m - ledger.mass0).max()) if m.size else 0.0
    return _report("mass", worst, tol * max(ledger.mass0, 1.0))


def run_report(ledger: EnergyLedger, extra: dict | None = None) -> dict:
    checks = [check_monotone_F(ledger), check_dissipation(ledger), check_mass(ledger)]
    rep = {"passed": all(c["passed"] for c in checks), "checks": checks}
    if extra:
        rep.update(extra)
    return rep


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
