"""Minimizing-movement steps for the H^-1 attachment problem.

One step minimizes

    J(chi) = E[chi] + 1/(2 tau) |chi - g|^2_{H^-1}

over indicators of fixed mass, where ``g`` is the advected previous phase.
The pipeline is: convex relaxation over [0, 1] solved by a primal-dual
splitting with an explicit attachment gradient, mass-exact thresholding, then greedy swap polishing
and certification against probe candidates.  ``J`` always uses the mean-zero
part of ``chi - g`` since the pullback target carries a small mass drift.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import linalg as spla

from . import diagnostics as dg
from .field_core import (Grid, PreconditionError, SolverError, Velocity, _neg_laplacian_matrix, dct2,
                         grad, idct2, inverse_symbol, laplace_symbol, project_mean_zero, volume_mean)
from .flow_map import (FlowMapSample, _index_coords, default_substeps, integrate_flow, pullback,
                       pullback_rate)
from .phase_energy import (CapillaryParams, PhaseIndicator, boundary_weights, edge_differences,
                           edge_differences_adjoint, edge_scale, flip_tv_delta, interface_geometry,
                           curvature_estimate, jump_cells, signed_distance, tv_density, tv_interior)

log = logging.getLogger(__name__)


@dataclass
class MinStepProblem:
    grid: Grid
    target: np.ndarray
    tau: float
    params: CapillaryParams
    m0: float
    backend: str = "fd"

    def __post_init__(self):
        if not self.tau > 0:
            raise PreconditionError("tau must be positive")
        t = np.asarray(self.target, dtype=float)
        if t.shape != self.grid.shape:
            raise PreconditionError("target shape does not match grid")
        if t.min() < -1e-12 or t.max() > 1 + 1e-12:
            raise PreconditionError("target values must lie in [0, 1]")
        if not (0.0 < self.m0 < self.grid.area):
            raise PreconditionError(f"mass {self.m0} outside (0, |Omega|)")
        self.target = np.clip(t, 0.0, 1.0)

    @property
    def count(self) -> int:
        return int(round(self.m0 / self.grid.dA))


@dataclass
class RelaxedSolverConfig:
    max_iter: int = 20000
    gap_tol: float = 1e-6            # relative to the initial objective
    step_split: float = 0.5          # share of the step budget given to the TV duals
    step_safety: float = 0.99        # t * (L_f / 2 + sigma |K|^2) <= safety
    check_every: int = 25
    bisect_tol: float = 1e-12
    polish: bool = True
    max_swaps: int = 400
    pair_candidates: int = 6
    band_radius: int = 2
    random_probes: int = 10
    offset_scales: tuple[float, ...] = (0.25, 0.5, 0.71, 1.0, 1.41, 2.0, 2.83, 4.0, 8.0)
    seed: int = 0
    raise_on_fail: bool = True
    relax: bool = True               # False: candidates and swaps only, no certificate

    def __post_init__(self):
        if not (0 < self.step_safety < 1.0) or not (0 < self.step_split < 1.0):
            raise PreconditionError("step sizes must satisfy t * (L/2 + sigma*|K|^2) < 1")
        if self.max_iter < 1 or self.check_every < 1:
            raise PreconditionError("iteration counts must be positive")
        if not self.gap_tol > 0:
            raise PreconditionError("gap_tol must be positive")


@dataclass
class RelaxedState:
    chi: np.ndarray
    p: np.ndarray      # edge duals, shape (16, nx, ny), entries in [-1, 1]


@dataclass
class MinStepResult:
    chi: PhaseIndicator
    objective: float
    energy: float
    fidelity: float
    gap: float               # relative duality gap of the relaxed problem
    gap_abs: float
    iterations: int
    level: float
    relaxed_objective: float
    swaps: int
    source: str
    probe_values: dict = field(default_factory=dict)
    state: RelaxedState | None = None


# ------------------------------------------------------------- objective

def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix C with C[k, i]."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.cos(np.pi * k * (i + 0.5) / n) * math.sqrt(2.0 / n)
    C[0] /= math.sqrt(2.0)
    return C


class StepObjective:
    """Objective of one minimizing step with cached operators."""

    def __init__(self, problem: MinStepProblem):
        self.p = problem
        g = problem.grid
        self.grid = g
        self.dA = g.dA
        self.c0 = problem.params.c0
        self.ell = problem.params.c0 * problem.params.cos_gamma * boundary_weights(g)
        self.lam = laplace_symbol(g, problem.backend)
        self.linv = inverse_symbol(g, problem.backend)
        self.wK = problem.params.c0 * edge_scale(g)[:, None, None]   # K_e = wK_e D_e
        self.ghat = dct2(problem.target)
        self._Cx = _dct_matrix(g.nx)
        self._Cy = _dct_matrix(g.ny)
        self.kdiag = (self._Cx**2).T @ self.linv @ (self._Cy**2)

    def K(self, chi: np.ndarray) -> np.ndarray:
        return self.wK * edge_differences(self.grid, chi)

    def KT(self, P: np.ndarray) -> np.ndarray:
        return edge_differences_adjoint(self.grid, self.wK * P)

    def energy(self, chi: np.ndarray) -> float:
        return self.c0 * tv_interior(self.grid, chi) + float(np.sum(self.ell * chi))

    def potential(self, chi: np.ndarray) -> np.ndarray:
        """phi = (-Delta)^-1 P0 (chi - g)."""
        return idct2((dct2(chi) - self.ghat) * self.linv)

    def fidelity(self, chi: np.ndarray) -> float:
        dh = dct2(chi) - self.ghat
        return self.dA * float(np.sum(dh * dh * self.linv)) / (2 * self.p.tau)

    def value(self, chi: np.ndarray) -> float:
        return self.energy(chi) + self.fidelity(chi)

    def kpair(self, a: tuple[int, int], b: tuple[int, int]) -> float:
        cx = self._Cx[:, a[0]] * self._Cx[:, b[0]]
        cy = self._Cy[:, a[1]] * self._Cy[:, b[1]]
        return float(cx @ self.linv @ cy)


# -------------------------------------------------------- relaxed solver

def _operator_norm_sq(obj: StepObjective, iters: int = 50) -> float:
    """|K|^2 by power iteration on K^T K (mean-zero start, plain sum pairing)."""
    v = np.random.default_rng(12345).standard_normal(obj.grid.shape)
    v -= v.mean()
    nv = 1.0
    for _ in range(iters):
        u = obj.KT(obj.K(v))
        nv = float(np.sqrt(np.sum(u * u)))
        if nv == 0.0:
            return 0.0
        v = u / nv
    return nv * 1.02


def project_box_mass(x: np.ndarray, count: float) -> np.ndarray:
    """Euclidean projection onto {0 <= chi <= 1, sum chi = count}.

    Finds the shift s with sum clip(x + s, 0, 1) = count exactly on the
    piecewise-linear breakpoints.
    """
    flat = np.asarray(x, dtype=float).ravel()
    n = flat.size
    if not (0 <= count <= n):
        raise PreconditionError("cell count out of range")
    lo = np.sort(-flat)          # x_i + s crosses 0
    hi = np.sort(1.0 - flat)     # x_i + s crosses 1
    clo = np.concatenate([[0.0], np.cumsum(lo)])
    chi_ = np.concatenate([[0.0], np.cumsum(hi)])

    def total(s):
        k = np.searchsorted(lo, s, side="right")
        m = np.searchsorted(hi, s, side="right")
        return k * s - clo[k] - (m * s - chi_[m])

    bps = np.concatenate([lo, hi])
    bps.sort()
    vals = total(bps)
    j = int(np.searchsorted(vals, count, side="left"))
    if j == 0:
        s = bps[0]
    elif j >= bps.size:
        s = bps[-1]
    else:
        a, b = bps[j - 1], bps[j]
        va, vb = vals[j - 1], vals[j]
        s = a if vb == va else a + (count - va) * (b - a) / (vb - va)
    return np.clip(flat + s, 0.0, 1.0).reshape(np.shape(x))


def relaxed_lower_bound(obj: StepObjective, P: np.ndarray, x: np.ndarray, count: int) -> float:
    """Certified lower bound on the relaxed minimum.

    For |P| <= 1, TV(chi) >= <K^T P, chi>; the remaining smooth problem over
    the box-mass polytope is bounded below by its linearization at ``x``,
    whose minimum over the polytope puts the ``count`` ones on the smallest
    gradient entries.
    """
    c = obj.ell + obj.KT(P)
    grad = c + (obj.dA / obj.p.tau) * obj.potential(x)
    val = float(np.sum(c * x)) + obj.fidelity(x)
    s = np.zeros(x.size)
    s[np.argsort(grad.ravel(), kind="stable")[:count]] = 1.0
    return val + float(np.dot(grad.ravel(), s - x.ravel()))


def solve_relaxed(obj: StepObjective, cfg: RelaxedSolverConfig, count: int,
                  warm: RelaxedState | None = None):
    """Convex relaxation over [0,1] with fixed mass.

    Primal-dual splitting with the attachment term taken explicitly (its
    gradient is one Poisson solve) and the box-mass set handled by exact
    projection; the TV is dualised edge by edge.  Steps obey
    t * (L_f/2 + sigma |K|^2) <= safety with L_f the attachment Lipschitz
    constant.  The duality gap uses :func:`relaxed_lower_bound`.
    Returns (chi, state, rel_gap, abs_gap, iterations, P0).
    """
    g = obj.grid
    k = obj.dA / obj.p.tau
    lip = k * float(obj.linv.max())
    nk = _operator_norm_sq(obj)
    t = cfg.step_safety * (1.0 - cfg.step_split) / (0.5 * lip)
    sig = cfg.step_split / (t * nk) if nk > 0 else 0.0

    start = project_box_mass(obj.p.target, count)
    P0 = obj.value(start)
    scale = max(abs(P0), 1e-300)
    if warm is not None and warm.chi.shape == g.shape:
        x = project_box_mass(warm.chi, count)
        P = warm.p.copy()
    else:
        x = start
        P = np.zeros((len(obj.wK),) + g.shape)
    it = 0
    gap = np.inf
    for it in range(1, cfg.max_iter + 1):
        grad = k * obj.potential(x) + obj.ell + obj.KT(P)
        xn = project_box_mass(x - t * grad, count)
        P = np.clip(P + sig * obj.K(2.0 * xn - x), -1.0, 1.0)
        x = xn
        if it % cfg.check_every == 0 or it == cfg.max_iter:
            gap = max(obj.value(x) - relaxed_lower_bound(obj, P, x, count), 0.0)
            if gap <= cfg.gap_tol * scale:
                break
    state = RelaxedState(x.copy(), P)
    rel = gap / scale
    if rel > cfg.gap_tol and cfg.raise_on_fail:
        raise SolverError(f"relaxed solver stopped after {it} iterations with relative gap {rel:.3e}", rel)
    return x, state, rel, gap, it, P0


# ---------------------------------------------------------- thresholding

def threshold_mass(values: np.ndarray, count: int, tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Indicator with exactly ``count`` ones taken above a bisected level.

    Cells inside the final level bracket are admitted in lexicographic order.
    """
    v = np.asarray(values, dtype=float)
    n = v.size
    if not (0 <= count <= n):
        raise PreconditionError("cell count out of range")
    lo, hi = float(v.min()) - 1.0, float(v.max())
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if np.count_nonzero(v > mid) > count:
            lo = mid
        else:
            hi = mid
    flat = v.ravel()
    out = (flat > hi).astype(float)
    need = count - int(out.sum())
    if need > 0:
        amb = np.flatnonzero((flat > lo) & (flat <= hi))
        out[amb[:need]] = 1.0
    return out.reshape(v.shape), hi


# ---------------------------------------------------------- swap polish

class _BinaryState:
    def __init__(self, obj: StepObjective, chi: np.ndarray):
        self.obj = obj
        self.chi = chi.copy()
        self.refresh()

    def refresh(self):
        o = self.obj
        self.flip = o.c0 * flip_tv_delta(o.grid, self.chi)
        self.phi = o.potential(self.chi)
        self.value = o.value(self.chi)

    def screening(self):
        """Exact change of J for flipping each cell on its own (add, remove)."""
        o = self.obj
        lin = o.ell + (o.dA / o.p.tau) * self.phi
        diag = (o.dA / (2 * o.p.tau)) * o.kdiag
        return self.flip + lin + diag, self.flip - lin + diag

    def swap_delta(self, a, b) -> float:
        o = self.obj
        if max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= 2:
            # the two flips share stencil edges; evaluate directly
            trial = self.chi.copy()
            trial[a], trial[b] = 1.0, 0.0
            return o.value(trial) - self.value
        k = o.dA / o.p.tau
        dfid = k * (self.phi[a] - self.phi[b]) + 0.5 * k * (o.kdiag[a] + o.kdiag[b] - 2 * o.kpair(a, b))
        return float(self.flip[a] + self.flip[b]) + dfid + float(o.ell[a] - o.ell[b])

    def apply(self, a, b):
        self.chi[a] = 1.0
        self.chi[b] = 0.0
        self.refresh()


def _band(chi: np.ndarray, radius: int) -> np.ndarray:
    j = jump_cells(chi)
    if radius > 0:
        j = ndimage.binary_dilation(j, iterations=radius)
    return j


def _top(mask: np.ndarray, score: np.ndarray, m: int) -> list[tuple[int, int]]:
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        return []
    order = np.argsort(score.ravel()[idx], kind="stable")[:m]
    return [tuple(int(c) for c in np.unravel_index(idx[o], mask.shape)) for o in order]


def polish(obj: StepObjective, chi: np.ndarray, cfg: RelaxedSolverConfig,
           rng: np.random.Generator) -> tuple[np.ndarray, int]:
    st = _BinaryState(obj, chi)
    swaps = 0
    tol = 1e-13 * max(abs(st.value), 1.0)
    for _outer in range(8):
        while swaps < cfg.max_swaps:
            add_s, rem_s = st.screening()
            band = _band(st.chi, cfg.band_radius)
            adds = _top(band & (st.chi == 0), add_s, cfg.pair_candidates)
            rems = _top(band & (st.chi == 1), rem_s, cfg.pair_candidates)
            best, pair = -tol, None
            for a in adds:
                for b in rems:
                    d = st.swap_delta(a, b)
                    if d < best:
                        best, pair = d, (a, b)
            if pair is None:
                break
            old = st.value
            st.apply(*pair)
            if st.value >= old:   # screening delta disagreed with the exact value
                st.apply(pair[1], pair[0])
                break
            swaps += 1
        # random rebalanced flips near the interface
        band = _band(st.chi, cfg.band_radius + 1)
        zeros = np.flatnonzero((band & (st.chi == 0)).ravel())
        ones = np.flatnonzero((band & (st.chi == 1)).ravel())
        if zeros.size == 0 or ones.size == 0 or cfg.random_probes == 0:
            break
        improved = False
        za = rng.choice(zeros, size=cfg.random_probes)
        ob = rng.choice(ones, size=cfg.random_probes)
        for ia, ib in zip(za, ob):
            a = tuple(int(c) for c in np.unravel_index(ia, st.chi.shape))
            b = tuple(int(c) for c in np.unravel_index(ib, st.chi.shape))
            trial = st.chi.copy()
            trial[a], trial[b] = 1.0, 0.0
            if obj.value(trial) < st.value - tol:
                st.apply(a, b)
                swaps += 1
                improved = True
        if not improved:
            break
    return st.chi, swaps


# --------------------------------------------------- offset candidates

def predicted_exchange(grid: Grid, chi: np.ndarray, tau: float, params: CapillaryParams) -> np.ndarray:
    """Mass exchange of one linearised sharp-interface step.

    phi = -tau c0 kappa on jump cells and discretely harmonic elsewhere
    (Neumann walls); q = -Delta phi lives on the jump cells and sums to zero.
    A constant added to the interface data drops out.
    """
    mask = jump_cells(chi)
    L = _neg_laplacian_matrix(grid)
    on = np.flatnonzero(mask.ravel())
    off = np.flatnonzero(~mask.ravel())
    phi = np.zeros(chi.size)
    phi[on] = -tau * params.c0 * curvature_estimate(grid, chi).ravel()[on]
    if off.size and on.size:
        phi[off] = spla.spsolve(L[off][:, off].tocsc(), -(L[off][:, on] @ phi[on]))
    return (L @ phi).reshape(grid.shape)


def offset_candidates(grid: Grid, chi: np.ndarray, tau: float, params: CapillaryParams,
                      scales: Sequence[float]) -> list[np.ndarray]:
    """Indicators whose components move by a uniform normal offset.

    Each component of {chi = 1} gets offset = (net predicted exchange) /
    (its perimeter); the signed distance plus a scaled offset field is
    thresholded back to the exact cell count.  These are ordinary
    candidates: the step keeps whichever has the lowest objective.
    """
    chi = np.asarray(chi, dtype=float)
    count = int(round(chi.sum()))
    if not jump_cells(chi).any() or not scales:
        return []
    q = predicted_exchange(grid, chi, tau, params)
    lab, k = ndimage.label(chi > 0.5)
    _, (ii, jj) = ndimage.distance_transform_edt(lab == 0, return_indices=True)
    near = lab[ii, jj]
    dens = tv_density(grid, chi)
    per = np.bincount(near.ravel(), weights=dens.ravel(), minlength=k + 1)
    net = np.bincount(near.ravel(), weights=q.ravel(), minlength=k + 1) * grid.dA
    shift = np.where(per > 0, net / np.where(per > 0, per, 1.0), 0.0)
    field_ = shift[near]
    d = signed_distance(grid, chi)
    return [threshold_mass(d + s * field_, count)[0] for s in scales]


# ----------------------------------------------------------- the step

def minimize_step(problem: MinStepProblem, cfg: RelaxedSolverConfig | None = None,
                  probes: Sequence[np.ndarray] = (), previous: np.ndarray | None = None,
                  warm: RelaxedState | None = None, rng_key: int = 0) -> MinStepResult:
    """Relax, threshold to exact mass, polish by swaps, certify against probes."""
    cfg = cfg or RelaxedSolverConfig()
    obj = StepObjective(problem)
    count = problem.count
    if not (0 < count < problem.grid.nx * problem.grid.ny):
        raise PreconditionError("mass constraint leaves no free cells")

    cand_target, t_level = threshold_mass(problem.target, count, cfg.bisect_tol)
    if cfg.relax:
        relaxed, state, rel, gap, iters, _ = solve_relaxed(obj, cfg, count, warm)
        cand_relaxed, level = threshold_mass(relaxed, count, cfg.bisect_tol)
        cands = [("target", cand_target), ("relaxed", cand_relaxed)]
    else:
        relaxed, state, rel, gap, iters, level = None, warm, float("nan"), float("nan"), 0, t_level
        cands = [("target", cand_target)]
    if previous is not None:
        cands.append(("previous", np.asarray(previous, dtype=float)))
    cands += [(f"probe{i}", np.asarray(p, dtype=float)) for i, p in enumerate(probes)]
    base = cand_target
    cands += [(f"offset{i}", c) for i, c in
              enumerate(offset_candidates(problem.grid, base, problem.tau, problem.params, cfg.offset_scales))]
    values = {}
    best_name, best_chi, best_val = None, None, np.inf
    for name, c in cands:
        if int(round(c.sum())) != count:
            raise PreconditionError(f"candidate {name} has {c.sum()} cells, expected {count}")
        v = obj.value(c)
        values[name] = v
        if v < best_val:
            best_name, best_chi, best_val = name, c, v
    swaps = 0
    chi = best_chi
    if cfg.polish:
        rng = np.random.default_rng([cfg.seed, rng_key])
        chi, swaps = polish(obj, best_chi, cfg, rng)
    final = obj.value(chi)
    if final > best_val:   # never return something worse than a candidate
        chi, final = best_chi, best_val
    e = obj.energy(chi)
    return MinStepResult(
        chi=PhaseIndicator(problem.grid, chi, count * problem.grid.dA),
        objective=final, energy=e, fidelity=final - e, gap=rel, gap_abs=gap,
        iterations=iters, level=level,
        relaxed_objective=obj.value(relaxed) if relaxed is not None else float("nan"),
        swaps=swaps, source=best_name, probe_values=values, state=state)


# ------------------------------------------------- De Giorgi interpolants

@dataclass
class DeGiorgiSample:
    t: float
    T: float
    chi: PhaseIndicator
    f: float
    target: np.ndarray
    result: MinStepResult
    fmap: FlowMapSample | None = None


def subtimes(h: float, count: int = 8, ratio: float = 0.5) -> list[float]:
    """Weights T_1 < ... < T_N = h, geometric toward the step start."""
    if count < 1:
        raise PreconditionError("need at least one sub-time")
    return [h * ratio ** (count - 1 - i) for i in range(count)]


def advect(grid: Grid, chi: np.ndarray, u_k: Velocity | None, T: float,
           substeps: int | None = None) -> tuple[np.ndarray, FlowMapSample | None]:
    if u_k is None or u_k.max_abs() == 0.0:
        return np.asarray(chi, dtype=float).copy(), None
    fmap = integrate_flow(grid, u_k, T, substeps)
    return pullback(grid, chi, fmap), fmap


def de_giorgi_interpolate(grid: Grid, chi_prev: PhaseIndicator, u_k: Velocity | None, t_sub: float,
                          step_start: float, h: float, params: CapillaryParams,
                          cfg: RelaxedSolverConfig | None = None, probes: Sequence[np.ndarray] = (),
                          warm: RelaxedState | None = None, substeps: int | None = None,
                          backend: str = "fd", rng_key: int = 0) -> DeGiorgiSample:
    T = t_sub - step_start
    if not (0.0 < T <= h * (1 + 1e-12)):
        raise PreconditionError(f"sub-time {t_sub} outside ({step_start}, {step_start + h}]")
    target, fmap = advect(grid, chi_prev.values, u_k, T, substeps)
    prob = MinStepProblem(grid, target, T, params, chi_prev.m0, backend)
    res = minimize_step(prob, cfg, probes=probes, previous=chi_prev.values, warm=warm, rng_key=rng_key)
    return DeGiorgiSample(t_sub, T, res.chi, res.objective, target, res, fmap)


def interpolation_value(grid: Grid, chi: np.ndarray, target: np.ndarray, T: float,
                        params: CapillaryParams, backend: str = "fd") -> float:
    """f = E[chi] + |chi - target|^2_{H^-1} / (2T) for a given indicator."""
    prob = MinStepProblem(grid, target, T, params, max(float(chi.sum()) * grid.dA, grid.dA), backend)
    return StepObjective(prob).value(chi)


@dataclass
class DerivativeCheck:
    T: float
    fd_slope: float
    rhs: float                 # Eulerian chain-rule form
    rhs_transport: float       # composition form with the forward map
    dissipation: float
    rel_error: float


def derivative_check(grid: Grid, chi_prev: PhaseIndicator, u_k: Velocity, T: float, h: float,
                     params: CapillaryParams, cfg: RelaxedSolverConfig | None = None,
                     delta_frac: float = 1e-2, backend: str = "fd",
                     probes: Sequence[np.ndarray] = ()) -> DerivativeCheck:
    """Centred difference of f at T against the assembled right-hand side."""
    d = delta_frac * T
    nsub = default_substeps(grid, u_k, T + d)
    mid = de_giorgi_interpolate(grid, chi_prev, u_k, T, 0.0, h + d, params, cfg, probes,
                                substeps=nsub, backend=backend)
    f = {}
    for sgn in (-1, 1):
        s = de_giorgi_interpolate(grid, chi_prev, u_k, T + sgn * d, 0.0, h + d, params, cfg,
                                  list(probes) + [mid.chi.values], substeps=nsub, backend=backend)
        f[sgn] = s.f
    slope = (f[1] - f[-1]) / (2 * d)

    chi = mid.chi.values
    diff = project_mean_zero(grid, chi - mid.target)
    obj = StepObjective(MinStepProblem(grid, mid.target, T, params, chi_prev.m0, backend))
    phi = obj.potential(chi)
    hm = grid.dA * float(np.sum(diff * phi))
    dg_dT = pullback_rate(grid, chi_prev.values, mid.fmap, u_k) if mid.fmap is not None else np.zeros(grid.shape)
    diss = hm / (2 * T * T)
    rhs = -diss - grid.dA * float(np.sum(phi * dg_dT)) / T

    # transport form: -(1/T) (chi_prev u, grad(phi o X_T))
    fwd = integrate_flow(grid, u_k, -T, nsub)
    comp = ndimage.map_coordinates(phi, _index_coords(grid, fwd.x, fwd.y), order=1, mode="nearest")
    gc = grad(grid, comp)
    cu = np.zeros_like(u_k.u)
    cv = np.zeros_like(u_k.v)
    cu[1:-1] = 0.5 * (chi_prev.values[1:] + chi_prev.values[:-1])
    cv[:, 1:-1] = 0.5 * (chi_prev.values[:, 1:] + chi_prev.values[:, :-1])
    pair = grid.dA * float(np.sum(cu * u_k.u * gc.u) + np.sum(cv * u_k.v * gc.v))
    rhs_tr = -diss - pair / T
    rel = abs(slope - rhs) / max(abs(rhs), 1e-300)
    return DerivativeCheck(T, slope, rhs, rhs_tr, diss, rel)


# ------------------------------------------------------------ potentials

@dataclass
class Potentials:
    u: np.ndarray | None
    w: np.ndarray
    lam: float
    w0: np.ndarray
    degenerate: bool = False
    h1_norm: float = 0.0
    grad_w0: float = 0.0
    bound_ratio: float = 0.0   # |w0 + lam|_{H^1} / (1 + |grad w0|)


def _grad_norm(grid: Grid, f: np.ndarray) -> float:
    G = grad(grid, f)
    return math.sqrt(grid.dA * float(np.sum(G.u**2) + np.sum(G.v**2)))


def kinetic_potential(grid: Grid, chi_new, advected_prev: np.ndarray, h: float,
                      backend: str = "fd", mass_tol: float = 5e-3) -> np.ndarray:
    """u = -(-Delta)^-1 [(chi_new - advected_prev) / h], mean-zero."""
    chi = getattr(chi_new, "values", chi_new)
    diff = np.asarray(chi, dtype=float) - np.asarray(advected_prev, dtype=float)
    drift = abs(volume_mean(grid, diff)) * grid.area
    m0 = max(float(np.sum(chi)) * grid.dA, grid.dA)
    if drift > mass_tol * m0:
        raise PreconditionError(f"mass mismatch {drift:.3e} between new and advected phase")
    f = project_mean_zero(grid, diff) / h
    return -idct2(dct2(f) * inverse_symbol(grid, backend))


def curvature_field(grid: Grid, chi: np.ndarray, target: np.ndarray, T: float,
                    backend: str = "fd") -> np.ndarray:
    f = project_mean_zero(grid, np.asarray(chi, dtype=float) - target) / T
    return -idct2(dct2(f) * inverse_symbol(grid, backend))


def curvature_potential(grid: Grid, sample: DeGiorgiSample, params: CapillaryParams,
                        probes: Sequence[dg.ProbeField] | None = None,
                        backend: str = "fd") -> Potentials:
    """w = w0 + lambda with lambda fitted over general probes by least squares."""
    chi = sample.chi.values
    w0 = curvature_field(grid, chi, sample.target, sample.T, backend)
    probes = dg.probe_basis(grid, chi) if probes is None else list(probes)
    general = [p for p in probes if not p.mass_preserving]
    geom = interface_geometry(grid, chi)
    lam, degenerate = 0.0, True
    if general:
        a = np.array([dg.weighted_divergence(grid, chi, 1.0, B) for B in general])
        b = np.array([dg.energy_variation(grid, chi, geom, B, params)
                      - dg.weighted_divergence(grid, chi, w0, B) for B in general])
        s2 = float(a @ a)
        if s2 > 1e-24 * max(1.0, float(np.abs(b).max()) ** 2):
            lam, degenerate = float(a @ b) / s2, False
    w = w0 + lam
    gw0 = _grad_norm(grid, w0)
    h1 = math.sqrt(grid.dA * float(np.sum(w * w)) + _grad_norm(grid, w) ** 2)
    return Potentials(None, w, lam, w0, degenerate, h1, gw0, h1 / (1.0 + gw0))
