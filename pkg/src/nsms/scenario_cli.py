"""Coupled time loop, scenario presets, persistence and the command line.

Per outer step n the loop

1. takes the filtered velocity u_k from the filter history,
2. for sub-times T_1 < ... < T_N = h pulls chi_{n-1} back along u_k and
   minimizes the attachment problem, seeding each sub-time with the
   previous minimizer,
3. assembles the kinetic potential u and the curvature potentials w_i,
4. advances the fluid with the time average of w and updates the filter
   with the new velocity,
5. appends a ledger row.

Seeding makes the sub-time chain exact: with f_i the returned objective and
d_i^2 the squared H^-1 distance to the i-th target,

    f_i <= E[chi_{i-1}] + d^2(chi_{i-1}, g_i) / (2 T_i),

which telescopes to E[chi_n] + D_n <= E[chi_{n-1}] + W_n with D_n the
lower Riemann sum of the dissipation and W_n the transport work of u_k.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
from scipy import ndimage

from . import diagnostics as dg
from . import fluid_solver as fs
from .field_core import (Grid, PreconditionError, Velocity, read_snapshot, taylor_green,
                         write_snapshot)
from .flow_map import integrate_flow, pullback
from .mms_solver import (DeGiorgiSample, MinStepProblem, RelaxedSolverConfig, RelaxedState, StepObjective,
                         curvature_field, curvature_potential, kinetic_potential, minimize_step,
                         subtimes)
from .phase_energy import CapillaryParams, PhaseIndicator, capillary_energy, interface_geometry, jump_cells

log = logging.getLogger(__name__)

SCENARIOS = ("stationary-circle", "flat-channel", "ostwald", "sheared-droplet")
SUITES = ("fields", "energy", "flowmap", "mms", "fluid", "coupled")


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    scenario: str = "stationary-circle"
    nx: int = 64
    ny: int = 64
    Lx: float = 1.0
    Ly: float = 1.0
    h: float = 1e-4
    steps: int = 50
    c0: float = 1.0
    gamma: float = math.pi / 2
    rho1: float = 1.0
    rho2: float = 1.0
    nu1: float = 1.0
    nu2: float = 1.0
    m0_fraction: float | None = None     # None: taken from the preset geometry
    subtime_count: int = 3
    subtime_ratio: float = 0.5
    paper_scale_coupling: bool = True
    k: float | None = None               # used when the coupling is off
    beta: float | None = None
    bc: str = "no-slip"
    velocity: str = "rest"               # or "taylor-green"
    velocity_amplitude: float = 1.0
    solver: dict = field(default_factory=dict)
    relax_every_subtime: bool = False
    checkpoint_every: int = 0
    seed: int = 0
    images: bool = False
    out: str | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise PreconditionError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        for name in ("h", "c0", "rho1", "rho2", "nu1", "nu2", "Lx", "Ly"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"{name} must be positive")
        if not (0 < self.gamma <= math.pi / 2 + 1e-15):
            raise PreconditionError("gamma must lie in (0, pi/2]")
        if self.m0_fraction is not None and not (0 < self.m0_fraction < 1):
            raise PreconditionError("m0_fraction must lie in (0, 1)")
        if self.steps < 0 or self.subtime_count < 1 or not (0 < self.subtime_ratio < 1):
            raise PreconditionError("steps >= 0, subtime_count >= 1 and ratio in (0, 1) required")
        if not self.paper_scale_coupling and (self.k is None or self.beta is None):
            raise PreconditionError("k and beta are required when paper_scale_coupling is off")
        if self.velocity not in ("rest", "taylor-green"):
            raise PreconditionError(f"unknown initial velocity {self.velocity!r}")
        RelaxedSolverConfig(**self.solver)   # validate early

    @property
    def grid(self) -> Grid:
        return Grid(self.nx, self.ny, self.Lx, self.Ly)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise PreconditionError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def fluid_params(self) -> fs.FluidParams:
        kw = dict(rho1=self.rho1, rho2=self.rho2, nu1=self.nu1, nu2=self.nu2, bc=self.bc)
        if self.paper_scale_coupling:
            return fs.FluidParams.scale_coupled(self.h, **kw)
        return fs.FluidParams.exploration(self.k, self.beta, "config override", **kw)

    def solver_config(self, relax: bool = True) -> RelaxedSolverConfig:
        base = dict(gap_tol=1e-2, max_iter=1500, raise_on_fail=False, seed=self.seed)
        base.update(self.solver)
        base["relax"] = relax and base.get("relax", True)
        return RelaxedSolverConfig(**base)


def preset(name: str, **overrides) -> RunConfig:
    """Scenario defaults; keyword overrides win."""
    base: dict = dict(scenario=name)
    if name == "stationary-circle":
        base.update(steps=50)
    elif name == "flat-channel":
        base.update(steps=20)
    elif name == "ostwald":
        base.update(steps=12, h=5e-4, subtime_count=3)
    elif name == "sheared-droplet":
        base.update(steps=12, rho1=2.0, rho2=1.0, nu1=3.0, nu2=1.0, velocity="taylor-green")
    else:
        raise PreconditionError(f"unknown scenario {name!r}")
    base.update(overrides)
    return RunConfig(**base)


OSTWALD_CIRCLES = (((0.25, 0.30), 0.10), ((0.65, 0.60), 0.18))


def _disk(grid: Grid, c, r) -> np.ndarray:
    X, Y = grid.centers()
    return ((X - c[0]) ** 2 + (Y - c[1]) ** 2 < r * r).astype(float)


def initial_phase(cfg: RunConfig) -> np.ndarray:
    g = cfg.grid
    m = cfg.m0_fraction
    if cfg.scenario in ("stationary-circle", "sheared-droplet"):
        r = 0.25 * min(g.Lx, g.Ly) if m is None else math.sqrt(m * g.area / math.pi)
        chi = _disk(g, (0.5 * g.Lx, 0.5 * g.Ly), r)
    elif cfg.scenario == "flat-channel":
        ncol = g.nx // 2 if m is None else int(round(m * g.nx))
        chi = np.zeros(g.shape)
        chi[:ncol] = 1.0
    else:
        scale = 1.0
        if m is not None:
            scale = math.sqrt(m * g.area / (math.pi * sum(r * r for _, r in OSTWALD_CIRCLES)))
        chi = np.zeros(g.shape)
        for c, r in OSTWALD_CIRCLES:
            chi = np.maximum(chi, _disk(g, c, r * scale))
    if not (0 < chi.sum() < chi.size):
        raise PreconditionError("initial phase is empty or full")
    return chi


def initial_velocity(cfg: RunConfig) -> Velocity:
    g = cfg.grid
    if cfg.velocity == "taylor-green":
        return taylor_green(g, cfg.velocity_amplitude)
    return Velocity.zeros(g)


# -------------------------------------------------------------- scenario data

def component_radii(grid: Grid, chi: np.ndarray) -> list[tuple[tuple[float, float], float]]:
    """(centroid, area radius) of each connected component, largest first."""
    lab, n = ndimage.label(chi > 0.5)
    X, Y = grid.centers()
    out = []
    for i in range(1, n + 1):
        m = lab == i
        a = m.sum() * grid.dA
        out.append(((float(X[m].mean()), float(Y[m].mean())), math.sqrt(a / math.pi)))
    out.sort(key=lambda t: -t[1])
    return out


def tracked_radii(grid: Grid, chi: np.ndarray, centres) -> list[float]:
    """Area radius of the phase inside the Voronoi cell of each initial centre."""
    X, Y = grid.centers()
    d = np.array([(X - c[0]) ** 2 + (Y - c[1]) ** 2 for c in centres])
    owner = np.argmin(d, axis=0)
    return [math.sqrt(float(chi[owner == i].sum()) * grid.dA / math.pi) for i in range(len(centres))]


def radius_drift(grid: Grid, chi: np.ndarray, centre, r0: float) -> float:
    """max over interface cells of | |x - c| - r0 | in units of the spacing."""
    jc = jump_cells(chi)
    if not jc.any():
        return math.inf
    X, Y = grid.centers()
    r = np.sqrt((X[jc] - centre[0]) ** 2 + (Y[jc] - centre[1]) ** 2)
    # jump cells straddle the boundary: inside cells sit below r0, outside above
    return float(np.abs(r - r0).max() / grid.h)


# ------------------------------------------------------------------ the loop

@dataclass
class TrajectoryPoint:
    step: int
    t: float
    chi: str | None = None
    v: tuple[str, str] | None = None
    w: str | None = None


@dataclass
class Trajectory:
    config: RunConfig
    ledger: dg.EnergyLedger
    points: list[TrajectoryPoint] = field(default_factory=list)
    chi_history: list[np.ndarray] = field(default_factory=list)
    final_chi: np.ndarray | None = None
    final_fluid: fs.FluidState | None = None
    report: dict = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class LoopState:
    step: int
    t: float
    chi: np.ndarray
    fluid: fs.FluidState
    filt: fs.FilterState
    u_k: Velocity
    warm: RelaxedState | None
    slack: float


def _write_array(path: Path, a: np.ndarray) -> None:
    lines = [" ".join(str(s) for s in a.shape)]
    lines.extend(repr(float(x)) for x in a.ravel(order="C"))
    path.write_text("\n".join(lines) + "\n")


def _read_array(path: Path) -> np.ndarray:
    head, body = path.read_text().split("\n", 1)
    shape = tuple(int(s) for s in head.split())
    return np.array(body.split(), dtype=float).reshape(shape)


def write_pgm(path: Path, chi: np.ndarray) -> None:
    """Binary PGM with y increasing upward."""
    img = (np.clip(chi, 0, 1).T[::-1] * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def _store_checkpoint(out: Path, cfg: RunConfig, st: LoopState, ledger: dg.EnergyLedger) -> Path:
    d = out / "checkpoints" / f"step{st.step:05d}"
    d.mkdir(parents=True, exist_ok=True)
    g = cfg.grid
    write_snapshot(d / "chi.txt", g, st.chi)
    write_snapshot(d / "rho.txt", g, st.fluid.rho_h)
    _write_array(d / "v_u.txt", st.fluid.v.u)
    _write_array(d / "v_v.txt", st.fluid.v.v)
    _write_array(d / "psi.txt", st.fluid.psi)
    _write_array(d / "filter_phi.txt", st.filt.phi)
    _write_array(d / "filter_z.txt", st.filt.z)
    files = ["chi.txt", "rho.txt", "v_u.txt", "v_v.txt", "psi.txt", "filter_phi.txt", "filter_z.txt"]
    if st.warm is not None:
        _write_array(d / "warm_chi.txt", st.warm.chi)
        _write_array(d / "warm_p.txt", st.warm.p)
        files += ["warm_chi.txt", "warm_p.txt"]
    ledger.write_csv(d / "ledger.csv")
    manifest = dict(step=st.step, t=repr(st.t), slack=repr(st.slack), config_hash=cfg.digest(),
                    files=files, E0=repr(ledger.E0), K0=repr(ledger.K0), mass0=repr(ledger.mass0),
                    slack_floor=repr(ledger.slack_floor))
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def _read_ledger(path: Path) -> list[dg.LedgerRow]:
    rows = []
    names = [f.name for f in dataclasses.fields(dg.LedgerRow)]
    ints = {"step", "cp_iterations", "swaps"}
    with open(path) as fh:
        rd = csv.reader(fh)
        next(rd)
        next(rd)   # initial row
        for rec in rd:
            vals = dict(zip(dg.LEDGER_COLUMNS, rec))
            vals["lambda_"] = vals.pop("lambda")
            rows.append(dg.LedgerRow(**{k: (int(vals[k]) if k in ints else float(vals[k])) for k in names}))
    return rows


def load_checkpoint(path, cfg: RunConfig) -> tuple[LoopState, dg.EnergyLedger]:
    d = Path(path)
    man = json.loads((d / "manifest.json").read_text())
    if man["config_hash"] != cfg.digest():
        raise PreconditionError("checkpoint was written by a different configuration")
    g = cfg.grid
    _, chi = read_snapshot(d / "chi.txt")
    _, rho = read_snapshot(d / "rho.txt")
    V = Velocity(_read_array(d / "v_u.txt"), _read_array(d / "v_v.txt"))
    fluid = fs.FluidState(g, V, rho, float(man["t"]), _read_array(d / "psi.txt"))
    filt = fs.FilterState(_read_array(d / "filter_phi.txt"), _read_array(d / "filter_z.txt"))
    warm = None
    if (d / "warm_chi.txt").exists():
        warm = RelaxedState(_read_array(d / "warm_chi.txt"), _read_array(d / "warm_p.txt"))
    ops = fs.operators(g, cfg.bc)
    ledger = dg.EnergyLedger(_read_ledger(d / "ledger.csv"), float(man["E0"]), float(man["K0"]),
                             float(man["mass0"]), float(man["slack_floor"]))
    st = LoopState(int(man["step"]), float(man["t"]), chi, fluid, filt, ops.velocity(filt.phi), warm,
                   float(man["slack"]))
    return st, ledger


def _gt(grid: Grid, chi: np.ndarray, w: np.ndarray, params: CapillaryParams) -> float:
    geom = interface_geometry(grid, chi)
    if geom.weights.sum() == 0:
        return float("nan")
    return dg.gibbs_thomson_residual(grid, chi, w, geom, dg.probe_basis(grid, chi), params)


def advance(cfg: RunConfig, st: LoopState, ledger: dg.EnergyLedger, cap: CapillaryParams,
            fp: fs.FluidParams) -> tuple[LoopState, dg.LedgerRow]:
    """One outer step of the coupled scheme."""
    g = cfg.grid
    h = cfg.h
    n = st.step + 1
    Ts = subtimes(h, cfg.subtime_count, cfg.subtime_ratio)
    chi0 = st.chi
    E_prev = capillary_energy(g, chi0, cap)
    prev_ind = PhaseIndicator(g, chi0, float(chi0.sum()) * g.dA)
    m0 = prev_ind.m0
    u_k = st.u_k if st.u_k.max_abs() > 0.0 else None

    chi_i, g_prev, T_prev = chi0, chi0, 0.0
    w_bar = np.zeros(g.shape)
    work_int, diss_w, gap_sum = 0.0, 0.0, 0.0
    dsq_prev = 0.0
    warm = st.warm
    iters = swaps = 0
    level = 0.0
    res = sample_target = None
    for i, T in enumerate(Ts):
        last = i == len(Ts) - 1
        if u_k is None:
            target = chi0.copy()
        else:
            target = pullback(g, chi0, integrate_flow(g, u_k, T))
        prob = MinStepProblem(g, target, T, cap, m0)
        obj = StepObjective(prob)
        # work done by the transport between consecutive targets on the seed
        work_int += obj.fidelity(chi_i) - (dsq_prev / (2 * T))
        scfg = cfg.solver_config(relax=last or cfg.relax_every_subtime)
        res = minimize_step(prob, scfg, probes=[chi_i], previous=chi0, warm=warm,
                            rng_key=n * 1000 + i)
        if res.state is not None:
            warm = res.state
        if not math.isnan(res.gap_abs):
            gap_sum += res.gap_abs
            iters += res.iterations
        swaps += res.swaps
        level = res.level
        chi_new = res.chi.values
        dsq = 2 * T * obj.fidelity(chi_new)
        if not last:
            diss_w += dsq * (1.0 / (2 * T) - 1.0 / (2 * Ts[i + 1]))
        w_i = curvature_field(g, chi_new, target, T)
        w_bar += w_i * (T - T_prev) / h
        chi_i, dsq_prev, T_prev = chi_new, dsq, T
        sample_target = target
    chi_n = chi_i
    E_n = capillary_energy(g, chi_n, cap)
    u = kinetic_potential(g, chi_n, sample_target, h)
    grad_u_sq = dsq_prev / h**2
    mullins = diss_w + dsq_prev / (2 * h)

    fluid, frep = fs.ns_step(g, st.fluid, chi0, chi_n, u, w_bar, h, fp)
    fv = fs.filter_velocity(g, fluid.v, fp.k, h, st.filt, fp.bc)

    slack = st.slack + gap_sum
    budget = ledger.slack_floor + slack
    e_res = E_n + mullins - E_prev - work_int
    v_res = frep.residual
    total = (E_n + frep.kinetic + mullins + frep.dissipation) - (E_prev + frep.kinetic_prev)
    F_h = E_n + dsq_prev / (2 * h) - (sum(r.interface_work for r in ledger.rows) + work_int)
    lam, gtr = 0.0, float("nan")
    if jump_cells(chi_n).any():
        sample = DeGiorgiSample(st.t + h, h, res.chi, res.objective, sample_target, res)
        pot = curvature_potential(g, sample, cap)
        lam = pot.lam
        gtr = _gt(g, chi_n, pot.w, cap)
    row = dg.LedgerRow(
        step=n, t=st.t + h, energy=E_n, kinetic=frep.kinetic, grad_u_sq=grad_u_sq,
        grad_w_sq=2.0 * diss_w / h, viscous=frep.viscous, work=frep.work, F_h=F_h,
        mass=float(chi_n.sum()) * g.dA, interface_work=work_int, mullins_dissipation=mullins,
        fluid_dissipation=frep.dissipation, momentum_correction=frep.momentum_correction,
        gap_sum=slack, slack_budget=budget, e_side_residual=e_res, v_side_residual=v_res,
        total_residual=total, cp_iterations=iters, swaps=swaps, threshold_level=level, lambda_=lam,
        gt_residual=gtr, filter_norm=fv.norm)
    new = LoopState(n, st.t + h, chi_n, fluid, fv.state, fv.u_k, warm, slack)
    return new, row


def run(cfg: RunConfig, resume: str | Path | None = None, keep_history: bool = True) -> Trajectory:
    """Execute the coupled loop; writes config, ledger, report and snapshots when ``out`` is set."""
    t_start = time.perf_counter()
    g = cfg.grid
    cap = CapillaryParams(cfg.c0, cfg.gamma)
    fp = cfg.fluid_params()
    log.info("k=%.6g beta=%.6g (%s)", fp.k, fp.beta, "k = h^(-1/8), beta = 1/k" if fp.coupled else fp.override)
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    if resume is not None:
        st, ledger = load_checkpoint(resume, cfg)
    else:
        chi = initial_phase(cfg)
        rho = fp.density(chi)
        fluid = fs.FluidState.from_velocity(g, initial_velocity(cfg), rho, fp.bc)
        E0 = capillary_energy(g, chi, cap)
        K0 = fs.kinetic_energy(g, fluid.v, rho)
        ledger = dg.EnergyLedger([], E0, K0, float(chi.sum()) * g.dA, 1e-6 * (E0 + K0))
        filt = fs.FilterState.zero(g)
        st = LoopState(0, 0.0, chi, fluid, filt, Velocity.zeros(g), None, 0.0)
    traj = Trajectory(cfg, ledger)
    if keep_history:
        traj.chi_history.append(st.chi.copy())
    if out is not None and cfg.images:
        (out / "images").mkdir(exist_ok=True)
        write_pgm(out / "images" / f"chi_{st.step:05d}.pgm", st.chi)
    last_ckpt = None
    try:
        while st.step < cfg.steps:
            st, row = advance(cfg, st, ledger, cap, fp)
            ledger.append(row)
            if keep_history:
                traj.chi_history.append(st.chi.copy())
            point = TrajectoryPoint(st.step, st.t)
            if out is not None:
                if cfg.images:
                    write_pgm(out / "images" / f"chi_{st.step:05d}.pgm", st.chi)
                if cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0:
                    last_ckpt = _store_checkpoint(out, cfg, st, ledger)
                    point.chi = str(last_ckpt / "chi.txt")
                    point.v = (str(last_ckpt / "v_u.txt"), str(last_ckpt / "v_v.txt"))
            traj.points.append(point)
    except Exception:
        log.error("run aborted at step %d; last checkpoint %s", st.step + 1, last_ckpt)
        raise
    traj.final_chi = st.chi
    traj.final_fluid = st.fluid
    traj.report = dg.run_report(ledger, {"scenario": cfg.scenario, "k": fp.k, "beta": fp.beta,
                                         "config_hash": cfg.digest(), "steps": st.step})
    traj.wall_time = time.perf_counter() - t_start
    if out is not None:
        ledger.write_csv(out / "ledger.csv")
        dg.write_report(out / "report.json", traj.report)
    return traj


# ------------------------------------------------------------ verification

def scenario_checks(traj: Trajectory) -> dict:
    """Scenario-specific acceptance quantities on top of the ledger report."""
    cfg = traj.config
    g = cfg.grid
    chis = traj.chi_history
    out: dict = {"scenario": cfg.scenario}
    if cfg.scenario == "stationary-circle":
        c = (0.5 * g.Lx, 0.5 * g.Ly)
        r0 = component_radii(g, chis[0])[0][1]
        drift = max(radius_drift(g, c_, c, r0) for c_ in chis)
        base = radius_drift(g, chis[0], c, r0)
        out.update(radius_drift_cells=drift - base, initial_spread=base, passed=drift - base <= 2.0)
    elif cfg.scenario == "flat-channel":
        out.update(passed=all(np.array_equal(c_, chis[0]) for c_ in chis))
    elif cfg.scenario == "ostwald":
        centres = [c for c, _ in OSTWALD_CIRCLES]
        radii = [tracked_radii(g, c_, centres) for c_ in chis]
        r1 = [r[0] for r in radii]
        shrinking = all(b < a or (a == 0.0 and b == 0.0) for a, b in zip(r1, r1[1:]))
        out.update(r_small=r1, r_large=[r[1] for r in radii], passed=shrinking and r1[-1] < r1[0])
    else:
        out.update(passed=True)
    E = traj.ledger.column("energy")
    out["energy_non_increasing"] = bool(np.all(np.diff(np.concatenate([[traj.ledger.E0], E]))
                                               <= traj.ledger.slack_floor + traj.ledger.column("gap_sum")))
    return out


def _suite_fields() -> list[tuple[str, bool, str]]:
    from .field_core import adjoint_pair_check, grad, hm1_norm_sq, project_mean_zero
    g = Grid(64, 64)
    X, _ = g.centers()
    f = np.cos(np.pi * X)
    val = hm1_norm_sq(g, f, "spectral")
    rel = abs(val - 1 / (2 * np.pi**2)) * 2 * np.pi**2
    rng = np.random.default_rng(0)
    a = project_mean_zero(g, rng.standard_normal(g.shape))
    G = grad(g, rng.standard_normal(g.shape))
    adj = adjoint_pair_check(g, a, G)
    return [("hm1 eigenfunction", rel < 1e-6, f"rel={rel:.2e}"), ("grad/div adjoint", adj < 1e-10, f"{adj:.2e}")]


def _suite_energy() -> list[tuple[str, bool, str]]:
    g = Grid(64, 64)
    chi = np.zeros(g.shape)
    chi[:32] = 1.0
    e1 = capillary_energy(g, chi, CapillaryParams(1.0, math.pi / 2))
    e2 = capillary_energy(g, chi, CapillaryParams(1.0, math.pi / 3))
    return [("flat gamma=pi/2", abs(e1 - 1) < 1e-12, repr(e1)), ("flat cos=1/2", abs(e2 - 2) < 1e-12, repr(e2))]


def _suite_flowmap() -> list[tuple[str, bool, str]]:
    g = Grid(64, 64)
    chi = _disk(g, (0.5, 0.4), 0.2)
    V = taylor_green(g, 0.2)
    pb = pullback(g, chi, integrate_flow(g, V, 0.3))
    drift = abs(pb.sum() - chi.sum()) * g.dA
    m0 = chi.sum() * g.dA
    return [("measure preservation", drift <= 1e-3 * m0, f"drift={drift:.2e}")]


def _suite_mms() -> list[tuple[str, bool, str]]:
    g = Grid(32, 32)
    rng = np.random.default_rng(7)
    cap = CapillaryParams(1.0, math.pi / 2)
    ok = True
    worst = -np.inf
    for i in range(5):
        chi = _disk(g, rng.uniform(0.3, 0.7, 2), rng.uniform(0.12, 0.25))
        tgt = np.clip(chi + 0.3 * rng.standard_normal(g.shape), 0, 1)
        prob = MinStepProblem(g, tgt, 1e-3, cap, float(chi.sum()) * g.dA)
        probes = [chi] + [np.roll(chi, s, axis=int(rng.integers(2))) for s in (-1, 1)]
        res = minimize_step(prob, RelaxedSolverConfig(gap_tol=5e-2, max_iter=400, raise_on_fail=False),
                            probes=probes)
        obj = StepObjective(prob)
        d = res.objective - min(obj.value(p) for p in probes)
        worst = max(worst, d)
        ok &= d <= 1e-12 and res.chi.values.sum() == chi.sum()
    return [("probe optimality", ok, f"worst={worst:.2e}")]


def _suite_fluid() -> list[tuple[str, bool, str]]:
    g = Grid(48, 48)
    nu, h, steps = 0.01, 1e-3, 10
    p = fs.FluidParams.exploration(1e3, 0.0, "verify", nu1=nu, nu2=nu, bc="free-slip")
    chi = np.zeros(g.shape)
    st = fs.FluidState.from_velocity(g, taylor_green(g), p.density(chi), p.bc)
    K0 = fs.kinetic_energy(g, st.v, st.rho_h)
    worst = -np.inf
    for _ in range(steps):
        st, r = fs.ns_step(g, st, chi, chi, None, None, h, p)
        worst = max(worst, r.residual)
    rate = -math.log(r.kinetic / K0) / (steps * h)
    exact = fs.taylor_green_rate(nu)
    return [("taylor-green rate", abs(rate / exact - 1) < 0.1, f"{rate:.5f} vs {exact:.5f}"),
            ("energy inequality", worst <= 1e-6 * K0, f"worst={worst:.2e}")]


def _suite_coupled() -> list[tuple[str, bool, str]]:
    rows = []
    for name in ("stationary-circle", "flat-channel", "ostwald"):
        traj = run(preset(name))
        sc = scenario_checks(traj)
        rows.append((f"{name} scenario", bool(sc["passed"]), json.dumps({k: v for k, v in sc.items()
                                                                     if not isinstance(v, list)})))
        rows.append((f"{name} ledger", bool(traj.report["passed"]), ""))
    return rows


SUITE_FUNCS = {"fields": _suite_fields, "energy": _suite_energy, "flowmap": _suite_flowmap,
               "mms": _suite_mms, "fluid": _suite_fluid, "coupled": _suite_coupled}


def verify(suite: str) -> tuple[bool, list]:
    if suite not in SUITE_FUNCS:
        raise PreconditionError(f"unknown suite {suite!r}; choose from {SUITES}")
    rows = SUITE_FUNCS[suite]()
    return all(r[1] for r in rows), rows


# ------------------------------------------------------------------ oracles

def _oracle_hm1_random_32() -> dict:
    from .field_core import dense_neg_laplacian, hm1_inner, project_mean_zero
    g = Grid(32, 32)
    rng = np.random.default_rng(32)
    f = project_mean_zero(g, rng.standard_normal(g.shape))
    q = project_mean_zero(g, rng.standard_normal(g.shape))
    A = dense_neg_laplacian(g, "fd")
    n = A.shape[0]
    # pin the constant mode with a rank-one term; f, q are mean-zero
    Ap = A + np.ones((n, n)) / n
    x = np.linalg.solve(Ap, q.ravel())
    dense = g.dA * float(f.ravel() @ x)
    return {"config": "Grid(32,32), rng seed 32, fd backend", "dense": dense,
            "fast": hm1_inner(g, f, q, "fd")}


def _oracle_circle_perimeter() -> dict:
    from .phase_energy import tv_interior
    out = {"config": "disk r=0.25 at the domain centre, cell-centre digitization"}
    for n in (32, 64, 128, 256):
        g = Grid(n, n)
        out[str(n)] = tv_interior(g, _disk(g, (0.5, 0.5), 0.25)) / (2 * math.pi * 0.25) - 1
    return out


def _oracle_taylor_green() -> dict:
    g = Grid(64, 64)
    nu = 0.01
    p = fs.FluidParams.exploration(1e3, 0.0, "oracle", nu1=nu, nu2=nu, bc="free-slip")
    chi = np.zeros(g.shape)
    rows = {}
    for h in (4e-3, 2e-3, 1e-3):
        st = fs.FluidState.from_velocity(g, taylor_green(g), p.density(chi), p.bc)
        K0 = fs.kinetic_energy(g, st.v, st.rho_h)
        steps = int(round(0.02 / h))
        for _ in range(steps):
            st, r = fs.ns_step(g, st, chi, chi, None, None, h, p)
        rows[repr(h)] = -math.log(r.kinetic / K0) / (steps * h)
    rows["analytic"] = fs.taylor_green_rate(nu)
    rows["config"] = "Grid(64,64), nu=0.01, free-slip, beta=0, t=0.02"
    return rows


ORACLES = {"hm1-random-32": _oracle_hm1_random_32,
           "circle-perimeter-refinement": _oracle_circle_perimeter,
           "taylor-green-decay": _oracle_taylor_green}


# --------------------------------------------------------------------- CLI

@click.group()
@click.option("-v", "--verbose", is_flag=True)
def cli(verbose: bool):
    """Navier-Stokes / Mullins-Sekerka minimizing-movement runs."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", "preset_name", type=click.Choice(SCENARIOS))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@click.option("--steps", type=int)
@click.option("--images", is_flag=True)
@click.option("--resume", type=click.Path(exists=True, file_okay=False))
def run_cmd(config_path, preset_name, out, seed, steps, images, resume):
    """Run a scenario from a JSON config or a preset."""
    if bool(config_path) == bool(preset_name):
        raise click.UsageError("give exactly one of --config or --preset")
    cfg = RunConfig.load(config_path) if config_path else preset(preset_name)
    changes = {k: v for k, v in dict(out=out, seed=seed, steps=steps).items() if v is not None}
    if images:
        changes["images"] = True
    cfg = dataclasses.replace(cfg, **changes)
    traj = run(cfg, resume=resume)
    checks = scenario_checks(traj)
    click.echo(json.dumps({"report": traj.report, "scenario": checks}, indent=1, default=float))
    sys.exit(0 if traj.report["passed"] and checks["passed"] else 1)


@cli.command("verify")
@click.option("--suite", required=True, type=click.Choice(SUITES))
def verify_cmd(suite):
    """Run a verification suite; nonzero exit on failure."""
    ok, rows = verify(suite)
    for name, passed, info in rows:
        click.echo(f"{'PASS' if passed else 'FAIL'} {name} {info}")
    sys.exit(0 if ok else 1)


@cli.command("oracle")
@click.option("--case", "case", required=True, type=click.Choice(sorted(ORACLES)))
def oracle_cmd(case):
    """Print reference values and the configuration that produced them."""
    click.echo(json.dumps(ORACLES[case](), indent=1))


def main():
    cli()


if __name__ == "__main__":
    main()
