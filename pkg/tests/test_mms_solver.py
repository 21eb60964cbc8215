from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import disk, half_plane
from nsms.field_core import (Grid, PreconditionError, SolverError, grad, hm1_norm_sq, project_mean_zero,
                             taylor_green)
from nsms.flow_map import integrate_flow, pullback
from nsms.mms_solver import (MinStepProblem, RelaxedSolverConfig, StepObjective, curvature_potential,
                             de_giorgi_interpolate, derivative_check, kinetic_potential, minimize_step,
                             project_box_mass, subtimes, threshold_mass)
from nsms.phase_energy import CapillaryParams, PhaseIndicator, capillary_energy, jump_cells, tv_interior

RIGHT = CapillaryParams(1.0, math.pi / 2)
FAST = RelaxedSolverConfig(gap_tol=1e-2, max_iter=1500, raise_on_fail=False)


def objective_oracle(grid, chi, target, tau, params):
    """E + |chi - target|^2_{H^-1} / (2 tau) through the spectral-free fd transform path."""
    return (capillary_energy(grid, chi, params)
            + hm1_norm_sq(grid, project_mean_zero(grid, chi - target), "fd") / (2 * tau))


# ------------------------------------------------------------- objective

def test_objective_matches_independent_evaluation(unit32):
    rng = np.random.default_rng(4)
    chi = disk(unit32, (0.5, 0.5), 0.2)
    tgt = np.clip(chi + 0.2 * rng.standard_normal(unit32.shape), 0, 1)
    prob = MinStepProblem(unit32, tgt, 3e-3, RIGHT, chi.sum() * unit32.dA)
    assert StepObjective(prob).value(chi) == pytest.approx(objective_oracle(unit32, chi, tgt, 3e-3, RIGHT),
                                                           rel=1e-12)


def test_problem_validation(unit32):
    chi = half_plane(unit32)
    with pytest.raises(PreconditionError):
        MinStepProblem(unit32, chi, 0.0, RIGHT, 0.5)
    with pytest.raises(PreconditionError):
        MinStepProblem(unit32, chi * 2, 1e-3, RIGHT, 0.5)
    with pytest.raises(PreconditionError):
        MinStepProblem(unit32, chi, 1e-3, RIGHT, 1.0)


def test_solver_config_validation():
    with pytest.raises(PreconditionError):
        RelaxedSolverConfig(step_safety=1.5)
    with pytest.raises(PreconditionError):
        RelaxedSolverConfig(max_iter=0)


# ------------------------------------------------------ mass machinery

@given(st.integers(0, 2**31 - 1), st.integers(1, 255))
def test_threshold_mass_is_exact(seed, count):
    vals = np.random.default_rng(seed).random((16, 16))
    chi, _ = threshold_mass(vals, count)
    assert chi.sum() == count and set(np.unique(chi)) <= {0.0, 1.0}


def test_threshold_ties_break_lexicographically():
    vals = np.full((8, 8), 0.5)
    chi, _ = threshold_mass(vals, 5)
    assert np.array_equal(np.flatnonzero(chi.ravel()), np.arange(5))


@given(st.integers(0, 2**31 - 1), st.floats(1.0, 60.0))
def test_box_mass_projection(seed, count):
    x = 2 * np.random.default_rng(seed).standard_normal((8, 8))
    p = project_box_mass(x, count)
    assert p.min() >= 0 and p.max() <= 1
    assert p.sum() == pytest.approx(count, abs=1e-9)


# ------------------------------------------------------------ the step

def test_flat_target_is_exact_minimizer(unit32):
    chi = half_plane(unit32)
    prob = MinStepProblem(unit32, chi, 1e-3, RIGHT, 0.5)
    res = minimize_step(prob, FAST)
    assert np.array_equal(res.chi.values, chi)
    # exhaustive mass-preserving single-cell exchanges across the interface band
    obj = StepObjective(prob)
    base = obj.value(chi)
    ones = [(i, j) for i in (14, 15) for j in range(32)]
    zeros = [(i, j) for i in (16, 17) for j in range(32)]
    worst = np.inf
    for a in ones:
        for b in zeros:
            c = chi.copy()
            c[a], c[b] = 0.0, 1.0
            worst = min(worst, obj.value(c) - base)
    assert worst > 0


def test_large_tau_keeps_centred_disk():
    g = Grid(64, 64)
    chi = disk(g, (0.5, 0.5), 0.2)
    prob = MinStepProblem(g, chi, 1.0, RIGHT, chi.sum() * g.dA)
    res = minimize_step(prob, FAST)
    X, Y = g.centers()
    moved = res.chi.values != chi
    if moved.any():
        r = np.hypot(X[moved] - 0.5, Y[moved] - 0.5)
        assert np.abs(r - 0.2).max() <= 1.5 * g.dx


def test_large_tau_rounds_a_square():
    g = Grid(32, 32)
    sq = np.zeros(g.shape)
    sq[8:24, 8:24] = 1.0
    prob = MinStepProblem(g, sq, 10.0, RIGHT, sq.sum() * g.dA)
    res = minimize_step(prob, FAST)
    assert tv_interior(g, res.chi.values) < tv_interior(g, sq)
    assert res.chi.values.sum() == sq.sum()


def test_tiny_tau_returns_thresholded_target():
    g = Grid(32, 32)
    tgt = disk(g, (0.4, 0.55), 0.18)
    prob = MinStepProblem(g, tgt, 1e-4 * 1e-4, RIGHT, tgt.sum() * g.dA)
    assert np.array_equal(minimize_step(prob, FAST).chi.values, tgt)


def test_infeasible_mass_rejected(unit32):
    with pytest.raises(PreconditionError):
        MinStepProblem(unit32, np.zeros(unit32.shape), 1e-3, RIGHT, 0.0)


def _random_instance(seed):
    g = Grid(32, 32)
    rng = np.random.default_rng(seed)
    cap = CapillaryParams(rng.uniform(0.5, 2.0), rng.uniform(math.pi / 4, math.pi / 2))
    chi = disk(g, rng.uniform(0.3, 0.7, 2), rng.uniform(0.1, 0.25))
    tgt = pullback(g, chi, integrate_flow(g, taylor_green(g, rng.uniform(0, 2)), rng.uniform(0, 0.05)))
    tgt = np.clip(tgt + rng.uniform(0, 0.3) * rng.standard_normal(g.shape), 0, 1)
    tau = 10 ** rng.uniform(-4, -2)
    probes = [threshold_mass(tgt, int(chi.sum()))[0]]
    ones, zeros = np.flatnonzero(chi.ravel()), np.flatnonzero(chi.ravel() == 0)
    for _ in range(10):
        c = chi.copy().ravel()
        c[rng.choice(ones)], c[rng.choice(zeros)] = 0.0, 1.0
        probes.append(c.reshape(g.shape))
    return g, chi, tgt, tau, cap, probes


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1))
def test_probe_optimality_mass_and_energy_inequality(seed):
    g, chi, tgt, tau, cap, probes = _random_instance(seed)
    res = minimize_step(MinStepProblem(g, tgt, tau, cap, chi.sum() * g.dA), FAST, probes=probes,
                        previous=chi)
    mine = objective_oracle(g, res.chi.values, tgt, tau, cap)
    assert mine <= min(objective_oracle(g, p, tgt, tau, cap) for p in probes + [chi]) + 1e-12
    assert abs(res.chi.values.sum() * g.dA - chi.sum() * g.dA) <= 1e-12
    # one-step inequality against the previous indicator, slack = duality gap
    assert mine <= objective_oracle(g, chi, tgt, tau, cap) + res.gap_abs


def test_relaxed_gap_reaches_tolerance(unit32):
    chi = disk(unit32, (0.5, 0.5), 0.2)
    tgt = pullback(unit32, chi, integrate_flow(unit32, taylor_green(unit32), 0.02))
    cfg = RelaxedSolverConfig(gap_tol=1e-3, max_iter=20000)
    res = minimize_step(MinStepProblem(unit32, tgt, 1e-3, RIGHT, chi.sum() * unit32.dA), cfg)
    assert res.gap <= 1e-3
    # the certified lower bound of the relaxation never exceeds a feasible binary value
    assert res.relaxed_objective - res.gap_abs <= res.objective + 1e-12


def test_nonconvergence_raises_with_gap(unit32):
    chi = disk(unit32, (0.5, 0.5), 0.2)
    tgt = np.clip(chi + 0.3 * np.random.default_rng(0).standard_normal(unit32.shape), 0, 1)
    cfg = RelaxedSolverConfig(gap_tol=1e-12, max_iter=30, check_every=10)
    with pytest.raises(SolverError) as err:
        minimize_step(MinStepProblem(unit32, tgt, 1e-3, RIGHT, chi.sum() * unit32.dA), cfg)
    assert err.value.residual > 1e-12


def test_deterministic(unit32):
    g, chi, tgt, tau, cap, probes = _random_instance(99)
    prob = MinStepProblem(g, tgt, tau, cap, chi.sum() * g.dA)
    a = minimize_step(prob, FAST, probes=probes, previous=chi, rng_key=3)
    b = minimize_step(prob, FAST, probes=probes, previous=chi, rng_key=3)
    assert np.array_equal(a.chi.values, b.chi.values) and a.objective == b.objective


# ------------------------------------------------------ De Giorgi samples

def test_subtimes_geometric():
    Ts = subtimes(1e-3, 4, 0.5)
    assert Ts[-1] == 1e-3 and Ts == sorted(Ts)
    assert all(b / a == pytest.approx(2.0) for a, b in zip(Ts, Ts[1:]))
    with pytest.raises(PreconditionError):
        subtimes(1e-3, 0)


def test_full_subtime_reproduces_step(unit32):
    chi = disk(unit32, (0.5, 0.5), 0.22)
    V = taylor_green(unit32, 0.5)
    h = 1e-3
    prev = PhaseIndicator(unit32, chi)
    s = de_giorgi_interpolate(unit32, prev, V, 2.0 + h, 2.0, h, RIGHT, FAST)
    tgt = pullback(unit32, chi, integrate_flow(unit32, V, h))
    direct = minimize_step(MinStepProblem(unit32, tgt, h, RIGHT, prev.m0), FAST, previous=chi)
    assert s.T == pytest.approx(h)
    assert np.array_equal(s.chi.values, direct.chi.values)
    assert s.f == pytest.approx(direct.objective, rel=1e-12)   # T = (2 + h) - 2 rounds


def test_stationary_shape_without_flow(unit32):
    chi = half_plane(unit32)
    prev = PhaseIndicator(unit32, chi)
    for T in subtimes(1e-3, 4):
        s = de_giorgi_interpolate(unit32, prev, None, T, 0.0, 1e-3, RIGHT, FAST)
        assert np.array_equal(s.chi.values, chi)


def test_subtime_outside_interval_rejected(unit32):
    prev = PhaseIndicator(unit32, half_plane(unit32))
    with pytest.raises(PreconditionError):
        de_giorgi_interpolate(unit32, prev, None, 0.0, 0.0, 1e-3, RIGHT, FAST)
    with pytest.raises(PreconditionError):
        de_giorgi_interpolate(unit32, prev, None, 2e-3, 0.0, 1e-3, RIGHT, FAST)


def test_interpolant_value_nonincreasing_up_to_work(unit32):
    # f_{t2} <= f_{t1} + |work| + slack along the sub-times of one step
    chi = disk(unit32, (0.5, 0.45), 0.2)
    V = taylor_green(unit32)
    prev = PhaseIndicator(unit32, chi)
    Ts = subtimes(1e-3, 5)
    samples = [de_giorgi_interpolate(unit32, prev, V, T, 0.0, 1e-3, RIGHT, FAST) for T in Ts]
    for a, b in zip(samples, samples[1:]):
        obj_b = StepObjective(MinStepProblem(unit32, b.target, b.T, RIGHT, prev.m0))
        # work of the transport between the two targets, evaluated on the earlier minimizer
        work = obj_b.fidelity(a.chi.values) - StepObjective(
            MinStepProblem(unit32, a.target, a.T, RIGHT, prev.m0)).fidelity(a.chi.values) * a.T / b.T
        assert b.f <= a.f + abs(work) + b.result.gap_abs + 1e-12


def test_derivative_identity_small_grid(unit32):
    chi = disk(unit32, (0.5, 0.45), 0.2)
    d = derivative_check(unit32, PhaseIndicator(unit32, chi), taylor_green(unit32), 1e-5, 1e-4, RIGHT, FAST)
    assert d.rel_error <= 1e-2


# ------------------------------------------------------------ potentials

def test_kinetic_potential_zero(unit32):
    chi = disk(unit32, (0.5, 0.5), 0.2)
    assert np.abs(kinetic_potential(unit32, chi, chi, 1e-3)).max() == 0.0


def test_kinetic_potential_cosine(unit64):
    X, _ = unit64.centers()
    eps, h = 1e-3, 1e-2
    base = np.full(unit64.shape, 0.5)
    u = kinetic_potential(unit64, base + eps * np.cos(np.pi * X), base, h, backend="spectral")
    assert np.abs(u + eps * np.cos(np.pi * X) / (h * np.pi**2)).max() <= 1e-12


def test_kinetic_potential_gradient_norm_identity(unit32):
    rng = np.random.default_rng(8)
    chi = disk(unit32, (0.5, 0.5), 0.2)
    new = chi.copy().ravel()
    on, off = np.flatnonzero(new == 1), np.flatnonzero(new == 0)
    new[rng.choice(on, 12, replace=False)] = 0
    new[rng.choice(off, 12, replace=False)] = 1
    new = new.reshape(unit32.shape)
    h = 1e-3
    u = kinetic_potential(unit32, new, chi, h)
    G = grad(unit32, u)
    lhs = unit32.dA * float(np.sum(G.u**2) + np.sum(G.v**2))
    rhs = hm1_norm_sq(unit32, (new - chi) / h, "fd")
    assert lhs == pytest.approx(rhs, rel=1e-8)


def test_kinetic_potential_mass_mismatch(unit32):
    chi = disk(unit32, (0.5, 0.5), 0.2)
    with pytest.raises(PreconditionError):
        kinetic_potential(unit32, chi, np.clip(chi + 0.2, 0, 1), 1e-3)


def _stationary_sample(grid, chi, params):
    return de_giorgi_interpolate(grid, PhaseIndicator(grid, chi), None, 1e-4, 0.0, 1e-4, params, FAST)


def test_curvature_potential_flat(unit32):
    s = _stationary_sample(unit32, half_plane(unit32), RIGHT)
    pot = curvature_potential(unit32, s, RIGHT)
    assert np.abs(pot.w0).max() == 0.0
    assert abs(pot.lam) <= 1e-10


def test_curvature_potential_disk_and_linearity():
    g = Grid(64, 64)
    chi = disk(g, (0.5, 0.5), 0.25)
    s = _stationary_sample(g, chi, RIGHT)
    pot = curvature_potential(g, s, RIGHT)
    wi = pot.w[jump_cells(s.chi.values)]
    assert np.abs(wi / 4.0 - 1).max() <= 0.2
    double = CapillaryParams(2.0, math.pi / 2)
    pot2 = curvature_potential(g, s, double)
    assert pot2.w[jump_cells(s.chi.values)] == pytest.approx(2 * wi, rel=1e-12)
    assert pot.w - pot.lam == pytest.approx(pot.w0, abs=0)


def test_curvature_potential_degenerate_probe_set(unit32):
    from nsms import diagnostics as dg
    chi = disk(unit32, (0.5, 0.5), 0.2)
    s = _stationary_sample(unit32, chi, RIGHT)
    mp = dg.mass_preserving_set(unit32, chi, dg.probe_basis(unit32, chi))
    pot = curvature_potential(unit32, s, RIGHT, probes=mp)
    assert pot.degenerate and pot.lam == 0.0
