from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import disk, half_plane
from nsms import diagnostics as dg
from nsms.field_core import Grid, PreconditionError
from nsms.phase_energy import CapillaryParams, interface_geometry

RIGHT = CapillaryParams(1.0, math.pi / 2)
ZERO = dg.ProbeField("zero", lambda x, y: (0 * x, 0 * y), lambda x, y: (0 * x, 0 * x, 0 * x, 0 * x))


def _normal_bump(grid):
    # (b(x), 0) with b supported in a strip around x = 1/2
    def fn(x, y):
        return np.where(np.abs(x - 0.5) < 0.2, np.cos(np.pi * (x - 0.5) / 0.4) ** 2, 0.0), 0 * y

    def jac(x, y):
        a = np.pi * (x - 0.5) / 0.4
        d = np.where(np.abs(x - 0.5) < 0.2, -np.pi / 0.4 * 2 * np.sin(a) * np.cos(a), 0.0)
        return d, 0 * x, 0 * x, 0 * x

    return dg.ProbeField("normal-bump", fn, jac)


# ------------------------------------------------------------ probes

def test_probe_basis_count_and_tangency(unit64):
    chi = disk(unit64, (0.5, 0.5), 0.25)
    probes = dg.probe_basis(unit64, chi)
    assert len(probes) == 12
    for p in probes:
        S = p.sample(unit64)
        assert np.abs(S.u[[0, -1]]).max() <= 1e-14 and np.abs(S.v[:, [0, -1]]).max() <= 1e-14


@pytest.mark.parametrize("kind", ["radial", "rotation", "strain", "shear", "ex", "ey"])
def test_bump_jacobian_matches_differences(kind):
    p = dg.bump_probe(kind, (0.5, 0.45), 0.3)
    rng = np.random.default_rng(4)
    x, y = 0.5 + 0.25 * rng.uniform(-1, 1, 50), 0.45 + 0.25 * rng.uniform(-1, 1, 50)
    e = 1e-6
    J = p.jac(x, y)
    fx = [(a - b) / (2 * e) for a, b in zip(p.fn(x + e, y), p.fn(x - e, y))]
    fy = [(a - b) / (2 * e) for a, b in zip(p.fn(x, y + e), p.fn(x, y - e))]
    for got, want in zip(J, (fx[0], fy[0], fx[1], fy[1])):
        assert np.abs(np.asarray(got) - want).max() <= 1e-6


def test_unknown_bump_kind():
    with pytest.raises(PreconditionError):
        dg.bump_probe("twist", (0.5, 0.5), 0.2)


def test_mass_preserving_set_has_zero_volume_change(unit64):
    chi = disk(unit64, (0.4, 0.55), 0.2)
    for p in dg.mass_preserving_set(unit64, chi, dg.probe_basis(unit64, chi)):
        assert p.mass_preserving
        assert abs(dg.weighted_divergence(unit64, chi, 1.0, p)) <= 1e-12


# --------------------------------------------------- first variation

def test_first_variation_of_zero_field(unit64):
    assert dg.first_variation(interface_geometry(unit64, disk(unit64, (0.5, 0.5), 0.2)), ZERO) == 0.0


def test_first_variation_empty_geometry(unit32):
    assert dg.first_variation(interface_geometry(unit32, np.zeros(unit32.shape)), _normal_bump(unit32)) == 0.0


def test_flat_interface_normal_perturbation(unit64):
    geom = interface_geometry(unit64, half_plane(unit64))
    assert abs(dg.first_variation(geom, _normal_bump(unit64))) <= 1e-6


def test_disk_radial_bump_matches_circle_curvature():
    # inward normals: -(1/r) int B.n dl = 2 pi r eta(r) for B = (x - c) eta(|x - c|)
    g = Grid(128, 128)
    r, R = 0.25, 0.4
    geom = interface_geometry(g, disk(g, (0.5, 0.5), r))
    val = dg.first_variation(geom, dg.bump_probe("radial", (0.5, 0.5), R))
    exact = 2 * math.pi * r * math.cos(0.5 * math.pi * r / R) ** 2
    assert val == pytest.approx(exact, rel=0.1)


@given(st.floats(-5.0, 5.0).filter(lambda c: abs(c) > 1e-3))
def test_first_variation_linear(c):
    g = Grid(32, 32)
    geom = interface_geometry(g, disk(g, (0.45, 0.5), 0.2))
    B = dg.bump_probe("strain", (0.5, 0.5), 0.35)
    assert dg.first_variation(geom, B.scaled(c)) == pytest.approx(c * dg.first_variation(geom, B), rel=1e-12,
                                                                  abs=1e-14)


# ---------------------------------------------------- Gibbs-Thomson

def test_gt_flat_interface(unit64):
    chi = half_plane(unit64)
    geom = interface_geometry(unit64, chi)
    res = dg.gibbs_thomson_residual(unit64, chi, np.zeros(unit64.shape), geom, dg.probe_basis(unit64, chi), RIGHT)
    assert res <= 1e-3


def test_gt_empty_probe_set(unit32):
    chi = half_plane(unit32)
    with pytest.raises(PreconditionError):
        dg.gibbs_thomson_residual(unit32, chi, np.zeros(unit32.shape), interface_geometry(unit32, chi), [], RIGHT)


def test_gt_mass_preserving_matches_fitted_lambda(unit64):
    chi = disk(unit64, (0.5, 0.5), 0.25)
    geom = interface_geometry(unit64, chi)
    probes = dg.probe_basis(unit64, chi)
    X, Y = unit64.centers()
    w = 3.0 + 0.3 * np.cos(np.pi * X) * Y
    # general probes with w + lam, lam fitted by least squares over the probe terms
    t = dg.gibbs_thomson_terms(unit64, chi, w, geom, probes, RIGHT)
    a = np.array([dg.weighted_divergence(unit64, chi, 1.0, p) for p in probes])
    lam = float(a @ t) / float(a @ a)
    fitted = dg.gibbs_thomson_terms(unit64, chi, w + lam, geom, probes, RIGHT)
    assert np.abs(fitted - (t - lam * a)).max() <= 1e-10
    mp = dg.gibbs_thomson_terms(unit64, chi, w, geom, dg.mass_preserving_set(unit64, chi, probes), RIGHT)
    # the mass-preserving terms are the fitted residual vector itself
    assert np.abs(mp - fitted).max() <= 1e-8
    # and do not see the additive constant
    mp0 = dg.gibbs_thomson_terms(unit64, chi, w - 3.0, geom, dg.mass_preserving_set(unit64, chi, probes), RIGHT)
    assert np.abs(mp - mp0).max() <= 1e-8


@given(st.floats(-20.0, 20.0))
def test_gt_mass_preserving_independent_of_constant(c):
    g = Grid(32, 32)
    chi = disk(g, (0.45, 0.5), 0.2)
    geom = interface_geometry(g, chi)
    probes = dg.mass_preserving_set(g, chi, dg.probe_basis(g, chi))
    X, _ = g.centers()
    w = np.sin(3 * X)
    r0 = dg.gibbs_thomson_residual(g, chi, w, geom, probes, RIGHT)
    r1 = dg.gibbs_thomson_residual(g, chi, w + c, geom, probes, RIGHT)
    assert r1 == pytest.approx(r0, rel=1e-9, abs=1e-12)


# ------------------------------------------------------------- ledger

def _row(step, F, energy=None, **kw):
    base = dict(step=step, t=step * 1e-3, energy=F if energy is None else energy, kinetic=0.0, grad_u_sq=0.0,
                grad_w_sq=0.0, viscous=0.0, work=0.0, F_h=F, mass=0.25, interface_work=0.0,
                mullins_dissipation=0.0, fluid_dissipation=0.0, momentum_correction=0.0, gap_sum=0.0,
                slack_budget=1e-8, e_side_residual=-1e-3, v_side_residual=0.0, total_residual=-1e-3)
    base.update(kw)
    return dg.LedgerRow(**base)


def _ledger(Fs, **kw):
    L = dg.EnergyLedger([], E0=Fs[0], K0=0.0, mass0=0.25, slack_floor=1e-8)
    for i, F in enumerate(Fs[1:], 1):
        L.append(_row(i, F, **kw))
    return L


def test_monotone_single_row():
    assert dg.check_monotone_F(_ledger([1.0, 0.9]))["passed"]
    assert dg.check_monotone_F(_ledger([1.0]))["passed"]


def test_monotone_detects_bump():
    rep = dg.check_monotone_F(_ledger([1.0, 0.9, 0.8, 0.85, 0.7]))
    assert not rep["passed"] and rep["worst"] == pytest.approx(0.05)


def test_monotone_detects_bound_violation():
    rep = dg.check_monotone_F(_ledger([1.0, 1.0 + 1e-3]))
    assert not rep["passed"] and rep["bound_worst"] == pytest.approx(1e-3)


def test_dissipation_window_sums_residuals():
    L = _ledger([1.0, 0.9, 0.8, 0.7])
    L.rows[1].e_side_residual = 6e-9
    L.rows[2].e_side_residual = 6e-9
    rep = dg.check_dissipation(L)
    assert not rep["passed"]
    assert rep["parts"][0]["worst"] == pytest.approx(1.2e-8)
    assert rep["parts"][1]["passed"] and rep["parts"][2]["passed"]


def test_mass_check():
    L = _ledger([1.0, 0.9])
    assert dg.check_mass(L)["passed"]
    L.rows[0].mass = 0.25 + 1e-9
    assert not dg.check_mass(L)["passed"]


def test_non_finite_row_rejected():
    L = _ledger([1.0])
    with pytest.raises(PreconditionError):
        L.append(_row(1, float("inf")))


def test_report_round_trip(tmp_path):
    import json
    rep = dg.run_report(_ledger([1.0, 0.9, 0.8]), {"scenario": "x"})
    dg.write_report(tmp_path / "r.json", rep)
    back = json.loads((tmp_path / "r.json").read_text())
    assert back["passed"] and back["scenario"] == "x" and len(back["checks"]) == 3


@pytest.fixture(scope="module")
def ostwald_short():
    from nsms.scenario_cli import preset, run
    return run(preset("ostwald", steps=3, subtime_count=8))


def test_quiescent_run_is_mullins_dominated(ostwald_short):
    # starts at rest; the fluid only picks up what the interface forcing gives it
    L = ostwald_short.ledger
    assert L.K0 == 0.0 and L.column("kinetic").max() <= 1e-6 * L.E0
    assert np.abs(L.column("work")).max() <= 1e-6 * L.E0
    E = np.concatenate([[L.E0], L.column("energy")])
    assert np.all(np.diff(E) <= L.column("slack_budget"))
    assert dg.run_report(L)["passed"]


# The smooth identity would make the E-side inequality an equality in the
# limit. Thresholded steps release energy in lattice-sized jumps, and a
# lower Riemann sum of the dissipation with 8 sub-times misses most of it, so
# the measured gap is a large fraction of the dissipation (0.1 to 0.6 here).
@pytest.mark.xfail(strict=True, reason="E-side gap is not below 1e-2 of the dissipation on binary phases")
def test_e_side_near_equality(ostwald_short):
    L = ostwald_short.ledger
    gap = -L.column("e_side_residual")
    assert np.all(gap <= 1e-2 * L.column("mullins_dissipation"))
