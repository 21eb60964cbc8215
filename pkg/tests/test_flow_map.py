from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from conftest import disk
from nsms.field_core import Grid, PreconditionError, Velocity, grad, taylor_green
from nsms.flow_map import (_index_coords, composition_difference_rate, displacement_bound,
                           gronwall_bound, integrate_flow, map_jacobian_norm, pullback,
                           pullback_rate, velocity_c1_norm)
from nsms.phase_energy import tv_interior


def test_zero_velocity_is_identity(unit32):
    fm = integrate_flow(unit32, Velocity.zeros(unit32), 0.3)
    X, Y = unit32.centers()
    assert np.array_equal(fm.x, X) and np.array_equal(fm.y, Y)


# once characteristics cross cell lines the bilinear velocity is only C^0 and
# RK4 drops to low order there, so the long-s case gets a looser bound
@pytest.mark.parametrize("s,tol", [(1e-4, 1e-8), (1e-3, 1e-8), (0.02, 1e-6)])
def test_taylor_green_matches_fine_substeps(unit64, s, tol):
    V = taylor_green(unit64)
    coarse = integrate_flow(unit64, V, s)
    fine = integrate_flow(unit64, V, s, substeps=100 * coarse.substeps)
    assert max(np.abs(coarse.x - fine.x).max(), np.abs(coarse.y - fine.y).max()) <= tol


def test_substep_cap(unit64):
    V = taylor_green(unit64, 3.0)
    fm = integrate_flow(unit64, V, 0.1)
    assert (0.1 / fm.substeps) * V.max_abs() <= 0.5 * unit64.dx


def test_nan_velocity_rejected(unit32):
    V = Velocity.zeros(unit32)
    V.u[3, 3] = np.nan
    with pytest.raises(PreconditionError):
        integrate_flow(unit32, V, 0.1)


@pytest.mark.parametrize("amp,s", [(0.5, 0.05), (1.0, 0.1), (2.0, 0.2), (1.0, -0.15)])
def test_gronwall_bound(unit64, amp, s):
    V = taylor_green(unit64, amp)
    fm = integrate_flow(unit64, V, s)
    assert map_jacobian_norm(fm) <= gronwall_bound(s, velocity_c1_norm(unit64, V))


def test_group_property(unit64):
    V = taylor_green(unit64, 0.7)
    fm = integrate_flow(unit64, V, 0.1)
    back = integrate_flow(unit64, V, -0.1, substeps=fm.substeps, points=(fm.x, fm.y))
    X, Y = unit64.centers()
    assert max(np.abs(back.x - X).max(), np.abs(back.y - Y).max()) <= 1e-6 * unit64.dx


def test_foot_points_stay_in_domain(unit32):
    fm = integrate_flow(unit32, taylor_green(unit32, 2.0), 0.4)
    assert fm.x.min() >= 0 and fm.x.max() <= 1 and fm.y.min() >= 0 and fm.y.max() <= 1
    assert fm.clamp_max <= 1e-8 * unit32.dx


def test_pullback_identity_exact(unit32):
    chi = disk(unit32, (0.4, 0.6), 0.2)
    assert np.array_equal(pullback(unit32, chi, integrate_flow(unit32, Velocity.zeros(unit32), 1.0)), chi)


def test_pullback_measure_preservation(unit64):
    chi = disk(unit64, (0.5, 0.5), 0.25)
    pb = pullback(unit64, chi, integrate_flow(unit64, taylor_green(unit64), 0.01))
    m0 = chi.sum() * unit64.dA
    assert abs(pb.sum() * unit64.dA - m0) <= 1e-3 * m0


def test_measure_drift_shrinks_under_refinement():
    drifts = []
    for n in (32, 64, 128):
        g = Grid(n, n)
        chi = disk(g, (0.5, 0.4), 0.2)
        pb = pullback(g, chi, integrate_flow(g, taylor_green(g, 0.5), 0.2))
        drifts.append(abs(pb.sum() - chi.sum()) * g.dA)
    assert drifts[2] < drifts[0]


@given(st.integers(0, 2**31 - 1), st.floats(-0.3, 0.3), st.floats(0.1, 2.0))
def test_pullback_in_unit_interval(seed, s, amp):
    g = Grid(16, 16)
    chi = (np.random.default_rng(seed).random(g.shape) < 0.4).astype(float)
    pb = pullback(g, chi, integrate_flow(g, taylor_green(g, amp), s))
    assert pb.min() >= 0.0 and pb.max() <= 1.0


@pytest.mark.parametrize("s", [0.02, 0.05, 0.1])
def test_l1_displacement_bound(unit64, s):
    V = taylor_green(unit64)
    chi = disk(unit64, (0.45, 0.55), 0.2)
    pb = pullback(unit64, chi, integrate_flow(unit64, V, -s))
    l1 = np.abs(pb - chi).sum() * unit64.dA
    bound = displacement_bound(s, velocity_c1_norm(unit64, V), tv_interior(unit64, chi), V.max_abs())
    assert l1 <= 1.05 * bound


def test_composition_rate_zero_velocity(unit32):
    r = composition_difference_rate(unit32, disk(unit32, (0.5, 0.5), 0.2), Velocity.zeros(unit32), 0.1)
    assert r.value == 0.0 and not r.flagged


def test_composition_rate_converges_and_is_bounded(unit64):
    V = taylor_green(unit64, 0.5)
    chi = disk(unit64, (0.5, 0.4), 0.22)
    vals = [composition_difference_rate(unit64, chi, V, s).value for s in (0.04, 0.02, 0.01)]
    for a, b in zip(vals, vals[1:]):
        assert abs(a - b) <= 0.1 * b
    assert max(vals) <= 1.05 * V.max_abs()


@given(st.floats(0.1, 3.0), st.floats(0.005, 0.2))
def test_composition_rate_bound(amp, s):
    g = Grid(32, 32)
    V = taylor_green(g, amp)
    r = composition_difference_rate(g, disk(g, (0.55, 0.45), 0.2), V, s)
    assert r.value <= 1.05 * V.max_abs()


def test_composition_rate_needs_positive_s(unit32):
    with pytest.raises(PreconditionError):
        composition_difference_rate(unit32, np.zeros(unit32.shape), taylor_green(unit32), 0.0)


def test_chain_rule_and_transport_pairings_agree_on_smooth_data():
    # d/ds int phi (f o X_-s) two ways: chain rule on the pullback and the
    # composed test function phi o X_s paired with f v
    errs = []
    for n in (32, 64, 128):
        g = Grid(n, n)
        X, Y = g.centers()
        V = taylor_green(g)
        f = np.exp(-((X - 0.5) ** 2 + (Y - 0.45) ** 2) / 0.02)
        phi = np.cos(np.pi * X) * np.cos(2 * np.pi * Y) + X * Y
        s = 1e-4
        chain = g.dA * float(np.sum(phi * pullback_rate(g, f, integrate_flow(g, V, s), V)))
        fwd = integrate_flow(g, V, -s)
        comp = ndimage.map_coordinates(phi, _index_coords(g, fwd.x, fwd.y), order=1, mode="nearest")
        gc = grad(g, comp)
        fu = np.zeros_like(V.u)
        fv = np.zeros_like(V.v)
        fu[1:-1] = 0.5 * (f[1:] + f[:-1])
        fv[:, 1:-1] = 0.5 * (f[:, 1:] + f[:, :-1])
        transport = g.dA * float(np.sum(fu * V.u * gc.u) + np.sum(fv * V.v * gc.v))
        errs.append(abs(chain - transport) / abs(transport))
    assert errs[-1] <= 0.01
    assert math.log2(errs[0] / errs[-1]) / 2 >= 0.9
