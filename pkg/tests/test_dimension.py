import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid
from scipy.stats import ortho_group

from pullback_ns.background_flow import BoundaryData, build_background_flow
from pullback_ns.dimension import (
    TangentBundle, case_I_lhs, dimension_bounds, evolve_tangent, forcing_statistics, full_quadratic_form_terms,
    lieb_thirring_probe, propagate, quadratic_form_terms, tangent_fd_check, trace_exponents, vanishing_terms,
)
from pullback_ns.forcing import ForcingSpec
from pullback_ns.operators import build_tensors, pad_field
from pullback_ns.solver import ModalState, SolverConfig, trajectory
from pullback_ns.spectral_basis import build_stokes_basis

FORCED = ForcingSpec.perturbed(np.r_[1.0, 0.5, np.zeros(14)], 0.5,
                               ForcingSpec.quasiperiodic(np.r_[0.5, 0.3, 0.2, np.zeros(13)],
                                                         np.r_[1.0, math.sqrt(2), math.pi, np.ones(13)]))


def base_state(tensors, amp=0.5, seed=3):
    rng = np.random.default_rng(seed)
    lam = tensors.eigenvalues
    return amp * rng.standard_normal(tensors.m) * lam[0] / lam


def test_zero_base_modes_decay_exactly(tensors_zero):
    cfg = SolverConfig(0.1, 1e-3)
    lam = tensors_zero.eigenvalues
    for k in (0, 5, 15):
        xi = np.eye(16)[k]
        out = propagate(np.zeros(16), xi, 0.0, 0.2, cfg, tensors_zero)
        np.testing.assert_allclose(out, xi * math.exp(-0.1 * lam[k] * 0.2), rtol=1e-12, atol=1e-300)


def test_tangent_linearity(tensors_lift, rng):
    cfg = SolverConfig(0.1, 2e-3)
    a0 = base_state(tensors_lift)
    xi = rng.standard_normal(16)
    one = propagate(a0, xi, 0.0, 0.3, cfg, tensors_lift, FORCED)
    two = propagate(a0, 2 * xi, 0.0, 0.3, cfg, tensors_lift, FORCED)
    np.testing.assert_allclose(two, 2 * one, rtol=1e-13, atol=1e-14 * np.linalg.norm(one))


def test_fd_second_order_on_forced_run(tensors_lift, rng):
    cfg = SolverConfig(0.1, 2e-3)
    out = tangent_fd_check(base_state(tensors_lift), rng.standard_normal(16), 0.0, 0.5, (1e-3, 5e-4, 2.5e-4),
                           cfg, tensors_lift, FORCED)
    assert all(p >= 1.5 for p in out["orders"])
    errs = [r["abs_error"] for r in out["rows"]]
    assert all(1.5 <= errs[i] / errs[i + 1] <= 4.5 for i in range(2))


@pytest.fixture(scope="module")
def tensors_m1(grid32):
    b = build_stokes_basis(grid32, 1)
    return build_tensors(b, build_background_flow(grid32, BoundaryData.zero(), 0.15), 1.0)


def test_fd_exact_on_linear_zero_base(tensors_m1):
    # one mode and no lift: T = 0, so the discrete flow is exactly linear
    cfg = SolverConfig(1.0, 1e-3)
    out = tangent_fd_check(np.zeros(1), np.ones(1), 0.0, 0.5, (1e-3, 5e-4, 2.5e-4), cfg, tensors_m1)
    assert all(r["rel_error"] <= 1e-10 for r in out["rows"])


def test_fd_on_multimode_zero_base_is_second_order(tensors_zero, rng):
    # the quadratic term leaves a cubic remainder in the symmetric difference
    cfg = SolverConfig(0.1, 2e-3)
    out = tangent_fd_check(np.zeros(16), rng.standard_normal(16), 0.0, 0.5, (1e-3, 5e-4), cfg, tensors_zero)
    assert 3.5 <= out["rows"][0]["abs_error"] / out["rows"][1]["abs_error"] <= 4.5


def test_fd_zero_direction(tensors_lift):
    cfg = SolverConfig(0.1, 2e-3)
    out = tangent_fd_check(base_state(tensors_lift), np.zeros(16), 0.0, 0.1, (1e-3, 5e-4), cfg, tensors_lift, FORCED)
    assert np.all(out["tangent"] == 0.0)
    assert all(r["abs_error"] == 0.0 for r in out["rows"])


def test_fd_ladder_must_decrease(tensors_zero):
    with pytest.raises(ValueError):
        tangent_fd_check(np.zeros(16), np.ones(16), 0.0, 0.1, (1e-3, 2e-3), SolverConfig(0.1, 1e-3), tensors_zero)


def test_zero_base_trace_sums(tensors_zero):
    cfg = SolverConfig(0.1, 1e-3)
    res = trace_exponents(ModalState(0.0, np.zeros(16)), 0.2, 8, cfg, tensors_zero)
    expect = -0.1 * np.cumsum(tensors_zero.eigenvalues[:8])
    assert np.all(np.abs(res.q - expect) <= 1e-8 * np.abs(expect))
    assert np.all(np.diff(res.q) < 0)
    assert res.first_negative == 1 and res.stabilized
    # the volume exponents agree with the trace on linear dynamics
    np.testing.assert_allclose(res.q_volume, expect, rtol=1e-6)


def test_period_halving_on_forced_run(tensors_lift):
    a0 = ModalState(0.0, base_state(tensors_lift))
    cfg = SolverConfig(0.1, 2e-3)
    q = [trace_exponents(a0, 1.0, 6, cfg, tensors_lift, FORCED, period=p).q for p in (10, 5)]
    assert np.all(np.abs(q[1] - q[0]) <= 0.02 * np.abs(q[0]))


def test_gram_after_reorthonormalization(tensors_lift):
    cfg = SolverConfig(0.1, 2e-3)
    b = TangentBundle.identity(0.0, 5, 16, period=10)
    b, _ = evolve_tangent(b, ModalState(0.0, base_state(tensors_lift)), cfg, tensors_lift, FORCED, t_end=0.2)
    assert b.steps % b.period == 0
    assert b.gram_error() <= 1e-10


def test_recorded_base_matches_cointegrated(tensors_lift):
    cfg = SolverConfig(0.1, 2e-3)
    a0 = ModalState(0.0, base_state(tensors_lift))
    tr = trajectory(a0, 0.1, cfg, tensors_lift, FORCED)
    b1, _ = evolve_tangent(TangentBundle.identity(0.0, 3, 16), tr, cfg, tensors_lift, FORCED)
    b2, _ = evolve_tangent(TangentBundle.identity(0.0, 3, 16), a0, cfg, tensors_lift, FORCED, t_end=0.1)
    np.testing.assert_allclose(b1.frames, b2.frames, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b1.trace_integral, b2.trace_integral, rtol=1e-12)


def test_time_mismatch_rejected(tensors_zero):
    cfg = SolverConfig(0.1, 1e-3)
    with pytest.raises(ValueError):
        evolve_tangent(TangentBundle.identity(0.0, 2, 16), ModalState(0.5, np.zeros(16)), cfg, tensors_zero,
                       t_end=1.0)
    tr = trajectory(ModalState(0.5, np.zeros(16)), 0.51, cfg, tensors_zero)
    with pytest.raises(ValueError):
        evolve_tangent(TangentBundle.identity(0.0, 2, 16), tr, cfg, tensors_zero)


def test_vanishing_terms_and_reduced_form(tensors_lift, rng):
    a = rng.standard_normal(16)
    scale = np.max(np.abs(tensors_lift.T)) * (1 + np.linalg.norm(a))
    for _ in range(20):
        e = rng.standard_normal(16)
        e /= np.linalg.norm(e)
        v = vanishing_terms(tensors_lift, a, e)
        assert abs(v["b_psi_e_e"]) <= 1e-10 * scale and abs(v["b_v_e_e"]) <= 1e-10 * scale
    Q = np.linalg.qr(rng.standard_normal((16, 4)))[0].T
    np.testing.assert_allclose(quadratic_form_terms(tensors_lift, a, Q), full_quadratic_form_terms(tensors_lift, a, Q),
                               rtol=1e-10, atol=1e-10 * scale)


def test_lieb_thirring_single_mode(basis16):
    W = pad_field(basis16.velocities[0])
    h = basis16.grid.h
    rho2 = np.sum(W**2, axis=0) ** 2
    expect = trapezoid(trapezoid(rho2, dx=h), dx=h) / basis16.eigenvalues[0]
    assert lieb_thirring_probe(np.eye(16)[:1], basis16) == pytest.approx(expect, rel=1e-12)


def test_lieb_thirring_remix_invariance(basis16):
    frames = np.eye(16)[:4]
    R = ortho_group.rvs(4, random_state=7)
    base = lieb_thirring_probe(frames, basis16)
    # sum_i |e_i|^2 is invariant; the denominator is too because the frame spans the same space
    assert lieb_thirring_probe(R @ frames, basis16) == pytest.approx(base, rel=1e-8)


def test_lieb_thirring_bounded_over_random_frames(basis16, rng):
    vals = []
    for _ in range(20):
        Q = np.linalg.qr(rng.standard_normal((16, 3)))[0].T
        vals.append(lieb_thirring_probe(Q, basis16))
    assert np.all(np.isfinite(vals)) and max(vals) / min(vals) < 10


def test_dimension_bounds_trivial_data():
    rep = dimension_bounds(1.0, 52.3, 0.2, 0.0, M=0.0, f_sup_H=0.0)
    assert rep.Re_stmt == rep.Re_proof == rep.G_stmt == rep.G_proof == 0.0
    assert rep.case_I_n == 1 and rep.applicable_case == "I"
    stats = forcing_statistics(None, np.ones(4), 0.0)
    assert stats["M"] == 0.0 and stats["f_sup_H"] == 0.0


def test_case_I_arithmetic():
    assert case_I_lhs(1.0, 2) == pytest.approx(2 * math.pi, rel=1e-15)


@settings(max_examples=40, deadline=None)
@given(nu=st.floats(0.05, 2.0), eps=st.floats(0.05, 0.5), phi=st.floats(0, 5), M=st.floats(0, 5))
def test_case_I_threshold_minimal(nu, eps, phi, M):
    rep = dimension_bounds(nu, 52.3, eps, phi, M=M)
    assert case_I_lhs(nu, rep.case_I_n) >= rep.threshold_rhs
    if rep.case_I_n > 1:
        assert case_I_lhs(nu, rep.case_I_n - 1) < rep.threshold_rhs


def test_case_II_dominates_first_negative(tensors_lift):
    cfg = SolverConfig(0.1, 2e-3)
    small = ForcingSpec.stationary(np.r_[0.5, 0.25, np.zeros(14)])
    tr = trace_exponents(ModalState(0.0, base_state(tensors_lift)), 2.0, 4, cfg, tensors_lift, small, transient=1.0)
    assert tr.first_negative == 1
    stats = forcing_statistics(small, tensors_lift.eigenvalues, 0.0)
    rep = dimension_bounds(0.1, tensors_lift.eigenvalues[0], 0.15, 0.2, M=stats["M"], f_sup_H=stats["f_sup_H"],
                           trace=tr)
    assert rep.case_II_bound >= rep.first_negative_q
    assert len(rep.q_table) == 4 and rep.C_hat_source.startswith("default")


@settings(max_examples=20, deadline=None)
@given(xi=arrays(np.float64, 16, elements=st.floats(-10, 10, allow_nan=False)))
def test_zero_base_tangent_property(tensors_zero, xi):
    cfg = SolverConfig(0.1, 5e-3)
    out = propagate(np.zeros(16), xi, 0.0, 0.05, cfg, tensors_zero)
    np.testing.assert_allclose(out, xi * np.exp(-0.1 * tensors_zero.eigenvalues * 0.05), rtol=1e-12, atol=1e-300)
