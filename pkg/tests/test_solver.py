import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pullback_ns.background_flow import BoundaryData, build_background_flow
from pullback_ns.errors import DivergenceError
from pullback_ns.forcing import ForcingSpec
from pullback_ns.operators import build_tensors
from pullback_ns.solver import (
    ModalState, SolverConfig, composition_discrepancy, energy_identity_residual, evolve, integrator_tolerance,
    run_manifest, separation_probe, step, trajectory, write_json, write_trajectory_csv,
)
from pullback_ns.spectral_basis import build_stokes_basis


@pytest.fixture(scope="module")
def tensors_m1(grid32):
    b = build_stokes_basis(grid32, 1)
    return build_tensors(b, build_background_flow(grid32, BoundaryData.zero(), 0.15), 1.0)


def smooth_state(tensors, amp=1.0, seed=3):
    rng = np.random.default_rng(seed)
    lam = tensors.eigenvalues
    return amp * rng.standard_normal(tensors.m) * lam[0] / lam


FORCED = ForcingSpec.perturbed(np.r_[1.0, 0.5, np.zeros(14)], 0.5,
                               ForcingSpec.quasiperiodic(np.r_[0.5, 0.3, 0.2, np.zeros(13)],
                                                         np.r_[1.0, math.sqrt(2), math.pi, np.ones(13)]))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(nu=0.0, dt=0.1)
    with pytest.raises(ValueError):
        SolverConfig(nu=1.0, dt=-0.1)
    with pytest.raises(ValueError):
        SolverConfig(nu=1.0, dt=0.1, scheme="rk4")


def test_modal_state_rejects_nonfinite():
    with pytest.raises(DivergenceError):
        ModalState(0.0, [1.0, np.nan])
    s = ModalState(0.0, [1.0, 2.0])
    with pytest.raises(ValueError):
        s.a[0] = 3.0


def test_single_mode_step_is_exact(tensors_m1):
    cfg = SolverConfig(nu=1.0, dt=1e-3)
    out = step(ModalState(0.0, [1.0]), cfg, tensors_m1)
    lam1 = tensors_m1.eigenvalues[0]
    assert out.a[0] == pytest.approx(math.exp(-lam1 * 1e-3), rel=1e-14)
    assert out.t == 1e-3


def test_zero_state_stays_zero(tensors_zero):
    cfg = SolverConfig(nu=0.1, dt=1e-2)
    out = evolve(ModalState(0.0, np.zeros(16)), 1.0, cfg, tensors_zero)
    assert np.all(out.a == 0.0)


def test_identity_axiom_exact(tensors_lift):
    a = smooth_state(tensors_lift)
    s = evolve(ModalState(1.5, a), 1.5, SolverConfig(0.1, 1e-3), tensors_lift, FORCED)
    assert s.t == 1.5 and np.array_equal(s.a, a)


def test_lands_exactly_on_target(tensors_lift):
    s = evolve(ModalState(0.0, smooth_state(tensors_lift)), 0.1234567, SolverConfig(0.1, 1e-2), tensors_lift)
    assert s.t == 0.1234567


def test_backwards_evolution_rejected(tensors_lift):
    with pytest.raises(ValueError):
        evolve(ModalState(1.0, np.zeros(16)), 0.5, SolverConfig(0.1, 1e-2), tensors_lift)


def test_global_second_order_self_refinement(tensors_lift):
    a0 = smooth_state(tensors_lift)
    t = 1.0
    ref = evolve(ModalState(0.0, a0), t, SolverConfig(0.1, 4e-3 / 16), tensors_lift, FORCED).a
    errs = [np.linalg.norm(evolve(ModalState(0.0, a0), t, SolverConfig(0.1, dt), tensors_lift, FORCED).a - ref)
            for dt in (4e-3, 2e-3)]
    assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_small_data_matches_refined_reference(tensors_zero):
    a0 = smooth_state(tensors_zero, amp=0.05)
    f = ForcingSpec.stationary(np.r_[0.1, 0.05, np.zeros(14)])
    ref = evolve(ModalState(0.0, a0), 1.0, SolverConfig(0.1, 1e-3 / 16), tensors_zero, f).a
    out = evolve(ModalState(0.0, a0), 1.0, SolverConfig(0.1, 1e-3), tensors_zero, f).a
    assert np.linalg.norm(out - ref) <= 1e-6


def test_composition_within_tolerance(tensors_lift):
    cfg = SolverConfig(0.1, 2e-3)
    s = ModalState(0.0, smooth_state(tensors_lift))
    tol = integrator_tolerance(s, 1.0, cfg, tensors_lift, FORCED)
    assert composition_discrepancy(s, 0.4111, 1.0, cfg, tensors_lift, FORCED) <= 10 * tol


def test_unforced_decay_bound(tensors_zero):
    cfg = SolverConfig(0.1, 5e-3)
    a0 = smooth_state(tensors_zero, amp=2.0)
    lam1 = tensors_zero.eigenvalues[0]
    for s in trajectory(ModalState(0.0, a0), 2.0, cfg, tensors_zero, every=5):
        scale = max(1.0, np.linalg.norm(a0))
        bound = np.linalg.norm(a0) * math.exp(-cfg.nu * lam1 * s.t) * (1 + 10 * cfg.dt**2 * scale)
        assert np.linalg.norm(s.a) <= bound


def test_energy_residual_zero_and_linear(tensors_zero, tensors_m1):
    cfg = SolverConfig(0.1, 1e-3)
    tr = trajectory(ModalState(0.0, np.zeros(16)), 0.05, cfg, tensors_zero)
    assert energy_identity_residual(tr, cfg, tensors_zero) == 0.0
    res = []
    for dt in (2e-3, 1e-3):
        c = SolverConfig(1.0, dt)
        res.append(energy_identity_residual(trajectory(ModalState(0.0, [1.0]), 0.05, c, tensors_m1), c, tensors_m1))
    assert 3.5 <= res[0] / res[1] <= 4.5


def test_energy_residual_second_order_nonlinear(tensors_lift):
    a0 = smooth_state(tensors_lift)
    res = []
    for dt in (2e-3, 1e-3):
        cfg = SolverConfig(0.1, dt)
        res.append(energy_identity_residual(trajectory(ModalState(0.0, a0), 0.5, cfg, tensors_lift, FORCED),
                                            cfg, tensors_lift, FORCED))
    assert 3.0 <= res[0] / res[1] <= 5.0


def test_energy_residual_needs_three_states(tensors_zero):
    with pytest.raises(ValueError):
        energy_identity_residual([ModalState(0, np.zeros(16))] * 2, SolverConfig(0.1, 1e-3), tensors_zero)


def test_divergence_guard(tensors_zero):
    cfg = SolverConfig(0.1, 1e-3, clip_threshold=10.0)
    with pytest.raises(DivergenceError) as exc:
        evolve(ModalState(0.0, np.full(16, 5.0)), 1.0, cfg, tensors_zero)
    assert exc.value.t > 0


def test_batch_matches_individual(tensors_lift):
    cfg = SolverConfig(0.1, 2e-3)
    A = np.stack([smooth_state(tensors_lift, seed=s) for s in range(3)])
    batch = evolve(ModalState(0.0, A), 0.3, cfg, tensors_lift, FORCED).a
    for p in range(3):
        single = evolve(ModalState(0.0, A[p]), 0.3, cfg, tensors_lift, FORCED).a
        np.testing.assert_allclose(batch[p], single, rtol=1e-13, atol=1e-14)


def test_if_euler_first_order(tensors_lift):
    a0 = smooth_state(tensors_lift)
    ref = evolve(ModalState(0.0, a0), 0.5, SolverConfig(0.1, 1e-4), tensors_lift, FORCED).a
    errs = [np.linalg.norm(evolve(ModalState(0.0, a0), 0.5, SolverConfig(0.1, dt, "if-euler"), tensors_lift,
                                  FORCED).a - ref) for dt in (4e-3, 2e-3)]
    assert 1.6 <= errs[0] / errs[1] <= 2.4


def test_separation_probe_bounded(tensors_lift):
    cfg = SolverConfig(0.1, 2e-3)
    a = smooth_state(tensors_lift, amp=0.3)
    out = separation_probe(a + 1e-6, a, 1.0, cfg, tensors_lift, FORCED)
    assert out["finite"] and np.isfinite(out["fitted_constant"])


def test_trajectory_csv_and_manifest(tmp_path, tensors_zero):
    cfg = SolverConfig(0.1, 1e-2)
    tr = trajectory(ModalState(0.0, smooth_state(tensors_zero)), 0.1, cfg, tensors_zero, every=2)
    p = write_trajectory_csv(tmp_path / "t.csv", tr, tensors_zero.eigenvalues)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t"] + [f"a_{k}" for k in range(1, 17)] + ["|v|", "||v||"]
    assert len(rows) == len(tr) + 1
    assert float(rows[-1][0]) == pytest.approx(0.1)
    man = run_manifest(cfg, tensors_zero, ForcingSpec.zero(16))
    write_json(tmp_path / "m.json", man)
    back = json.loads((tmp_path / "m.json").read_text())
    assert back["tensor_hash"] == tensors_zero.content_hash()
    assert ForcingSpec.from_dict(back["forcing"]) == ForcingSpec.zero(16)


@settings(max_examples=15, deadline=None)
@given(split=st.floats(0.01, 0.99))
def test_composition_property(tensors_lift, split):
    cfg = SolverConfig(0.1, 5e-3)
    s = ModalState(0.0, smooth_state(tensors_lift, amp=0.5))
    tol = integrator_tolerance(s, 0.5, cfg, tensors_lift, FORCED)
    assert composition_discrepancy(s, 0.5 * split, 0.5, cfg, tensors_lift, FORCED) <= 10 * tol
