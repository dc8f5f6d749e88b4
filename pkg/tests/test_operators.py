import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid

from pullback_ns.background_flow import BoundaryData, build_background_flow
from pullback_ns.errors import GridMismatchError
from pullback_ns.operators import (
    GalerkinTensors, apply_nonlinearity, assemble_background_couplings, assemble_trilinear_tensor,
    build_tensors, convective_skew, jacobian_rows, ladyzhenskaya_probe, pad_field, quadratic_part,
)
from pullback_ns.spectral_basis import DomainGrid, build_stokes_basis, project_field


def skew_quadrature(grid, u, v, w):
    """Independent b(u, v, w): numpy gradients and 2-D trapezoid on full-grid fields."""
    h = grid.h

    def adv(p, q, r):
        s = 0.0
        for c in range(2):
            gy, gx = np.gradient(q[c], h)
            s = s + (p[0] * gx + p[1] * gy) * r[c]
        return trapezoid(trapezoid(s, dx=h), dx=h)

    return 0.5 * (adv(u, v, w) - adv(u, w, v))


def test_trilinear_antisymmetry(tensors_zero):
    T = tensors_zero.T
    assert np.max(np.abs(T + T.transpose(0, 2, 1))) <= 1e-10
    idx = np.arange(T.shape[1])
    assert np.all(T[:, idx, idx] == 0.0)


def test_single_mode_tensor_vanishes(grid32):
    b = build_stokes_basis(grid32, 1)
    assert assemble_trilinear_tensor(b)[0, 0, 0] == 0.0


def test_tensor_spot_checks_against_quadrature(basis16, tensors_zero):
    T = tensors_zero.T
    W = pad_field(basis16.velocities)
    g = basis16.grid
    scale = np.max(np.abs(T))
    # b(w1, w1, w2) vanishes by the mirror symmetry of the square: compare absolutely
    assert abs(T[0, 0, 1] - skew_quadrature(g, W[0], W[0], W[1])) <= 1e-6 * scale
    order = np.argsort(-np.abs(T).ravel())[:6]
    for flat in order:
        i, j, k = np.unravel_index(flat, T.shape)
        ref = skew_quadrature(g, W[i], W[j], W[k])
        assert abs(T[i, j, k] - ref) <= 1e-6 * abs(ref)


def test_energy_neutrality_random_states(tensors_lift, rng):
    for _ in range(100):
        a = rng.standard_normal(tensors_lift.m)
        assert abs(quadratic_part(tensors_lift, a) @ a) <= 1e-10
        assert abs(a @ tensors_lift.C_psiv @ a) <= 1e-10


def test_zero_lift_couplings_vanish(tensors_zero):
    for name in ("C_vpsi", "C_psiv", "c_psipsi", "g_lift"):
        assert np.all(getattr(tensors_zero, name) == 0.0)
    assert np.all(apply_nonlinearity(tensors_zero, np.zeros(tensors_zero.m)) == 0.0)


def test_coupling_diagonal_and_scaling(basis16, grid32):
    bd = BoundaryData.smooth(0.3)
    c1 = assemble_background_couplings(basis16, build_background_flow(grid32, bd, 0.15), 0.1)
    c2 = assemble_background_couplings(basis16, build_background_flow(grid32, bd.scaled(2.0), 0.15), 0.1)
    assert np.max(np.abs(np.diag(c1["C_psiv"]))) <= 1e-10
    np.testing.assert_allclose(c2["C_vpsi"], 2 * c1["C_vpsi"], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(c2["C_psiv"], 2 * c1["C_psiv"], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(c2["c_psipsi"], 4 * c1["c_psipsi"], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(c2["g_lift"], 2 * c1["g_lift"], rtol=1e-12, atol=1e-14)


def test_nonlinearity_matches_field_space(basis16, flow_lift, tensors_lift):
    g = basis16.grid
    w1 = pad_field(basis16.velocities[0])
    psi = flow_lift.psi
    field = (convective_skew(g, w1, w1) + convective_skew(g, w1, psi) + convective_skew(g, psi, w1)
             + convective_skew(g, psi, psi))
    e1 = np.zeros(basis16.m)
    e1[0] = 1.0
    np.testing.assert_allclose(apply_nonlinearity(tensors_lift, e1), project_field(basis16, field),
                               rtol=0, atol=1e-8)


def test_batch_nonlinearity(tensors_lift, rng):
    A = rng.standard_normal((5, tensors_lift.m))
    batch = apply_nonlinearity(tensors_lift, A)
    for p in range(5):
        np.testing.assert_allclose(batch[p], apply_nonlinearity(tensors_lift, A[p]), rtol=1e-13, atol=1e-13)


def test_jacobian_matches_directional_difference(tensors_lift, rng):
    a = rng.standard_normal(tensors_lift.m)
    u = rng.standard_normal(tensors_lift.m)
    h = 1e-6
    fd = (apply_nonlinearity(tensors_lift, a + h * u) - apply_nonlinearity(tensors_lift, a - h * u)) / (2 * h)
    # N is quadratic, so the central difference is exact up to rounding
    np.testing.assert_allclose(u @ jacobian_rows(tensors_lift, a), fd, rtol=1e-7, atol=1e-7)


def test_parallel_assembly_is_bitwise_identical(basis16):
    np.testing.assert_array_equal(assemble_trilinear_tensor(basis16, workers=1),
                                  assemble_trilinear_tensor(basis16, workers=4))


def test_ladyzhenskaya_probe_stable_under_refinement():
    vals = []
    for n in (16, 32):
        b = build_stokes_basis(DomainGrid(n), 8)
        f = build_background_flow(b.grid, BoundaryData.zero(), 0.3)
        vals.append(ladyzhenskaya_probe(build_tensors(b, f, 1.0)))
    assert all(np.isfinite(vals)) and all(v > 0 for v in vals)
    assert 0.5 <= vals[1] / vals[0] <= 2.0


def test_tensor_cache_roundtrip(tmp_path, basis16, flow_lift):
    t1 = build_tensors(basis16, flow_lift, 0.1, cache_dir=tmp_path)
    files = list(tmp_path.glob("tensors_*.npz"))
    assert len(files) == 1
    t2 = build_tensors(basis16, flow_lift, 0.1, cache_dir=tmp_path)
    assert t2.content_hash() == t1.content_hash()
    assert GalerkinTensors.load(files[0], basis_id="other") is None
    files[0].write_bytes(b"corrupt")
    assert GalerkinTensors.load(files[0]) is None


def test_grid_mismatch(basis16):
    f = build_background_flow(DomainGrid(40), BoundaryData.smooth(), 0.2)
    with pytest.raises(GridMismatchError):
        assemble_background_couplings(basis16, f, 0.1)


@settings(max_examples=50, deadline=None)
@given(a=arrays(np.float64, 16, elements=st.floats(-100, 100, allow_nan=False)))
def test_energy_neutrality_property(tensors_lift, a):
    scale = max(1.0, float(a @ a)) ** 1.5
    assert abs(quadratic_part(tensors_lift, a) @ a) <= 1e-13 * scale * np.max(np.abs(tensors_lift.T))
