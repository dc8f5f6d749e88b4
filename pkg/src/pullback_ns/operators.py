"""Galerkin tensors of the convective term and the background-flow couplings.

The discrete trilinear form is the skew-symmetric one,

    b(u, v, w) = 1/2 [ ((u . grad) v, w) + (div(u (x) v), w) ],

with centered differences and grid-sum quadrature.  For zero-trace test
fields this equals ``(b_adv(u,v,w) - b_adv(u,w,v)) / 2`` with the plain
advective form ``b_adv``, which is how the m x m x m tensor is assembled.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .background_flow import BackgroundFlow, background_residuals
from .errors import GridMismatchError
from .spectral_basis import DomainGrid, StokesBasis, gradient


def pad_field(u):
    """Zero-extend interior vector field(s) ``(..., 2, n, n)`` onto the full grid."""
    pad = [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(u, pad)


def _centered(full, h):
    # (..., n+2, n+2) -> d/dx, d/dy at interior nodes
    dx = (full[..., 1:-1, 2:] - full[..., 1:-1, :-2]) / (2 * h)
    dy = (full[..., 2:, 1:-1] - full[..., :-2, 1:-1]) / (2 * h)
    return dx, dy


def convective_skew(grid: DomainGrid, u_full, v_full):
    """Skew-symmetric convection ``(u.grad v + div(u (x) v))/2`` at interior nodes.

    Inputs are full-grid vector fields ``(..., 2, n+2, n+2)`` (boundary values
    included); output is ``(..., 2, n, n)``.
    """
    h = grid.h
    vx, vy = _centered(v_full, h)
    ui = u_full[..., 1:-1, 1:-1]
    adv = ui[..., 0:1, :, :] * vx + ui[..., 1:2, :, :] * vy
    fx, _ = _centered(u_full[..., 0:1, :, :] * v_full, h)
    _, fy = _centered(u_full[..., 1:2, :, :] * v_full, h)
    return 0.5 * (adv + fx + fy)


@dataclass(frozen=True, eq=False)
class GalerkinTensors:
    eigenvalues: np.ndarray
    T: np.ndarray
    C_vpsi: np.ndarray
    C_psiv: np.ndarray
    c_psipsi: np.ndarray
    g_lift: np.ndarray
    nu: float
    basis_id: str
    flow_id: str

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    @property
    def linear_coupling(self):
        """``C_vpsi + C_psiv`` in row form: ``(a @ L)_k = sum_i a_i L[i, k]``."""
        return self.C_vpsi + self.C_psiv

    def content_hash(self) -> str:
        hsh = hashlib.sha256()
        for arr in (self.eigenvalues, self.T, self.C_vpsi, self.C_psiv, self.c_psipsi, self.g_lift):
            hsh.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        hsh.update(repr(float(self.nu)).encode())
        return hsh.hexdigest()

    def save(self, path):
        np.savez(path, eigenvalues=self.eigenvalues, T=self.T, C_vpsi=self.C_vpsi, C_psiv=self.C_psiv,
                 c_psipsi=self.c_psipsi, g_lift=self.g_lift, nu=self.nu,
                 basis_id=self.basis_id, flow_id=self.flow_id, content_hash=self.content_hash())

    @classmethod
    def load(cls, path, basis_id=None, flow_id=None):
        """Load from ``.npz``; returns None on any mismatch so callers rebuild."""
        try:
            with np.load(path) as z:
                obj = cls(eigenvalues=z["eigenvalues"], T=z["T"], C_vpsi=z["C_vpsi"], C_psiv=z["C_psiv"],
                          c_psipsi=z["c_psipsi"], g_lift=z["g_lift"], nu=float(z["nu"]),
                          basis_id=str(z["basis_id"]), flow_id=str(z["flow_id"]))
                stored = str(z["content_hash"])
        except (OSError, KeyError, ValueError):
            return None
        if stored != obj.content_hash():
            return None
        if (basis_id and basis_id != obj.basis_id) or (flow_id and flow_id != obj.flow_id):
            return None
        return obj


def assemble_trilinear_tensor(basis: StokesBasis, workers: int = 1):
    """``T[i, j, k] = b(w_i, w_j, w_k)``, antisymmetrized in ``(j, k)`` after assembly."""
    m, h2 = basis.m, basis.grid.h**2
    W = basis.velocities.reshape(m, 2, -1)
    G = gradient(basis.grid, basis.velocities).reshape(m, 2, 2, -1)  # (j, comp, dir, x)
    Wflat = W.reshape(m, -1)

    def slab(i):
        adv = np.einsum("cx,jdcx->jdx", W[i], G)
        return adv.reshape(m, -1) @ Wflat.T * h2

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            raw = np.stack(list(pool.map(slab, range(m))))
    else:
        raw = np.stack([slab(i) for i in range(m)])
    return 0.5 * (raw - raw.transpose(0, 2, 1))


def _check(basis, flow):
    if flow.grid != basis.grid:
        raise GridMismatchError(
            f"flow grid n={flow.grid.n_interior} differs from basis grid n={basis.grid.n_interior}")


def assemble_background_couplings(basis: StokesBasis, flow: BackgroundFlow, nu: float) -> dict:
    """Coupling arrays ``C_vpsi``, ``C_psiv``, ``c_psipsi`` and lift forcing ``g_lift``."""
    _check(basis, flow)
    grid, m = basis.grid, basis.m
    h2 = grid.h**2
    Wflat = basis.velocities.reshape(m, -1)
    wf = pad_field(basis.velocities)
    psi = np.broadcast_to(flow.psi, wf.shape)
    C_vpsi = convective_skew(grid, wf, psi).reshape(m, -1) @ Wflat.T * h2
    C_psiv = convective_skew(grid, psi, wf).reshape(m, -1) @ Wflat.T * h2
    C_psiv = 0.5 * (C_psiv - C_psiv.T)
    c_pp = Wflat @ convective_skew(grid, flow.psi, flow.psi).ravel() * h2
    g_lift = background_residuals(flow, basis, nu)["laplacian_projection"]
    return {"C_vpsi": C_vpsi, "C_psiv": C_psiv, "c_psipsi": c_pp, "g_lift": g_lift}


def build_tensors(basis: StokesBasis, flow: BackgroundFlow, nu: float, workers: int = 1,
                  cache_dir=None) -> GalerkinTensors:
    """Assemble (or load from ``cache_dir``) the full set of Galerkin tensors."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"tensors_{basis.basis_id}_{flow.flow_id}_nu{nu:.12g}.npz"
        if path.exists():
            cached = GalerkinTensors.load(path, basis.basis_id, flow.flow_id)
            if cached is not None:
                return cached
    T = assemble_trilinear_tensor(basis, workers=workers)
    c = assemble_background_couplings(basis, flow, nu)
    tens = GalerkinTensors(eigenvalues=np.array(basis.eigenvalues), T=T, nu=float(nu),
                           basis_id=basis.basis_id, flow_id=flow.flow_id, **c)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tens.save(path)
    return tens


def apply_nonlinearity(tensors: GalerkinTensors, a):
    """``N_k(a) = sum_ij T_ijk a_i a_j + sum_i (C_vpsi + C_psiv)[i,k] a_i + c_psipsi[k]``.

    Accepts a single vector ``(m,)`` or a batch ``(P, m)``.
    """
    a = np.asarray(a, dtype=float)
    m = tensors.m
    quad = (a[..., :, None] * a[..., None, :]).reshape(a.shape[:-1] + (m * m,)) @ tensors.T.reshape(m * m, m)
    return quad + a @ tensors.linear_coupling + tensors.c_psipsi


def quadratic_part(tensors: GalerkinTensors, a):
    a = np.asarray(a, dtype=float)
    m = tensors.m
    return (a[..., :, None] * a[..., None, :]).reshape(a.shape[:-1] + (m * m,)) @ tensors.T.reshape(m * m, m)


def jacobian_rows(tensors: GalerkinTensors, a):
    """Row-form Jacobian ``J`` of ``N`` at ``a``: ``dN(a)[U] = U @ J``."""
    a = np.asarray(a, dtype=float)
    return (np.einsum("ijk,j->ik", tensors.T, a) + np.einsum("ijk,i->jk", tensors.T, a)
            + tensors.linear_coupling)


def trilinear(tensors: GalerkinTensors, u, v, w) -> float:
    """Modal ``b(u, v, w) = sum T_ijk u_i v_j w_k``."""
    return float(np.einsum("ijk,i,j,k->", tensors.T, u, v, w))


def ladyzhenskaya_probe(tensors: GalerkinTensors, samples: int = 200, seed: int = 0) -> float:
    """Largest observed ``|b(u, v, u)| / (|u| ||u|| ||v||)`` over random modal pairs."""
    rng = np.random.default_rng(seed)
    lam = tensors.eigenvalues
    best = 0.0
    for _ in range(samples):
        u = rng.standard_normal(tensors.m) / lam ** 0.5
        v = rng.standard_normal(tensors.m) / lam ** 0.5
        num = abs(trilinear(tensors, u, v, u))
        den = np.linalg.norm(u) * np.sqrt(np.sum(lam * u**2)) * np.sqrt(np.sum(lam * v**2))
        best = max(best, num / den)
    return best
