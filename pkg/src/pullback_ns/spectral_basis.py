"""Discrete Stokes eigenbasis on the unit square.

Fields live on the ``n x n`` interior nodes of a uniform grid with spacing
``h = 1/(n+1)``; arrays are indexed ``field[iy, ix]`` so that the x direction
is the fast (last) axis.  Boundary nodes carry zero for every basis field.

The Stokes eigenproblem is solved for the stream function ``chi`` with
clamped boundary conditions::

    K chi = lam M chi

where ``K`` is the 13-point biharmonic stencil (ghost reflection for the
normal derivative) and ``M = Dx^T Dx + Dy^T Dy`` is the energy of the
centered discrete curl.  Velocities ``w = (Dy chi, -Dx chi)`` are therefore
exactly divergence free under the centered divergence, and M-orthonormal
stream functions give velocity fields that are orthonormal in the grid-sum
L2 inner product.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import __version__
from .errors import EigensolverError, GridMismatchError

log = logging.getLogger(__name__)

DENSE_MAX_N = 64
CACHE_MAGIC = b"PBNSBAS\x00"
CACHE_FORMAT = 1
_HEADER = struct.Struct("<8sIiid16s8s32s")


@dataclass(frozen=True)
class DomainGrid:
    n_interior: int

    def __post_init__(self):
        if int(self.n_interior) != self.n_interior or self.n_interior < 8:
            raise ValueError(f"n_interior must be an integer >= 8, got {self.n_interior}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def area(self) -> float:
        return 1.0

    @property
    def perimeter(self) -> float:
        return 4.0

    @property
    def shape(self):
        return (self.n_interior, self.n_interior)

    def interior_coords(self):
        """Meshgrid ``(X, Y)`` of interior node coordinates, shape ``(n, n)``."""
        s = np.arange(1, self.n_interior + 1) * self.h
        return np.meshgrid(s, s, indexing="xy")

    def full_coords(self, pad: int = 0):
        """Coordinates including boundary nodes and ``pad`` ghost layers."""
        s = np.arange(-pad, self.n_interior + 2 + pad) * self.h
        return np.meshgrid(s, s, indexing="xy")

    def inner(self, u, v) -> float:
        """Grid-sum L2 inner product of two interior fields (any leading component axes)."""
        return float(np.sum(u * v) * self.h**2)


def _second_difference(n, h):
    e = np.ones(n)
    return sp.diags([e[:-1], -2.0 * e, e[:-1]], [-1, 0, 1]) / h**2


def _first_difference(n, h):
    e = np.ones(n - 1)
    return sp.diags([-0.5 * e, 0.5 * e], [-1, 1]) / h


@dataclass(frozen=True)
class DifferenceOperators:
    """Sparse difference matrices acting on raveled interior fields (zero Dirichlet data)."""

    dx: sp.csr_matrix
    dy: sp.csr_matrix
    laplacian: sp.csr_matrix
    biharmonic: sp.csr_matrix
    curl_mass: sp.csr_matrix


def difference_operators(grid: DomainGrid) -> DifferenceOperators:
    n, h = grid.n_interior, grid.h
    eye = sp.identity(n, format="csr")
    d2 = _second_difference(n, h)
    d1 = _first_difference(n, h)
    lap = (sp.kron(eye, d2) + sp.kron(d2, eye)).tocsr()
    dx = sp.kron(eye, d1).tocsr()
    dy = sp.kron(d1, eye).tocsr()
    # ghost reflection chi_{-1} = chi_{1} adds 2/h^4 per adjacent clamped side
    sides = np.zeros((n, n))
    sides[0, :] += 1
    sides[-1, :] += 1
    sides[:, 0] += 1
    sides[:, -1] += 1
    bih = (lap @ lap + sp.diags(2.0 * sides.ravel() / h**4)).tocsr()
    mass = (dx.T @ dx + dy.T @ dy).tocsr()
    return DifferenceOperators(dx=dx, dy=dy, laplacian=lap, biharmonic=bih, curl_mass=mass)


def curl(grid: DomainGrid, chi):
    """Discrete velocity ``(d chi/dy, -d chi/dx)`` of interior stream function(s).

    ``chi`` has shape ``(..., n, n)``; the result has shape ``(..., 2, n, n)``.
    """
    chi = np.asarray(chi, dtype=float)
    pad = [(0, 0)] * (chi.ndim - 2) + [(1, 1), (1, 1)]
    c = np.pad(chi, pad)
    h = grid.h
    u = (c[..., 2:, 1:-1] - c[..., :-2, 1:-1]) / (2 * h)
    v = -(c[..., 1:-1, 2:] - c[..., 1:-1, :-2]) / (2 * h)
    return np.stack([u, v], axis=-3)


def gradient(grid: DomainGrid, f):
    """Centered gradient ``(d/dx, d/dy)`` at interior nodes of a zero-trace interior field.

    ``f`` has shape ``(..., n, n)``; result ``(..., 2, n, n)``.
    """
    f = np.asarray(f, dtype=float)
    pad = [(0, 0)] * (f.ndim - 2) + [(1, 1), (1, 1)]
    g = np.pad(f, pad)
    h = grid.h
    fx = (g[..., 1:-1, 2:] - g[..., 1:-1, :-2]) / (2 * h)
    fy = (g[..., 2:, 1:-1] - g[..., :-2, 1:-1]) / (2 * h)
    return np.stack([fx, fy], axis=-3)


def divergence(grid: DomainGrid, vel):
    """Centered divergence of a zero-trace interior vector field ``(..., 2, n, n)``."""
    g = gradient(grid, vel)  # (..., 2 comp, 2 dir, n, n)
    return g[..., 0, 0, :, :] + g[..., 1, 1, :, :]


def build_dirichlet_laplacian_eigenbasis(grid: DomainGrid, m: int):
    """Lowest ``m`` eigenpairs of the 5-point Dirichlet Laplacian.

    Returns a list of ``(eigenvalue, field)`` with fields L2-normalized on the
    grid.  Serves as a validation harness for the eigensolver path, since the
    continuum spectrum ``(p^2 + q^2) pi^2`` is known.
    """
    n = grid.n_interior
    if not 1 <= m <= n * n:
        raise ValueError(f"m must be in [1, {n * n}], got {m}")
    A = -difference_operators(grid).laplacian
    if n <= DENSE_MAX_N:
        try:
            vals, vecs = la.eigh(A.toarray(), subset_by_index=[0, m - 1])
        except la.LinAlgError as exc:
            raise EigensolverError(f"dense Dirichlet eigensolve failed: {exc}") from exc
    else:
        vals, vecs = _shift_invert(A, None, m)
    vecs = vecs / (np.sqrt(np.sum(vecs**2, axis=0)) * grid.h)
    return [(float(vals[j]), vecs[:, j].reshape(n, n)) for j in range(m)]


def _shift_invert(K, M, m):
    maxiter = 20 * K.shape[0]
    try:
        vals, vecs = spla.eigsh(K.tocsc(), k=m, M=None if M is None else M.tocsc(),
                                sigma=0.0, which="LM", maxiter=maxiter)
    except spla.ArpackNoConvergence as exc:
        raise EigensolverError("shift-invert Lanczos did not converge", iterations=maxiter) from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


@dataclass(frozen=True, eq=False)
class StokesBasis:
    grid: DomainGrid
    eigenvalues: np.ndarray
    stream_functions: np.ndarray  # (m, n, n)
    method: str = "dense"
    velocities: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lam = np.array(self.eigenvalues, dtype=float)
        chi = np.array(self.stream_functions, dtype=float)
        vel = curl(self.grid, chi)
        for arr in (lam, chi, vel):
            arr.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "stream_functions", chi)
        object.__setattr__(self, "velocities", vel)

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    @property
    def mass_weights(self) -> float:
        """Uniform grid-sum quadrature weight ``h^2`` (trapezoid with zero boundary values)."""
        return self.grid.h**2

    @cached_property
    def basis_id(self) -> str:
        """Content hash identifying this basis (grid, eigenvalues and fields)."""
        hsh = hashlib.sha256()
        hsh.update(struct.pack("<ii", self.grid.n_interior, self.m))
        hsh.update(self.eigenvalues.tobytes())
        hsh.update(self.stream_functions.tobytes())
        return hsh.hexdigest()[:16]

    def gram(self):
        W = self.velocities.reshape(self.m, -1)
        return (W @ W.T) * self.grid.h**2

    def stiffness_gram(self):
        """V inner products ``((w_j, w_k))`` in the discrete weak form ``h^2 chi_j^T K chi_k``."""
        K = difference_operators(self.grid).biharmonic
        X = self.stream_functions.reshape(self.m, -1)
        return (X @ (K @ X.T)) * self.grid.h**2

    def synthesize(self, a):
        """Velocity field ``sum_j a_j w_j`` for coefficient vector(s) ``a`` of shape ``(..., m)``."""
        return np.tensordot(np.asarray(a, dtype=float), self.velocities, axes=([-1], [0]))


def _check_grid(basis: StokesBasis, field_shape):
    if tuple(field_shape[-3:]) != (2,) + basis.grid.shape:
        raise GridMismatchError(
            f"field of shape {tuple(field_shape)} does not live on a grid with n={basis.grid.n_interior}")


def project_field(basis: StokesBasis, field):
    """Modal coefficients ``a_j = (field, w_j)`` under the grid inner product."""
    field = np.asarray(field, dtype=float)
    _check_grid(basis, field.shape)
    flat = field.reshape(field.shape[:-3] + (-1,))
    return flat @ basis.velocities.reshape(basis.m, -1).T * basis.grid.h**2


def fractional_norm(basis: StokesBasis, a, sigma: float) -> float:
    """``|A^{sigma/2} v| = sqrt(sum_j lam_j^sigma a_j^2)`` for ``sigma`` in [0, 1]."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != basis.m:
        raise ValueError(f"coefficient length {a.shape[-1]} != basis size {basis.m}")
    weights = basis.eigenvalues**sigma
    out = np.sqrt(np.sum(weights * a**2, axis=-1))
    return float(out) if out.ndim == 0 else out


def h_norm(basis, a):
    return fractional_norm(basis, a, 0.0)


def v_norm(basis, a):
    return fractional_norm(basis, a, 1.0)


def solve_stokes_eigenproblem(grid: DomainGrid, m: int, method: str = "auto"):
    """Raw eigensolve: returns ``(eigenvalues, stream_functions, method_used)``."""
    n = grid.n_interior
    if not 1 <= m <= n * n:
        raise ValueError(f"m={m} exceeds the {n * n} available discrete Stokes modes")
    ops = difference_operators(grid)
    K, M = ops.biharmonic, ops.curl_mass
    if method == "auto":
        method = "dense" if n <= DENSE_MAX_N else "lanczos"
    if method == "dense":
        Kd = K.toarray()
        try:
            la.cholesky(Kd)
        except la.LinAlgError as exc:
            raise EigensolverError("discrete biharmonic operator is not positive definite") from exc
        # M may be singular for odd n; pose the pencil with K as the definite matrix
        try:
            mu, vecs = la.eigh(M.toarray(), Kd, subset_by_index=[n * n - m, n * n - 1])
        except la.LinAlgError as exc:
            raise EigensolverError(f"dense generalized eigensolve failed: {exc}") from exc
        if np.any(mu <= 0):
            raise EigensolverError("requested modes reach the null space of the curl mass matrix")
        vals = 1.0 / mu[::-1]
        vecs = vecs[:, ::-1]
    elif method == "lanczos":
        vals, vecs = _shift_invert(K, M, m)
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    if np.any(vals <= 0) or np.any(np.diff(vals) < -1e-9 * vals[-1]):
        raise EigensolverError("eigenvalues not positive and ascending")
    vecs = _orthonormalize(grid, vecs, M)
    for j in range(m):
        col = vecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            vecs[:, j] = -col
    chi = vecs.T.reshape(m, n, n)
    return vals, chi, method


def _orthonormalize(grid, vecs, M):
    # curl-energy Gram, then a Cholesky sweep so velocity Gram = I to rounding
    for _ in range(2):
        G = vecs.T @ (M @ vecs) * grid.h**2
        L = np.linalg.cholesky(G)
        vecs = la.solve_triangular(L, vecs.T, lower=True).T
    return vecs


def default_cache_dir() -> Path:
    import os

    env = os.environ.get("PULLBACK_NS_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "pullback_ns"


def cache_path(cache_dir, n: int, m: int) -> Path:
    return Path(cache_dir) / f"stokes_n{n}_m{m}.bin"


def write_basis_cache(path: Path, basis: StokesBasis) -> str:
    payload = basis.eigenvalues.astype("<f8").tobytes() + basis.stream_functions.astype("<f8").tobytes()
    digest = hashlib.sha256(payload).digest()
    header = _HEADER.pack(CACHE_MAGIC, CACHE_FORMAT, basis.grid.n_interior, basis.m, basis.grid.h,
                          __version__.encode()[:16], basis.method.encode()[:8], digest)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)
    return digest.hex()


class CacheError(Exception):
    pass


def read_cache_header(path: Path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheError("truncated header")
    magic, fmt, n, m, h, version, method, digest = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise CacheError("bad magic")
    return {"format": fmt, "n_interior": n, "m": m, "h": h,
            "tool_version": version.rstrip(b"\x00").decode(),
            "method": method.rstrip(b"\x00").decode(), "sha256": digest.hex(),
            "size": len(raw)}


def read_basis_cache(path: Path, grid: DomainGrid, m: int) -> StokesBasis:
    """Load a cached basis; any inconsistency raises :class:`CacheError`."""
    raw = Path(path).read_bytes()
    hdr = read_cache_header(path)
    n = grid.n_interior
    if hdr["format"] != CACHE_FORMAT or hdr["tool_version"] != __version__:
        raise CacheError("format or tool version mismatch")
    if hdr["n_interior"] != n or hdr["m"] != m or hdr["h"] != grid.h:
        raise CacheError("grid or mode-count mismatch")
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * (m + m * n * n):
        raise CacheError("payload size mismatch")
    if hashlib.sha256(payload).hexdigest() != hdr["sha256"]:
        raise CacheError("payload hash mismatch")
    data = np.frombuffer(payload, dtype="<f8")
    return StokesBasis(grid=grid, eigenvalues=data[:m].copy(),
                       stream_functions=data[m:].reshape(m, n, n).copy(), method=hdr["method"])


def build_stokes_basis(grid: DomainGrid, m: int, cache_dir=None, use_cache: bool = True,
                       method: str = "auto") -> StokesBasis:
    """Discrete Stokes eigenbasis with ``m`` modes, cached on disk keyed by ``(n, m)``.

    A corrupt or mismatched cache file is rebuilt, never reused.
    """
    n = grid.n_interior
    if not 1 <= m <= n * n:
        raise ValueError(f"m={m} exceeds the {n * n} available discrete Stokes modes")
    path = cache_path(cache_dir or default_cache_dir(), n, m) if use_cache else None
    if path is not None and path.exists():
        try:
            return read_basis_cache(path, grid, m)
        except CacheError as exc:
            log.warning("rebuilding basis cache %s: %s", path, exc)
    vals, chi, used = solve_stokes_eigenproblem(grid, m, method=method)
    basis = StokesBasis(grid=grid, eigenvalues=vals, stream_functions=chi, method=used)
    if path is not None:
        write_basis_cache(path, basis)
    return basis


def richardson_lowest_eigenvalue(ns=(32, 48, 64), method: str = "auto") -> dict:
    """Mesh-refinement oracle for the lowest Stokes eigenvalue.

    Fits ``lam(h) = lam* + c h^p`` exactly through three grids (``p`` found by
    root bracketing) and returns ``lam*``, ``p`` and the raw values.
    """
    from scipy.optimize import brentq

    if len(ns) != 3:
        raise ValueError("need exactly three grids")
    lam = np.array([solve_stokes_eigenproblem(DomainGrid(n), 1, method=method)[0][0] for n in ns])
    hs = 1.0 / (np.asarray(ns, dtype=float) + 1.0)

    def coef(p):
        return (lam[0] - lam[1]) / (hs[0] ** p - hs[1] ** p)

    def gap(p):
        c = coef(p)
        return (lam[1] - c * hs[1] ** p) - (lam[2] - c * hs[2] ** p)

    p = brentq(gap, 0.25, 6.0)
    return {"lam_star": float(lam[2] - coef(p) * hs[2] ** p), "order": float(p),
            "grids": list(ns), "values": lam.tolist()}
