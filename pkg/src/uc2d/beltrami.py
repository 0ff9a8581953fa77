"""From  -div(Ahat grad v + v Bhat) = 0  to the complex first-order system

    f_zbar = mu f_z + nu conj(f_z) + alpha f + beta conj(f),    f = v + i vt,

where the stream function vt solves  grad vt = J(Ahat grad v + v Bhat).

Derivation used for the coefficients. Write g = grad v and
Ahat g = (P, Q). Then f_x = v_x - i(Q + v b2) and f_y = v_y + i(P + v b1), so
f_z and f_zbar are real-linear in g plus a multiple of v:

    f_z    = Phi g + v e,   e = (b1 - i b2) / 2
    f_zbar = Psi g + v h,   h = -(b1 + i b2) / 2

with real 2x2 maps Phi, Psi (acting on g, valued in C ~ R^2). The real-linear
map T = Psi Phi^-1 splits uniquely as T w = mu w + nu conj(w). The value vt
never appears, so the zeroth-order term must be a multiple of
v = (f + conj f)/2, which forces alpha = beta = (h - mu e - nu conj(e)) / 2.

The similarity factor s is built on a periodic FFT cell of side 4R around the
disk: s = P[h] with h solving h - q S h = gamma by a Neumann series, where P is
the Cauchy transform, S the Beurling transform, q = mu + nu conj(f_z)/f_z and
gamma = alpha + beta conj(f)/f. Then g = exp(-s) f solves g_zbar = q g_z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .fields import J
from .mesh import ElementField, FemFunction, Mesh, Points, compose, linf_norm, locate_many, quadrature, sample
from .operators import stiffness

__all__ = [
    "BeltramiData",
    "StreamFunction",
    "NotCurlFreeError",
    "SimilarityFailure",
    "FFTGrid",
    "SimilarityResult",
    "stream_function",
    "dilatations",
    "lower_order_coefficients",
    "wirtinger",
    "beltrami_data",
    "beltrami_residual",
    "cauchy_transform",
    "beurling_transform",
    "dbar_spectral",
    "dbar_fd",
    "similarity_factor",
    "stream_bound_ratio",
]


class NotCurlFreeError(RuntimeError):
    def __init__(self, message: str, defect: float):
        super().__init__(message)
        self.defect = defect


class SimilarityFailure(RuntimeError):
    def __init__(self, message: str, divided: float, original: float):
        super().__init__(message)
        self.divided = divided
        self.original = original


# ---------------------------------------------------------------------------
# stream function


@dataclass(frozen=True, eq=False)
class StreamFunction(FemFunction):
    """Stream function with its least-squares defect ||grad vt - target||_{L^2}."""

    defect: float = 0.0
    target_norm: float = 0.0

    @property
    def relative_defect(self) -> float:
        return self.defect / self.target_norm if self.target_norm > 0 else 0.0


def _flux_target(v: FemFunction, A_hat: Any, B_hat: Any, pts: Points) -> np.ndarray:
    A = np.asarray(sample(A_hat, pts)).reshape(-1, 2, 2)
    B = np.asarray(sample(B_hat, pts)).reshape(-1, 2)
    gv = v.gradient().sample(pts)
    vv = v.sample(pts)
    flux = np.einsum("nij,nj->ni", A, gv) + vv[:, None] * B
    return flux @ J.T


def stream_function(v: FemFunction, A_hat: Any, B_hat: Any, x0: Optional[Sequence[float]] = None,
                    max_relative_defect: float = 0.1) -> StreamFunction:
    """Least-squares P1 solution of grad vt = J(Ahat grad v + v Bhat), normalised by vt(x0) = 0."""
    mesh = v.mesh
    x0 = mesh.center if x0 is None else np.asarray(x0, dtype=float)
    q = quadrature(mesh)
    T = _flux_target(v, A_hat, B_hat, q.points)
    nt = mesh.n_triangles
    w = q.weights.reshape(nt, 3)
    Tq = T.reshape(nt, 3, 2)
    # b_i = int T . grad phi_i
    local = np.einsum("tq,tqd,tid->ti", w, Tq, mesh.basis_gradients)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.triangles.ravel(), local.ravel())
    S = stiffness(mesh).tocsr()
    pin = mesh.nearest_vertex(x0)
    keep = np.setdiff1d(np.arange(mesh.n_vertices), [pin])
    x = spla.splu(S[keep][:, keep].tocsc()).solve(b[keep])
    vals = np.zeros(mesh.n_vertices)
    vals[keep] = x
    vt = FemFunction(mesh, vals)
    shift = float(vt.value_at(x0))
    vals = vals - shift
    vt = FemFunction(mesh, vals)
    gvt = vt.gradient().values  # (nt, 2)
    defect = float(np.sqrt(np.sum(w * np.sum((gvt[:, None, :] - Tq) ** 2, axis=2))))
    tnorm = float(np.sqrt(np.sum(w * np.sum(Tq ** 2, axis=2))))
    # roundoff floor for targets that vanish identically (v constant, Bhat = 0)
    floor = 1e-10 * float(np.max(np.abs(v.values))) * math.sqrt(float(mesh.areas.sum())) / mesh.radius
    if defect > max_relative_defect * tnorm and defect > floor:
        raise NotCurlFreeError(f"flux is not curl-free: least-squares defect {defect:.3e} exceeds "
                               f"{max_relative_defect} x {tnorm:.3e}; v is probably not a solution", defect)
    return StreamFunction(mesh, vals, defect=defect, target_norm=tnorm)


# ---------------------------------------------------------------------------
# pointwise coefficients


def _phi_psi(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a11, a12, a21, a22 = A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1]
    Phi = 0.5 * np.stack([np.stack([1 + a11, a12], -1), np.stack([-a21, -(1 + a22)], -1)], -2)
    Psi = 0.5 * np.stack([np.stack([1 - a11, -a12], -1), np.stack([-a21, 1 - a22], -1)], -2)
    return Phi, Psi


def dilatations(A_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Complex dilatations (mu, nu) of a stack of elliptic 2x2 matrices (n, 2, 2)."""
    A = np.asarray(A_hat, dtype=float)
    single = A.ndim == 2
    A = A.reshape(-1, 2, 2)
    Phi, Psi = _phi_psi(A)
    det = Phi[:, 0, 0] * Phi[:, 1, 1] - Phi[:, 0, 1] * Phi[:, 1, 0]
    assert np.all(np.abs(det) > 0), "degenerate dilatation denominator (A not elliptic)"
    inv = np.stack([np.stack([Phi[:, 1, 1], -Phi[:, 0, 1]], -1),
                    np.stack([-Phi[:, 1, 0], Phi[:, 0, 0]], -1)], -2) / det[:, None, None]
    T = Psi @ inv
    mu = 0.5 * ((T[:, 0, 0] + T[:, 1, 1]) + 1j * (T[:, 1, 0] - T[:, 0, 1]))
    nu = 0.5 * ((T[:, 0, 0] - T[:, 1, 1]) + 1j * (T[:, 1, 0] + T[:, 0, 1]))
    if single:
        return mu[0], nu[0]
    return mu, nu


def lower_order_coefficients(A_hat: np.ndarray, B_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(alpha, beta) for the zeroth-order term; alpha == beta identically."""
    A = np.asarray(A_hat, dtype=float).reshape(-1, 2, 2)
    B = np.asarray(B_hat, dtype=float).reshape(-1, 2)
    mu, nu = dilatations(A)
    mu = np.atleast_1d(mu)
    nu = np.atleast_1d(nu)
    e = 0.5 * (B[:, 0] - 1j * B[:, 1])
    h = -0.5 * (B[:, 0] + 1j * B[:, 1])
    alpha = 0.5 * (h - mu * e - nu * np.conj(e))
    beta = alpha.copy()
    assert np.array_equal(alpha, beta)
    return alpha, beta


def wirtinger(g: FemFunction) -> Tuple[ElementField, ElementField]:
    """(g_z, g_zbar) from the elementwise P1 gradient."""
    grad = g.gradient().values  # (nt, 2) complex
    gx, gy = grad[..., 0], grad[..., 1]
    return ElementField(g.mesh, 0.5 * (gx - 1j * gy)), ElementField(g.mesh, 0.5 * (gx + 1j * gy))


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BeltramiData:
    """f = v + i vt with pointwise-evaluable mu, nu, alpha, beta fields."""

    f: FemFunction
    mu: Any
    nu: Any
    alpha: Any
    beta: Any
    k_bound: float
    s: Optional[FemFunction] = None
    x0: Optional[np.ndarray] = None

    @property
    def mesh(self) -> Mesh:
        return self.f.mesh


class _PointwiseCoefficients:
    """mu, nu, alpha, beta derived from (Ahat, Bhat) with a one-entry cache."""

    def __init__(self, A_hat: Any, B_hat: Any):
        self.A_hat = A_hat
        self.B_hat = B_hat
        self._key = None
        self._val = None

    def values(self, pts: Points):
        if self._key is not pts:
            A = np.asarray(sample(self.A_hat, pts)).reshape(-1, 2, 2)
            B = np.asarray(sample(self.B_hat, pts)).reshape(-1, 2)
            mu, nu = dilatations(A)
            alpha, beta = lower_order_coefficients(A, B)
            self._key, self._val = pts, (np.atleast_1d(mu), np.atleast_1d(nu), alpha, beta)
        return self._val


class _Part:
    def __init__(self, src: _PointwiseCoefficients, k: int):
        self.src = src
        self.k = k

    def sample(self, pts: Points) -> np.ndarray:
        return self.src.values(pts)[self.k]

    def __call__(self, xy):
        return self.sample(Points(np.atleast_2d(xy)))


def beltrami_data(v: FemFunction, vt: FemFunction, A_hat: Any, B_hat: Any,
                  x0: Optional[Sequence[float]] = None) -> BeltramiData:
    src = _PointwiseCoefficients(A_hat, B_hat)
    mu, nu, alpha, beta = (_Part(src, k) for k in range(4))
    pts = quadrature(v.mesh).points
    mv, nv, _, _ = src.values(pts)
    k_bound = float(np.max(np.abs(mv) + np.abs(nv)))
    f = FemFunction(v.mesh, v.values + 1j * vt.values)
    return BeltramiData(f, mu, nu, alpha, beta, k_bound,
                        x0=np.asarray(x0 if x0 is not None else v.mesh.center, dtype=float))


def beltrami_residual(data: BeltramiData) -> float:
    """||f_zbar - mu f_z - nu conj(f_z) - alpha f - beta conj(f)|| / (||f_zbar|| + ||f||), L^2 over the disk."""
    mesh = data.mesh
    q = quadrature(mesh)
    pts = q.points
    fz, fzb = (e.sample(pts) for e in wirtinger(data.f))
    f = data.f.sample(pts)
    mu, nu, al, be = (np.asarray(sample(c, pts)) for c in (data.mu, data.nu, data.alpha, data.beta))
    r = fzb - mu * fz - nu * np.conj(fz) - al * f - be * np.conj(f)
    num = np.sqrt(np.sum(q.weights * np.abs(r) ** 2))
    den = np.sqrt(np.sum(q.weights * np.abs(fzb) ** 2)) + np.sqrt(np.sum(q.weights * np.abs(f) ** 2))
    return float(num / den) if den > 0 else float(num)


def stream_bound_ratio(v: FemFunction, vt: FemFunction, r: float, rho: Optional[float] = None) -> float:
    """||vt||_{L^inf(B_rho)} / ||v||_{L^inf(B_r)} on concentric disks (rho = r/2 by default)."""
    rho = 0.5 * r if rho is None else rho
    c = v.mesh.center
    den = linf_norm(v, (c, r))
    return linf_norm(vt, (c, rho)) / den if den > 0 else float("inf")


# ---------------------------------------------------------------------------
# FFT cell: Cauchy and Beurling transforms


@dataclass(frozen=True)
class FFTGrid:
    """Periodic n x n grid on the square cell of side ``side`` centred at ``center``."""

    center: Tuple[float, float]
    side: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two, got {self.n}")

    @classmethod
    def around_disk(cls, center: Sequence[float], R: float, n: int = 128) -> "FFTGrid":
        return cls((float(center[0]), float(center[1])), 4.0 * R, n)

    @property
    def dx(self) -> float:
        return self.side / self.n

    @property
    def axis(self) -> Tuple[np.ndarray, np.ndarray]:
        s = -0.5 * self.side + self.dx * np.arange(self.n)
        return self.center[0] + s, self.center[1] + s

    @property
    def xy(self) -> np.ndarray:
        x, y = self.axis
        X, Y = np.meshgrid(x, y, indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def z(self) -> np.ndarray:
        """Complex coordinate relative to the cell centre, shape (n, n) indexed [y, x]."""
        x, y = self.axis
        X, Y = np.meshgrid(x - self.center[0], y - self.center[1], indexing="xy")
        return X + 1j * Y

    def wavenumbers(self) -> Tuple[np.ndarray, np.ndarray]:
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)
        KX, KY = np.meshgrid(k, k, indexing="xy")
        return KX, KY

    def symbols(self) -> Tuple[np.ndarray, np.ndarray]:
        """Fourier symbols of d/dz and d/dzbar."""
        KX, KY = self.wavenumbers()
        return 0.5 * (1j * KX + KY), 0.5 * (1j * KX - KY)

    def interpolator(self, values: np.ndarray) -> RegularGridInterpolator:
        x, y = self.axis
        return RegularGridInterpolator((y, x), values, method="linear", bounds_error=False, fill_value=None)


def cauchy_transform(g: np.ndarray, grid: FFTGrid) -> np.ndarray:
    """P[g] with dbar P[g] = g: spectral inverse of dbar on g - mean(g), plus mean(g) conj(z)."""
    g = np.asarray(g, dtype=complex).reshape(grid.n, grid.n)
    mean = g.mean()
    _, dbar = grid.symbols()
    G = np.fft.fft2(g - mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        P = np.where(dbar != 0, G / dbar, 0.0)
    return np.fft.ifft2(P) + mean * np.conj(grid.z)


def beurling_transform(g: np.ndarray, grid: FFTGrid) -> np.ndarray:
    """S[g] = d/dz P[g] (the mean contributes nothing since d/dz conj(z) = 0)."""
    g = np.asarray(g, dtype=complex).reshape(grid.n, grid.n)
    dz, dbar = grid.symbols()
    G = np.fft.fft2(g - g.mean())
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.where(dbar != 0, dz / dbar, 0.0)
    return np.fft.ifft2(S * G)


def dbar_spectral(F: np.ndarray, grid: FFTGrid) -> np.ndarray:
    """Spectral d/dzbar of a periodic grid field."""
    _, dbar = grid.symbols()
    return np.fft.ifft2(dbar * np.fft.fft2(np.asarray(F, dtype=complex)))


def dbar_fd(F: np.ndarray, grid: FFTGrid) -> np.ndarray:
    """Central-difference d/dzbar on interior grid nodes (edges set to nan)."""
    F = np.asarray(F, dtype=complex)
    out = np.full(F.shape, np.nan + 0j)
    h = grid.dx
    fx = (F[1:-1, 2:] - F[1:-1, :-2]) / (2 * h)
    fy = (F[2:, 1:-1] - F[:-2, 1:-1]) / (2 * h)
    out[1:-1, 1:-1] = 0.5 * (fx + 1j * fy)
    return out


@dataclass(frozen=True, eq=False)
class SimilarityResult:
    s: FemFunction
    grid: FFTGrid
    s_grid: np.ndarray
    h_grid: np.ndarray  # dbar s on the grid
    divided_residual: float
    input_residual: float
    neumann_iterations: int
    holder_exponent: float
    holder_constant: float

    def report(self) -> Dict[str, Any]:
        return {
            "divided_residual": self.divided_residual,
            "input_residual": self.input_residual,
            "neumann_iterations": self.neumann_iterations,
            "holder_exponent": self.holder_exponent,
            "holder_constant": self.holder_constant,
            "s_max": float(np.max(np.abs(self.s.values))),
        }


def _holder_report(s_grid: np.ndarray, inside: np.ndarray, grid: FFTGrid) -> Tuple[float, float]:
    steps = [1, 2, 4, 8, 16]
    deltas, osc = [], []
    for k in steps:
        if k >= grid.n // 4:
            break
        for axis in (0, 1):
            a = np.roll(s_grid, -k, axis=axis)
            both = inside & np.roll(inside, -k, axis=axis)
            if both.any():
                deltas.append(k * grid.dx)
                osc.append(float(np.max(np.abs(a - s_grid)[both])))
    deltas, osc = np.array(deltas), np.array(osc)
    good = osc > 0
    if good.sum() < 2:
        return 1.0, 0.0
    slope, icpt = np.polyfit(np.log(deltas[good]), np.log(osc[good]), 1)
    return float(slope), float(np.exp(icpt))


_EXTENSION = 0.5


def _taper(t: np.ndarray) -> np.ndarray:
    """C^2 step: 1 for t <= 0, 0 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t ** 2)


def similarity_factor(data: BeltramiData, zero_threshold: Optional[float] = None, grid_n: Optional[int] = None,
                      tol: float = 1e-12, max_iter: int = 500, failure_ratio: float = 10.0,
                      absolute_floor: float = 1e-6) -> SimilarityResult:
    """Factor f = exp(s) g with g solving the dilatation-only equation g_zbar = q g_z."""
    mesh = data.mesh
    f = data.f
    fmax = float(np.max(np.abs(f.values)))
    thr = zero_threshold if zero_threshold is not None else 1e-6 * fmax
    if not thr > 0:
        thr = np.finfo(float).tiny
    R = mesh.radius
    if grid_n is None:
        # grid spacing no coarser than half the mesh spacing
        grid_n = 1 << int(math.ceil(math.log2(4 * mesh.resolution)))
    grid = FFTGrid.around_disk(mesh.center, R, grid_n)
    xy = grid.xy
    # gamma and q only matter inside B_R: extend them continuously by radial
    # projection and taper to zero by 1.5 R, which keeps s smooth across the circle
    rel = xy - mesh.center
    r = np.hypot(rel[:, 0], rel[:, 1])
    # project just inside the inscribed polygon, so location never falls back to brute force
    proj = np.where(r > R, (R - 0.5 * mesh.h) / np.maximum(r, np.finfo(float).tiny), 1.0)
    src = mesh.center + rel * proj[:, None]
    taper = _taper((r - R) / (_EXTENSION * R))
    support = taper > 0
    el, bary = locate_many(mesh, src[support], extrapolate=True)
    pin = Points(src[support], mesh, el, bary)
    inside = (r <= R).reshape(grid.n, grid.n)

    fz_el, _ = wirtinger(f)
    fv = f.at(pin.elements, pin.bary)
    fz = fz_el.values[pin.elements]
    mu, nu, al, be = (np.asarray(sample(c, pin)) for c in (data.mu, data.nu, data.alpha, data.beta))
    big = np.abs(fv) > thr
    quot = np.ones_like(fv)
    quot[big] = np.conj(fv[big]) / fv[big]
    gamma_in = al + be * quot
    qz = mu.astype(complex).copy()
    bigz = np.abs(fz) > thr
    qz[bigz] = mu[bigz] + nu[bigz] * np.conj(fz[bigz]) / fz[bigz]

    n = grid.n
    gamma = np.zeros(n * n, dtype=complex)
    gamma[support] = gamma_in * taper[support]
    qfield = np.zeros(n * n, dtype=complex)
    qfield[support] = qz * taper[support]
    gamma = gamma.reshape(n, n)
    qfield = qfield.reshape(n, n)

    h = gamma.copy()
    it = 0
    gnorm = np.linalg.norm(gamma)
    if gnorm > 0:
        for it in range(1, max_iter + 1):
            new = gamma + qfield * beurling_transform(h, grid)
            delta = np.linalg.norm(new - h)
            h = new
            if delta <= tol * gnorm:
                break
    s_grid = cauchy_transform(h, grid)
    sz_grid = beurling_transform(h, grid)

    s_vals = grid.interpolator(s_grid)(mesh.vertices[:, ::-1])
    s_fem = FemFunction(mesh, s_vals)

    input_res = beltrami_residual(data)
    divided = _divided_residual(data, s_fem, thr)
    holder_exp, holder_c = _holder_report(s_grid, inside, grid)
    result = SimilarityResult(s_fem, grid, s_grid, h, divided, input_res, it, holder_exp, holder_c)
    if divided > failure_ratio * input_res and divided > absolute_floor:
        raise SimilarityFailure(f"divided field residual {divided:.3e} exceeds {failure_ratio} x input "
                                f"residual {input_res:.3e}", divided, input_res)
    return result


def _divided_residual(data: BeltramiData, s: FemFunction, thr: float) -> float:
    """||g_zbar - q g_z|| / (||g_zbar|| + ||g||) for g = exp(-s) f, L^2 over the disk."""
    mesh = data.mesh
    q = quadrature(mesh)
    pts = q.points
    g = FemFunction(mesh, np.exp(-s.values) * data.f.values)
    gz, gzb = (e.sample(pts) for e in wirtinger(g))
    fz, _ = (e.sample(pts) for e in wirtinger(data.f))
    mu, nu = (np.asarray(sample(c, pts)) for c in (data.mu, data.nu))
    qz = mu.astype(complex).copy()
    big = np.abs(fz) > thr
    qz[big] = mu[big] + nu[big] * np.conj(fz[big]) / fz[big]
    gv = g.sample(pts)
    r = gzb - qz * gz
    num = np.sqrt(np.sum(q.weights * np.abs(r) ** 2))
    den = np.sqrt(np.sum(q.weights * np.abs(gzb) ** 2)) + np.sqrt(np.sum(q.weights * np.abs(gv) ** 2))
    return float(num / den) if den > 0 else float(num)
