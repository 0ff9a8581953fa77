"""Positive multipliers m, w and the reduction of L to a pure divergence operator.

With m solving  -div(A grad m) + C . grad m + d m = 0  (B dropped) and w
solving  Ltilde w = 0  for the transformed coefficients

    Atilde = m A^T,   Btilde = m C - A grad m,   Ctilde = m B,

the operator

    Lhat v = -div(Ahat grad v + v Bhat),
    Ahat = m w A,     Bhat = w A grad m + m w B - m A^T grad w - m w C,

satisfies  Lhat v = w L(m v)  weakly. Each multiplier is built as 1 + z with z
the homogeneous-Dirichlet solution of L z = -L 1 on a disk small enough that
|z| <= 1/2; the disk radius is halved until that holds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .fields import CoefficientSet, NonEllipticError, check_ellipticity, ellipticity_profile, lower_order_norms
from .mesh import FemFunction, Mesh, Points, build_disk_mesh, compose, lp_norm, quadrature, sample
from .operators import RhsData, assemble, solve_dirichlet

__all__ = [
    "ReductionParameters",
    "ReductionResult",
    "Multiplier",
    "RadiusExhaustedError",
    "InvalidMultiplierError",
    "EllipticityFailure",
    "build_multiplier",
    "tilde_coefficients",
    "hat_coefficients",
    "reduce",
    "verify_factorization",
    "hat_set",
    "solve_reduced",
]

log = logging.getLogger(__name__)


class RadiusExhaustedError(RuntimeError):
    def __init__(self, message: str, best_sup_z: float, which: str = "m"):
        super().__init__(message)
        self.best_sup_z = best_sup_z
        self.which = which


class InvalidMultiplierError(ValueError):
    pass


class EllipticityFailure(RuntimeError):
    def __init__(self, message: str, point: np.ndarray, eigenvalue: float):
        super().__init__(message)
        self.point = point
        self.eigenvalue = eigenvalue


@dataclass(frozen=True)
class ReductionParameters:
    """Exponents 2 < t < p < q, target radius and the adaptive-radius controls.

    ``p`` and ``t`` default to 4 and (2 + p)/2 but are pulled below q when q
    is small (midpoints of (2, q) and (2, p)). ``R_target=None`` uses the disk
    radius handed to :func:`reduce`.
    """

    p: Optional[float] = None
    t: Optional[float] = None
    R_target: Optional[float] = None
    max_halvings: int = 8
    bound_tolerance: float = 0.02
    resolution: int = 64

    def resolved(self, q: float) -> "ReductionParameters":
        p = self.p if self.p is not None else (4.0 if q > 4.0 else 0.5 * (2.0 + q))
        t = self.t if self.t is not None else 0.5 * (2.0 + p)
        if not 2.0 < t < p < q:
            raise ValueError(f"need 2 < t < p < q, got t={t}, p={p}, q={q}")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be >= 0")
        return replace(self, p=float(p), t=float(t))


@dataclass(frozen=True, eq=False)
class Multiplier:
    m: FemFunction
    R_used: float
    sup_z: float
    grad_norm: float
    halvings: int
    attempts: Tuple[Tuple[float, float], ...]

    def __iter__(self):
        yield self.m
        yield self.R_used


def build_multiplier(coeffs: CoefficientSet, disk: Tuple[Sequence[float], float],
                     params: ReductionParameters = ReductionParameters(), which: str = "m",
                     grad_exponent: Optional[float] = None) -> Multiplier:
    """Positive solution u = 1 + z of L u = 0 with 1/2 <= u <= 2.

    z solves L z = -div(-B) - d with z = 0 on the boundary; the radius is
    halved while sup|z| > 1/2. The L^p norm of grad u is reported but not
    enforced.
    """
    params = params.resolved(coeffs.q)
    center = np.asarray(disk[0], dtype=float)
    R = float(params.R_target if params.R_target is not None else disk[1])
    if R > disk[1] * (1 + 1e-12):
        raise ValueError(f"R_target={R} exceeds the disk radius {disk[1]}")
    p = grad_exponent if grad_exponent is not None else params.p
    B = coeffs.B
    d = coeffs.d
    attempts = []
    best = math.inf
    for k in range(params.max_halvings + 1):
        mesh = build_disk_mesh(center, R, params.resolution)
        op = assemble(mesh, coeffs, "L")
        z = solve_dirichlet(op, RhsData(F=compose(lambda b: -b, B), f=compose(lambda x: -x, d)))
        sup_z = float(np.max(np.abs(z.values)))
        attempts.append((R, sup_z))
        best = min(best, sup_z)
        if sup_z <= 0.5:
            u = FemFunction(mesh, 1.0 + z.values)
            g = lp_norm(mesh, u.gradient(), p)
            log.debug("multiplier %s accepted at R=%g (sup|z|=%.3g)", which, R, sup_z)
            return Multiplier(u, R, sup_z, g, k, tuple(attempts))
        R *= 0.5
    raise RadiusExhaustedError(
        f"multiplier {which}: sup|z| stayed above 1/2 after {params.max_halvings} halvings "
        f"(best {best:.4g})", best, which)


def _check_bounds(u: FemFunction, tol: float, name: str) -> None:
    lo, hi = float(u.values.min()), float(u.values.max())
    if lo < 0.5 - tol or hi > 2.0 + tol:
        raise InvalidMultiplierError(f"{name} takes values in [{lo:.4g}, {hi:.4g}], outside [1/2, 2]")


def tilde_coefficients(coeffs: CoefficientSet, m: FemFunction, tol: float = 0.02) -> CoefficientSet:
    """(m A^T, m C - A grad m, m B, 0) with grad m the area-averaged vertex gradient."""
    _check_bounds(m, tol, "m")
    gm = m.projected_gradient()
    A_t = compose(lambda mv, A: mv[:, None, None] * np.swapaxes(A, 1, 2), m, coeffs.A)
    B_t = compose(lambda mv, C, A, g: mv[:, None] * C - np.einsum("nij,nj->ni", A, g), m, coeffs.C, coeffs.A, gm)
    C_t = compose(lambda mv, B: mv[:, None] * B, m, coeffs.B)
    return CoefficientSet(A=A_t, B=B_t, C=C_t, d=lambda x: np.zeros(len(x)), q=coeffs.q,
                          name=f"{coeffs.name}~", params=dict(coeffs.params))


def hat_coefficients(coeffs: CoefficientSet, m: FemFunction, w: FemFunction, tol: float = 0.02,
                     check_points: Optional[Points] = None) -> Tuple[Any, Any]:
    """(m w A, w A grad m + m w B - m A^T grad w - m w C), checked against the 1/(4K) bounds."""
    _check_bounds(m, tol, "m")
    _check_bounds(w, tol, "w")
    gm = m.projected_gradient()
    gw = w.projected_gradient()
    A_h = compose(lambda mv, wv, A: (mv * wv)[:, None, None] * A, m, w, coeffs.A)

    def _bhat(mv, wv, A, B, C, g_m, g_w):
        return (wv[:, None] * np.einsum("nij,nj->ni", A, g_m) + (mv * wv)[:, None] * B
                - mv[:, None] * np.einsum("nji,nj->ni", A, g_w) - (mv * wv)[:, None] * C)

    B_h = compose(_bhat, m, w, coeffs.A, coeffs.B, coeffs.C, gm, gw)

    pts = check_points if check_points is not None else quadrature(w.mesh).points
    K = check_ellipticity(coeffs.A, pts)
    vals = np.asarray(sample(A_h, pts)).reshape(-1, 2, 2)
    lam_a, lam_inv = ellipticity_profile(vals)
    worst = np.minimum(lam_a, lam_inv)
    i = int(np.argmin(worst))
    if worst[i] < 1.0 / (4.0 * K) - 1e-6:
        raise EllipticityFailure(
            f"Ahat violates the 1/(4K) bound at x={pts.xy[i].tolist()}: eigenvalue {worst[i]:.4g} "
            f"< {1.0 / (4.0 * K):.4g}", pts.xy[i], float(worst[i]))
    return A_h, B_h


def hat_set(result: "ReductionResult") -> CoefficientSet:
    """The pure-divergence coefficient set (Ahat, Bhat, 0, 0)."""
    zero2 = lambda x: np.zeros((len(x), 2))  # noqa: E731
    return CoefficientSet(A=result.A_hat, B=result.B_hat, C=zero2, d=lambda x: np.zeros(len(x)),
                          q=result.coeffs.q, name=f"{result.coeffs.name}^", params=dict(result.coeffs.params))


@dataclass(frozen=True, eq=False)
class ReductionResult:
    coeffs: CoefficientSet
    params: ReductionParameters
    m: FemFunction
    w: FemFunction
    R1: float
    R2: float
    tilde: CoefficientSet
    A_hat: Any
    B_hat: Any
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def A_tilde(self):
        return self.tilde.A

    @property
    def B_tilde(self):
        return self.tilde.B

    @property
    def C_tilde(self):
        return self.tilde.C

    @property
    def center(self) -> np.ndarray:
        return self.w.mesh.center

    @property
    def mesh(self) -> Mesh:
        """Mesh of B_{R2}, where the reduced operator lives."""
        return self.w.mesh

    def to_dict(self) -> Dict[str, Any]:
        return {
            "coefficients": self.coeffs.name,
            "p": self.params.p,
            "t": self.params.t,
            "R1": self.R1,
            "R2": self.R2,
            "resolution": self.params.resolution,
            **self.diagnostics,
        }


def reduce(coeffs: CoefficientSet, disk: Tuple[Sequence[float], float],
           params: ReductionParameters = ReductionParameters()) -> ReductionResult:
    """Build m on B_{R1}, the tilde operator, w on B_{R2} and the hat coefficients."""
    params = params.resolved(coeffs.q)
    center = np.asarray(disk[0], dtype=float)
    tol = params.bound_tolerance

    mres = build_multiplier(coeffs.without_drift(), disk, params, which="m", grad_exponent=params.p)
    m, R1 = mres.m, mres.R_used
    tilde = tilde_coefficients(coeffs, m, tol)
    wres = build_multiplier(tilde, (center, R1), replace(params, R_target=R1), which="w",
                            grad_exponent=params.t)
    w, R2 = wres.m, wres.R_used
    A_hat, B_hat = hat_coefficients(coeffs, m, w, tol)

    mesh_w = w.mesh
    pts_w = quadrature(mesh_w).points
    pts_m = quadrature(m.mesh).points
    K = check_ellipticity(coeffs.A, pts_m)
    K_tilde = check_ellipticity(tilde.A, pts_m)
    K_hat = check_ellipticity(A_hat, pts_w)
    p, t, q = params.p, params.t, coeffs.q
    kappa = lower_order_norms(coeffs, (center, R1), mesh=m.mesh)
    diag = {
        "m_min": float(m.values.min()),
        "m_max": float(m.values.max()),
        "w_min": float(w.values.min()),
        "w_max": float(w.values.max()),
        "sup_z_m": mres.sup_z,
        "sup_z_w": wres.sup_z,
        "halvings_m": mres.halvings,
        "halvings_w": wres.halvings,
        "grad_m_Lp": mres.grad_norm,
        "grad_w_Lt": wres.grad_norm,
        "K": K,
        "K_tilde": K_tilde,
        "K_hat": K_hat,
        "K_tilde_ok": bool(K_tilde <= 2.0 * K * (1 + 1e-9)),
        "K_hat_ok": bool(K_hat <= 4.0 * K * (1 + 1e-9)),
        "kappa_R1": kappa,
        "tilde_lower_Lp": lp_norm(m.mesh, tilde.B, p) + lp_norm(m.mesh, tilde.C, p),
        "tilde_lower_bound": 2.0 * (math.pi * R1 ** 2) ** (1.0 / p - 1.0 / q) * kappa + K,
        "Bhat_Lt": lp_norm(mesh_w, B_hat, t),
        "Bhat_bound": 2.0 * K * (1.0 + (math.pi * R2 ** 2) ** (1.0 / t - 1.0 / p))
        + 4.0 * (math.pi * R2 ** 2) ** (1.0 / t - 1.0 / q) * kappa,
        "bounds_ok": bool(min(m.values.min(), w.values.min()) >= 0.5 - tol
                          and max(m.values.max(), w.values.max()) <= 2.0 + tol),
    }
    return ReductionResult(coeffs, params, m, w, R1, R2, tilde, A_hat, B_hat, diag)


# ---------------------------------------------------------------------------
# factorisation check


class _TestFunction:
    """Seeded tensor-product polynomial times the cutoff (1 - |x - c|^2 / R^2)."""

    def __init__(self, rng: np.random.Generator, center: np.ndarray, R: float, degree: int = 2):
        self.c = center
        self.R = R
        self.coef = rng.uniform(-1.0, 1.0, (degree + 1, degree + 1))

    def _poly(self, X, Y):
        from numpy.polynomial import polynomial as P

        val = P.polyval2d(X, Y, self.coef)
        dX = P.polyval2d(X, Y, P.polyder(self.coef, axis=0))
        dY = P.polyval2d(X, Y, P.polyder(self.coef, axis=1))
        return val, dX / self.R, dY / self.R

    def value_grad(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X = (xy[:, 0] - self.c[0]) / self.R
        Y = (xy[:, 1] - self.c[1]) / self.R
        p, px, py = self._poly(X, Y)
        cut = 1.0 - X ** 2 - Y ** 2
        cx = -2.0 * X / self.R
        cy = -2.0 * Y / self.R
        val = p * cut
        grad = np.column_stack([px * cut + p * cx, py * cut + p * cy])
        return val, grad


def verify_factorization(coeffs: CoefficientSet, result: ReductionResult, trials: int = 20,
                         seed: int = 0) -> float:
    """Max relative mismatch between the Lhat pairing of (v, psi) and the L pairing of (m v, w psi).

    Left:  int Ahat grad v . grad psi + v Bhat . grad psi
    Right: int A grad u . grad phi + u B . grad phi + phi C . grad u + d u phi,
           u = m v, phi = w psi (P1 gradients of m and w)
    """
    mesh = result.mesh
    q = quadrature(mesh)
    pts = q.points
    wts = q.weights
    A, B, C, d = coeffs.evaluate(pts)
    Ah = np.asarray(sample(result.A_hat, pts)).reshape(-1, 2, 2)
    Bh = np.asarray(sample(result.B_hat, pts)).reshape(-1, 2)
    m = np.asarray(result.m.sample(pts))
    gm = result.m.gradient().sample(pts)
    w = np.asarray(result.w.sample(pts))
    gw = result.w.gradient().sample(pts)
    rng = np.random.default_rng(seed)
    eps = np.finfo(float).eps
    worst = 0.0
    for _ in range(trials):
        v, gv = _TestFunction(rng, mesh.center, result.R2).value_grad(pts.xy)
        psi, gpsi = _TestFunction(rng, mesh.center, result.R2).value_grad(pts.xy)
        left = np.sum(wts * (np.einsum("nij,nj,ni->n", Ah, gv, gpsi) + v * np.einsum("ni,ni->n", Bh, gpsi)))
        u = m * v
        gu = v[:, None] * gm + m[:, None] * gv
        phi = w * psi
        gphi = psi[:, None] * gw + w[:, None] * gpsi
        right = np.sum(wts * (np.einsum("nij,nj,ni->n", A, gu, gphi) + u * np.einsum("ni,ni->n", B, gphi)
                              + phi * np.einsum("ni,ni->n", C, gu) + d * u * phi))
        rel = abs(left - right) / (abs(left) + abs(right) + eps)
        worst = max(worst, rel)
    return float(worst)


def solve_reduced(result: ReductionResult, boundary: Any) -> FemFunction:
    """Solve -div(Ahat grad v + v Bhat) = 0 on B_{R2} with Dirichlet data ``boundary``."""
    mesh = result.mesh
    op = assemble(mesh, hat_set(result), kind="L")
    g = boundary if isinstance(boundary, FemFunction) else FemFunction.interpolate(
        mesh, lambda x: np.broadcast_to(sample(boundary, Points(x)), (len(x),)).astype(float))
    return solve_dirichlet(op, RhsData(boundary_values=g))
