"""Coefficient data (A, B, C, d) of the operator

    L u = -div(A grad u + u B) + C . grad u + d u

together with estimates of the structural constants K (ellipticity) and
kappa (integrability of the lower-order terms), a small built-in corpus and a
plain-text raster format for sampled coefficients.

Every field is "field-like" in the sense of :func:`uc2d.mesh.sample`: a
callable of coordinates, a FemFunction/ElementField, or a composed field.
Shapes at n points: A -> (n, 2, 2), B and C -> (n, 2), d -> (n,).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .mesh import Mesh, Points, build_disk_mesh, lp_norm, quadrature, sample

__all__ = [
    "CoefficientSet",
    "NonEllipticError",
    "check_ellipticity",
    "ellipticity_profile",
    "lower_order_norms",
    "builtin",
    "BUILTIN_NAMES",
    "RasterField",
    "read_raster",
    "write_raster",
    "coefficients_from_raster",
    "write_coefficient_raster",
    "J",
]

J = np.array([[0.0, -1.0], [1.0, 0.0]])


class NonEllipticError(ValueError):
    """Raised when the symmetric part of A (or of its inverse) is not positive definite."""

    def __init__(self, message: str, point: Optional[np.ndarray] = None, eigenvalue: Optional[float] = None):
        super().__init__(message)
        self.point = point
        self.eigenvalue = eigenvalue


def _zero_vec(x: np.ndarray) -> np.ndarray:
    return np.zeros((len(x), 2))


def _zero_scalar(x: np.ndarray) -> np.ndarray:
    return np.zeros(len(x))


def _identity_matrix(x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()


@dataclass(frozen=True)
class CoefficientSet:
    """The tuple (A, B, C, d) with exponent q and optional declared constants."""

    A: Any = _identity_matrix
    B: Any = _zero_vec
    C: Any = _zero_vec
    d: Any = _zero_scalar
    q: float = 4.0
    declared_K: Optional[float] = None
    declared_kappa: Optional[float] = None
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.q > 2:
            raise ValueError(f"q must exceed 2, got {self.q}")

    def evaluate(self, pts: Points) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        n = len(pts)
        A = np.asarray(sample(self.A, pts), dtype=float).reshape(n, 2, 2)
        B = np.asarray(sample(self.B, pts), dtype=float).reshape(n, 2)
        C = np.asarray(sample(self.C, pts), dtype=float).reshape(n, 2)
        d = np.asarray(sample(self.d, pts), dtype=float).reshape(n)
        return A, B, C, d

    def with_(self, **changes: Any) -> "CoefficientSet":
        return replace(self, **changes)

    def without_drift(self) -> "CoefficientSet":
        """Same set with the divergence-side vector B replaced by 0."""
        return replace(self, B=_zero_vec, name=f"{self.name}[B=0]")

    def transposed(self) -> "CoefficientSet":
        """The formal adjoint data (A^T, C, B, d)."""
        At = _Transposed(self.A)
        return replace(self, A=At, B=self.C, C=self.B, name=f"{self.name}^T")


class _Transposed:
    def __init__(self, A: Any):
        self.A = A

    def sample(self, pts: Points) -> np.ndarray:
        return np.swapaxes(np.asarray(sample(self.A, pts)).reshape(len(pts), 2, 2), 1, 2)

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        return self.sample(Points(np.atleast_2d(xy)))


# ---------------------------------------------------------------------------
# structural constants


def _as_points(samples: Union[Points, np.ndarray, Mesh]) -> Points:
    if isinstance(samples, Points):
        return samples
    if isinstance(samples, Mesh):
        return quadrature(samples).points
    return Points(np.atleast_2d(np.asarray(samples, dtype=float)))


def ellipticity_profile(A_values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Minimum eigenvalues of sym(A) and sym(A^-1) for a stack of 2x2 matrices."""
    A_values = np.asarray(A_values, dtype=float).reshape(-1, 2, 2)
    sym = 0.5 * (A_values + np.swapaxes(A_values, 1, 2))
    lam_a = np.linalg.eigvalsh(sym)[:, 0]
    det = A_values[:, 0, 0] * A_values[:, 1, 1] - A_values[:, 0, 1] * A_values[:, 1, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.stack([
            np.stack([A_values[:, 1, 1], -A_values[:, 0, 1]], axis=-1),
            np.stack([-A_values[:, 1, 0], A_values[:, 0, 0]], axis=-1),
        ], axis=1) / det[:, None, None]
    sym_inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
    lam_inv = np.full(len(A_values), -np.inf)
    good = np.isfinite(sym_inv).all(axis=(1, 2))
    lam_inv[good] = np.linalg.eigvalsh(sym_inv[good])[:, 0]
    return lam_a, lam_inv


def check_ellipticity(A: Any, samples: Union[Points, np.ndarray, Mesh]) -> float:
    """Smallest K >= 1 with A xi.xi >= |xi|^2/K and A^-1 xi.xi >= |xi|^2/K at every sample."""
    pts = _as_points(samples)
    if len(pts) == 0:
        raise ValueError("empty sample set")
    vals = np.asarray(sample(A, pts), dtype=float).reshape(len(pts), 2, 2)
    lam_a, lam_inv = ellipticity_profile(vals)
    worst = np.minimum(lam_a, lam_inv)
    i = int(np.argmin(worst))
    if not worst[i] > 0:
        raise NonEllipticError(
            f"A is not elliptic at x={pts.xy[i].tolist()} (min eigenvalue {worst[i]:.3e})",
            point=pts.xy[i], eigenvalue=float(worst[i]))
    return float(max(1.0, 1.0 / worst[i]))


def lower_order_norms(coeffs: CoefficientSet, disk: Tuple[Sequence[float], float],
                      mesh: Optional[Mesh] = None, resolution: int = 64) -> float:
    """Quadrature estimate of ||B||_q + ||C||_q + ||d||_{q/2} over the disk."""
    c, r = disk
    if mesh is None:
        mesh = build_disk_mesh(c, r, resolution)
        sub = None
    else:
        sub = None if (np.allclose(mesh.center, c) and math.isclose(mesh.radius, r)) else (c, r)
    q = coeffs.q
    return (lp_norm(mesh, coeffs.B, q, sub) + lp_norm(mesh, coeffs.C, q, sub)
            + lp_norm(mesh, coeffs.d, q / 2.0, sub))


def validate_declared(coeffs: CoefficientSet, K_est: float, kappa_est: float) -> Dict[str, Any]:
    """Compare declared constants against estimates (estimate <= 1.01 * declared)."""
    out: Dict[str, Any] = {}
    if coeffs.declared_K is not None:
        out["K_ok"] = bool(K_est <= 1.01 * coeffs.declared_K)
    if coeffs.declared_kappa is not None:
        out["kappa_ok"] = bool(kappa_est <= 1.01 * coeffs.declared_kappa)
    return out


# ---------------------------------------------------------------------------
# built-in corpus


def _rot(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _identity(p: Mapping[str, Any]) -> Dict[str, Any]:
    return {}


def _anisotropic(p: Mapping[str, Any]) -> Dict[str, Any]:
    # diag(a, 1/a) rotated by an angle that drifts across the domain
    a = float(p.get("a", 2.0))
    omega = float(p.get("omega", 1.0))
    if not a >= 1:
        raise ValueError("anisotropic: a must be >= 1")
    D = np.diag([a, 1.0 / a])

    def A(x):
        R = _rot(omega * x[:, 0] + 0.5 * omega * x[:, 1])
        return R @ D @ np.swapaxes(R, 1, 2)

    return {"A": A, "declared_K": a}


def _lower_terms(lo: float):
    def B(x):
        return lo * np.column_stack([np.cos(x[:, 1]), 0.5 + np.sin(x[:, 0])])

    def C(x):
        return lo * np.column_stack([x[:, 1] - 0.5, np.cos(2.0 * x[:, 0])])

    def d(x):
        return lo * (1.0 + x[:, 0] ** 2)

    return B, C, d


def _rotation_nonsym(p: Mapping[str, Any]) -> Dict[str, Any]:
    t = float(p.get("t", 1.0))
    lo = float(p.get("lower", 0.5))
    M = np.eye(2) + t * J

    def A(x):
        return np.broadcast_to(M, (len(x), 2, 2)).copy()

    B, C, d = _lower_terms(lo)
    return {"A": A, "B": B, "C": C, "d": d, "declared_K": 1.0 + t * t}


def _mollified_checkerboard(p: Mapping[str, Any]) -> Dict[str, Any]:
    contrast = float(p.get("contrast", 4.0))
    cells = float(p.get("cells", 4.0))
    width = float(p.get("width", 0.25))
    skew = float(p.get("skew", 0.5))
    lo = float(p.get("lower", 0.3))
    k = math.pi * cells / 2.0
    half = 0.5 * math.log(contrast)

    def a(x):
        s = np.tanh(np.sin(k * x[:, 0]) * np.sin(k * x[:, 1]) / width)
        return np.exp(half * s)

    def A(x):
        return a(x)[:, None, None] * (np.eye(2) + skew * J)

    B, C, d = _lower_terms(lo)
    return {"A": A, "B": B, "C": C, "d": d, "declared_K": contrast ** 0.5 * (1.0 + skew * skew)}


def _constant_d(p: Mapping[str, Any]) -> Dict[str, Any]:
    delta = float(p.get("delta", 2.0))

    def d(x):
        return np.full(len(x), delta)

    return {"d": d}


def _full_lower_order(p: Mapping[str, Any]) -> Dict[str, Any]:
    s = float(p.get("scale", 1.0))

    def A(x):
        out = np.empty((len(x), 2, 2))
        out[:, 0, 0] = 1.5 + 0.3 * np.sin(2.0 * x[:, 0])
        out[:, 0, 1] = 0.4 + 0.2 * x[:, 1]
        out[:, 1, 0] = -0.2
        out[:, 1, 1] = 1.0 + 0.2 * np.cos(2.0 * x[:, 1])
        return out

    def B(x):
        return s * np.column_stack([0.8 * np.cos(x[:, 1]) + 0.2, 0.5 * np.sin(2.0 * x[:, 0]) + 0.3])

    def C(x):
        return s * np.column_stack([-0.4 + 0.3 * x[:, 1], 0.6 * np.cos(x[:, 0])])

    def d(x):
        return s * (0.5 + 0.5 * x[:, 0] ** 2 + 0.2 * x[:, 1])

    return {"A": A, "B": B, "C": C, "d": d}


def _singular_lower_order(p: Mapping[str, Any]) -> Dict[str, Any]:
    q = float(p.get("q", 4.0))
    eps = float(p.get("eps", 0.25))
    amp = float(p.get("amp", 0.2))
    x0 = np.asarray(p.get("x0", (0.1, -0.05)), dtype=float)
    if not 0 < eps < 2.0 / q:
        raise ValueError(f"singular_lower_order: need 0 < eps < 2/q = {2.0 / q} so that B lies in L^q")

    def prof(x):
        r = np.linalg.norm(x - x0, axis=1)
        with np.errstate(divide="ignore"):
            return np.where(r > 0, r, np.finfo(float).tiny) ** (-eps)

    def A(x):
        return np.broadcast_to(np.eye(2) + 0.3 * J, (len(x), 2, 2)).copy()

    def B(x):
        return amp * prof(x)[:, None] * np.array([1.0, 0.5])

    def C(x):
        return amp * prof(x)[:, None] * np.array([-0.5, 1.0])

    def d(x):
        return 0.3 + 0.1 * x[:, 0]

    return {"A": A, "B": B, "C": C, "d": d, "q": q}


_BUILTINS = {
    "identity": _identity,
    "anisotropic": _anisotropic,
    "rotation_nonsym": _rotation_nonsym,
    "mollified_checkerboard": _mollified_checkerboard,
    "constant_d": _constant_d,
    "full_lower_order": _full_lower_order,
    "singular_lower_order": _singular_lower_order,
}
BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str, parameters: Optional[Mapping[str, Any]] = None) -> CoefficientSet:
    """Built-in coefficient sets.

    identity
        A = I, B = C = 0, d = 0.
    anisotropic {a=2, omega=1}
        symmetric A = R diag(a, 1/a) R^T with a slowly rotating frame; K = a.
    rotation_nonsym {t=1, lower=0.5}
        A = I + tJ (non-symmetric, K = 1 + t^2) with smooth lower-order terms
        of size ``lower``.
    mollified_checkerboard {contrast=4, cells=4, width=0.25, skew=0.5, lower=0.3}
        A = a(x)(I + skew J) with a(x) a tanh-mollified checkerboard taking
        values in [contrast^-1/2, contrast^1/2]; ``width`` sets the transition.
    constant_d {delta=2}
        A = I, B = C = 0, d = delta.
    full_lower_order {scale=1}
        smooth non-symmetric A and all of B, C, d non-zero; ``scale``
        multiplies B, C and d.
    singular_lower_order {q=4, eps=0.25, amp=0.2, x0=(0.1, -0.05)}
        B, C ~ amp |x - x0|^-eps, in L^q but unbounded.
    """
    parameters = dict(parameters or {})
    if name not in _BUILTINS:
        raise ValueError(f"unknown coefficient set {name!r}; valid names: {', '.join(BUILTIN_NAMES)}")
    parts = _BUILTINS[name](parameters)
    q = float(parts.pop("q", parameters.get("q", 4.0)))
    return CoefficientSet(q=q, name=name, params=parameters, **parts)


# ---------------------------------------------------------------------------
# raster files
#
# Format (plain text, '#' starts a comment line):
#     uc2d-raster 1
#     <nx> <ny> <ncomp>
#     <xmin> <xmax> <ymin> <ymax>
#     then nx*ny lines, row-major (y outer, x inner), each with ncomp floats.
# Coefficient rasters use ncomp = 9: a11 a12 a21 a22 b1 b2 c1 c2 d.

_MAGIC = "uc2d-raster 1"


@dataclass(frozen=True, eq=False)
class RasterField:
    """Bilinear interpolant of gridded data; points outside the box are clamped."""

    x: np.ndarray
    y: np.ndarray
    data: np.ndarray  # (ny, nx, ncomp)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_interp", RegularGridInterpolator(
            (self.y, self.x), self.data, method="linear", bounds_error=False, fill_value=None))

    @property
    def bbox(self) -> Tuple[float, float, float, float]:
        return (float(self.x[0]), float(self.x[-1]), float(self.y[0]), float(self.y[-1]))

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        px = np.clip(xy[:, 0], self.x[0], self.x[-1])
        py = np.clip(xy[:, 1], self.y[0], self.y[-1])
        return self._interp(np.column_stack([py, px]))

    def component(self, sl) -> "_Component":
        return _Component(self, sl)


class _Component:
    def __init__(self, raster: RasterField, sl):
        self.raster = raster
        self.sl = sl

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        return self.raster(xy)[:, self.sl]


def write_raster(path: Union[str, Path], x: np.ndarray, y: np.ndarray, data: np.ndarray,
                 comment: Optional[str] = None) -> None:
    data = np.asarray(data, dtype=float)
    ny, nx = len(y), len(x)
    data = data.reshape(ny, nx, -1)
    lines = [_MAGIC]
    if comment:
        lines += [f"# {line}" for line in comment.splitlines()]
    lines.append(f"{nx} {ny} {data.shape[2]}")
    lines.append(" ".join(repr(float(v)) for v in (x[0], x[-1], y[0], y[-1])))
    for row in data.reshape(-1, data.shape[2]):
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_raster(path: Union[str, Path]) -> RasterField:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a uc2d raster file")
    try:
        nx, ny, nc = (int(t) for t in lines[1].split())
        xmin, xmax, ymin, ymax = (float(t) for t in lines[2].split())
        vals = np.array([[float(t) for t in ln.split()] for ln in lines[3:]])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed raster ({exc})") from exc
    if vals.shape != (nx * ny, nc):
        raise ValueError(f"{path}: expected {nx * ny} rows of {nc} values, got shape {vals.shape}")
    if nx < 2 or ny < 2:
        raise ValueError(f"{path}: raster needs at least 2x2 nodes")
    x = np.linspace(xmin, xmax, nx)
    y = np.linspace(ymin, ymax, ny)
    return RasterField(x, y, vals.reshape(ny, nx, nc))


def coefficients_from_raster(path: Union[str, Path], q: float = 4.0, name: Optional[str] = None) -> CoefficientSet:
    r = read_raster(path)
    if r.data.shape[2] != 9:
        raise ValueError(f"{path}: coefficient rasters carry 9 components, found {r.data.shape[2]}")

    def A(xy):
        return r(xy)[:, 0:4].reshape(-1, 2, 2)

    return CoefficientSet(A=A, B=r.component(slice(4, 6)), C=r.component(slice(6, 8)),
                          d=r.component(8), q=q, name=name or f"raster:{Path(path).name}",
                          params={"path": str(path)})


def write_coefficient_raster(path: Union[str, Path], coeffs: CoefficientSet,
                             bbox: Tuple[float, float, float, float], shape: Tuple[int, int]) -> None:
    """Sample a coefficient set on a grid and write it as a 9-component raster."""
    nx, ny = shape
    x = np.linspace(bbox[0], bbox[1], nx)
    y = np.linspace(bbox[2], bbox[3], ny)
    X, Y = np.meshgrid(x, y, indexing="xy")
    pts = Points(np.column_stack([X.ravel(), Y.ravel()]))
    A, B, C, d = coeffs.evaluate(pts)
    data = np.column_stack([A.reshape(-1, 4), B, C, d])
    write_raster(path, x, y, data, comment=f"coefficients {coeffs.name}: a11 a12 a21 a22 b1 b2 c1 c2 d")
