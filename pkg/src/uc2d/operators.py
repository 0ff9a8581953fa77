"""P1 weak forms of L, its principal part L0 and remainder M, plus the local solvers.

The bilinear form assembled for ``kind="L"`` is

    a(u, phi) = int A grad u . grad phi + u B . grad phi + phi C . grad u + d u phi

``L0`` keeps only the A term, ``M`` only the B, C, d terms. ``Ltilde`` and
``Lhat`` are tags for the full form built from transformed coefficient sets.
Dirichlet conditions are imposed by eliminating the boundary rows/columns.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import CoefficientSet, NonEllipticError, ellipticity_profile
from .mesh import ElementField, FemFunction, Mesh, Points, lp_norm, quadrature, sample

__all__ = [
    "WeakOperator",
    "RhsData",
    "SolverFailure",
    "NoContractionError",
    "DegenerateInputError",
    "assemble",
    "stiffness",
    "solve_dirichlet",
    "weak_residual",
    "contraction_iterate",
    "ContractionResult",
    "estimate_contraction_norm",
    "divergence_lift",
    "interior_gradient_ratio",
    "KINDS",
]

log = logging.getLogger(__name__)

KINDS = ("L", "L0", "M", "Ltilde", "Lhat")


class SolverFailure(RuntimeError):
    def __init__(self, message: str, condition_estimate: Optional[float] = None):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class NoContractionError(RuntimeError):
    def __init__(self, message: str, history: Sequence[float]):
        super().__init__(message)
        self.history = list(history)


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class WeakOperator:
    mesh: Mesh
    matrix: sp.csr_matrix
    kind: str
    coeffs: Optional[CoefficientSet] = None

    @property
    def constrained(self) -> np.ndarray:
        return self.mesh.boundary_indices

    @property
    def free(self) -> np.ndarray:
        return self.mesh.interior_indices

    @cached_property
    def interior_matrix(self) -> sp.csc_matrix:
        f = self.free
        return self.matrix[f][:, f].tocsc()

    @cached_property
    def lu(self):
        try:
            return spla.splu(self.interior_matrix)
        except RuntimeError as exc:
            raise SolverFailure(f"singular constrained system ({exc}); the disk may be too large "
                                "for the operator to be coercive", condition_estimate=np.inf) from exc


@dataclass(frozen=True, eq=False)
class RhsData:
    """Right side -div F + f with Dirichlet data (None means homogeneous)."""

    F: Any = None
    f: Any = None
    boundary_values: Optional[FemFunction] = None


def _coefficient_values(mesh: Mesh, coeffs: CoefficientSet):
    q = quadrature(mesh)
    A, B, C, d = coeffs.evaluate(q.points)
    nt = mesh.n_triangles
    return (A.reshape(nt, 3, 2, 2), B.reshape(nt, 3, 2), C.reshape(nt, 3, 2), d.reshape(nt, 3),
            q.points)


def _midedge_bary() -> np.ndarray:
    return np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])


def assemble(mesh: Mesh, coeffs: CoefficientSet, kind: str = "L", check: bool = True) -> WeakOperator:
    """Assemble the sparse matrix with entries a(phi_j, phi_i) restricted to ``kind``."""
    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}; expected one of {KINDS}")
    A, B, C, d, pts = _coefficient_values(mesh, coeffs)
    if check and kind != "M":
        _check(A, pts)
    G = mesh.basis_gradients  # (nt, 3, 2)
    area = mesh.areas
    lam = _midedge_bary()  # (q, k)
    nt = mesh.n_triangles
    local = np.zeros((nt, 3, 3))
    if kind in ("L", "L0", "Ltilde", "Lhat"):
        Abar = A.mean(axis=1)
        # (i, j): grad phi_i . Abar grad phi_j
        local += area[:, None, None] * np.einsum("tid,tde,tje->tij", G, Abar, G)
    if kind in ("L", "M", "Ltilde", "Lhat"):
        w = area[:, None] / 3.0  # per quadrature point
        # phi_j B . grad phi_i
        BG = np.einsum("tqd,tid->tqi", B, G)
        local += np.einsum("tq,tqi,qj->tij", w, BG, lam)
        # phi_i C . grad phi_j
        CG = np.einsum("tqd,tjd->tqj", C, G)
        local += np.einsum("tq,qi,tqj->tij", w, lam, CG)
        local += np.einsum("tq,tq,qi,qj->tij", w, d, lam, lam)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return WeakOperator(mesh, mat, kind, coeffs)


def _check(A: np.ndarray, pts: Points) -> None:
    lam_a, lam_inv = ellipticity_profile(A.reshape(-1, 2, 2))
    worst = np.minimum(lam_a, lam_inv)
    i = int(np.argmin(worst))
    if not worst[i] > 0:
        raise NonEllipticError(f"A is not elliptic at x={pts.xy[i].tolist()} (min eigenvalue {worst[i]:.3e})",
                               point=pts.xy[i], eigenvalue=float(worst[i]))


def stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Laplacian stiffness matrix; defines the discrete W^{1,2} seminorm."""
    return assemble(mesh, CoefficientSet(), "L0", check=False).matrix


def load_vector(mesh: Mesh, F: Any = None, f: Any = None) -> np.ndarray:
    """Entries int F . grad phi_i + f phi_i."""
    n = mesh.n_vertices
    b = np.zeros(n)
    if F is None and f is None:
        return b
    q = quadrature(mesh)
    nt = mesh.n_triangles
    w = (mesh.areas / 3.0)[:, None]
    lam = _midedge_bary()
    local = np.zeros((nt, 3))
    if F is not None:
        Fv = np.asarray(sample(F, q.points), dtype=float).reshape(nt, 3, 2)
        local += np.einsum("tq,tqd,tid->ti", w, Fv, mesh.basis_gradients)
    if f is not None:
        fv = np.asarray(sample(f, q.points), dtype=float).reshape(nt, 3)
        local += np.einsum("tq,tq,qi->ti", w, fv, lam)
    np.add.at(b, mesh.triangles.ravel(), local.ravel())
    return b


def solve_dirichlet(op: WeakOperator, rhs: RhsData, rtol: float = 1e-10) -> FemFunction:
    """Solve a(u, phi) = int F . grad phi + f phi for interior phi, u = g on the boundary."""
    mesh = op.mesh
    b = load_vector(mesh, rhs.F, rhs.f)
    u = np.zeros(mesh.n_vertices)
    if rhs.boundary_values is not None:
        g = rhs.boundary_values.values
        u[op.constrained] = g[op.constrained]
    free = op.free
    rhs_free = b[free] - op.matrix[free][:, op.constrained] @ u[op.constrained]
    lu = op.lu
    x = lu.solve(rhs_free)
    res = np.linalg.norm(op.interior_matrix @ x - rhs_free)
    scale = max(np.linalg.norm(rhs_free), np.finfo(float).tiny)
    if not np.all(np.isfinite(x)) or res > rtol * scale and res > 1e-14:
        cond = _condition_estimate(op)
        raise SolverFailure(f"constrained solve failed: residual {res:.3e} vs load {scale:.3e}, "
                            f"condition estimate {cond:.3e}", condition_estimate=cond)
    u[free] = x
    return FemFunction(mesh, u)


def _condition_estimate(op: WeakOperator) -> float:
    try:
        lu = op.lu
        n = op.interior_matrix.shape[0]
        inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T"))
        return float(spla.onenormest(op.interior_matrix) * spla.onenormest(inv))
    except Exception:  # noqa: BLE001 - diagnostic only
        return float("inf")


def weak_residual(op: WeakOperator, u: FemFunction, rhs: RhsData) -> float:
    """Max-norm of the interior rows of A u - b, relative to the load."""
    b = load_vector(op.mesh, rhs.F, rhs.f)
    r = (op.matrix @ u.values - b)[op.free]
    return float(np.linalg.norm(r) / max(np.linalg.norm(b[op.free]), 1.0))


# ---------------------------------------------------------------------------
# contraction iteration  u + L0^-1 M u = L0^-1(load)


@dataclass
class ContractionResult:
    solution: FemFunction
    history: List[float]
    iterations: int
    converged: bool

    @property
    def factors(self) -> np.ndarray:
        h = np.asarray(self.history)
        with np.errstate(divide="ignore", invalid="ignore"):
            return h[1:] / h[:-1]

    @property
    def contraction_factor(self) -> float:
        """Empirical factor: last finite ratio of consecutive update norms (0 if M vanished)."""
        f = self.factors
        f = f[np.isfinite(f)]
        return float(f[-1]) if len(f) else 0.0

    def __iter__(self):
        # allows ``u, history = contraction_iterate(...)``
        yield self.solution
        yield self.history


def _seminorm(S: sp.spmatrix, free: np.ndarray, x: np.ndarray) -> float:
    Sf = S[free][:, free]
    return float(np.sqrt(max(x @ (Sf @ x), 0.0)))


def contraction_iterate(op_L0: WeakOperator, op_M: WeakOperator, rhs: RhsData,
                        tol: float = 1e-10, max_iter: int = 200) -> ContractionResult:
    """Fixed-point iteration u_{n+1} = L0^-1(load) - L0^-1 M u_n from u = 0.

    ``history[0]`` is the seminorm of the first iterate (the update from 0);
    iteration stops once an update falls below ``tol * history[0]``.
    """
    if op_L0.mesh is not op_M.mesh and not op_L0.mesh.same_as(op_M.mesh):
        raise ValueError("operators live on different meshes")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if rhs.boundary_values is not None and np.any(rhs.boundary_values.values[op_L0.constrained] != 0):
        raise ValueError("contraction_iterate requires homogeneous Dirichlet data")
    mesh = op_L0.mesh
    free = op_L0.free
    S = stiffness(mesh)
    Sf = S[free][:, free]
    lu = op_L0.lu
    Mf = op_M.interior_matrix
    b = load_vector(mesh, rhs.F, rhs.f)[free]
    base = lu.solve(b)
    u = base.copy()
    history = [float(np.sqrt(max(u @ (Sf @ u), 0.0)))]
    ref = history[0]
    converged = ref == 0.0
    growth = 0
    it = 0
    while not converged and it < max_iter:
        it += 1
        new = base - lu.solve(Mf @ u)
        du = new - u
        nrm = float(np.sqrt(max(du @ (Sf @ du), 0.0)))
        history.append(nrm)
        u = new
        if nrm <= tol * ref:
            converged = True
            break
        growth = growth + 1 if nrm > history[-2] else 0
        if growth >= 3 or not np.isfinite(nrm):
            raise NoContractionError(
                f"update norm grew for 3 consecutive steps (last {nrm:.3e}); the disk is too large "
                "for L0^-1 M to be a contraction", history)
    out = np.zeros(mesh.n_vertices)
    out[free] = u
    return ContractionResult(FemFunction(mesh, out), history, it, converged)


def estimate_contraction_norm(op_L0: WeakOperator, op_M: WeakOperator, probes: int = 4, seed: int = 0,
                              iterations: int = 60, rtol: float = 1e-8) -> float:
    """Power-iteration estimate of ||L0^-1 M|| in the discrete W^{1,2} seminorm.

    Iterates on T*T with T = L0^-1 M and T* = S^-1 T^T S the seminorm adjoint,
    starting from ``probes`` seeded random vectors; returns the largest sqrt
    Rayleigh quotient.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    mesh = op_L0.mesh
    free = op_L0.free
    Mf = op_M.interior_matrix
    if Mf.nnz == 0 or not np.any(Mf.data):
        return 0.0
    Sf = stiffness(mesh)[free][:, free].tocsc()
    S_lu = spla.splu(Sf)
    lu = op_L0.lu

    def T(x):
        return lu.solve(Mf @ x)

    def Tadj(y):
        # T^T S y = M^T L0^-T S y
        return S_lu.solve(Mf.T @ lu.solve(Sf @ y, trans="T"))

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((len(free), probes))
    best = 0.0
    for k in range(probes):
        x = X[:, k]
        x /= np.sqrt(x @ (Sf @ x))
        est_prev = 0.0
        est = 0.0
        for _ in range(iterations):
            y = T(x)
            est = float(np.sqrt(max(y @ (Sf @ y), 0.0)))
            if est == 0.0:
                break
            z = Tadj(y)
            nz = np.sqrt(max(z @ (Sf @ z), 0.0))
            if nz == 0.0:
                break
            x = z / nz
            if abs(est - est_prev) <= rtol * est:
                break
            est_prev = est
        best = max(best, est)
    return best


# ---------------------------------------------------------------------------


def divergence_lift(f: Any, disk: Tuple[Sequence[float], float], mesh: Mesh) -> ElementField:
    """Vector field G with -div G = f weakly: G = grad N, -Laplace N = f, N = 0 on the boundary."""
    c, r = disk
    if not (np.allclose(np.asarray(c, dtype=float), mesh.center) and np.isclose(r, mesh.radius)):
        raise ValueError("divergence_lift expects the mesh of the given disk")
    op = assemble(mesh, CoefficientSet(), "L0", check=False)
    N = solve_dirichlet(op, RhsData(f=f))
    return N.gradient()


def interior_gradient_ratio(u: FemFunction, coeffs: Optional[CoefficientSet], rho: float, r: float,
                            p: float = 4.0) -> float:
    """Empirical constant ||grad u||_{L^p(B_rho)} / (r^{2(1/p - 1)} ||u||_{L^2(B_r)})."""
    mesh = u.mesh
    if not 0 < rho < r <= mesh.radius * (1 + 1e-12):
        raise ValueError("need 0 < rho < r <= mesh radius")
    c = mesh.center
    r = min(r, mesh.radius)
    l2 = lp_norm(mesh, u, 2.0, (c, r))
    if l2 == 0.0:
        raise DegenerateInputError("||u||_{L^2(B_r)} vanishes")
    grad = lp_norm(mesh, u.gradient(), p, (c, rho))
    return grad / (r ** (2.0 * (1.0 / p - 1.0)) * l2)
