"""Structured disk triangulations, point location, quadrature and P1 functions.

The mesh family is a structured triangulation of the square ``[-1, 1]^2``
pushed onto the disk by the radial stretch ``p -> p * max(|x|, |y|) / |p|``.
Each grid cell is split along the diagonal pointing away from the origin
("union jack"), which keeps the corner cells from degenerating into slivers.

Quadrature uses the three-point mid-edge rule on whole elements. Elements cut
by a sub-disk circle are split into 16 congruent sub-triangles; sub-triangles
still cut by the circle are split again (up to ``clip_levels``) and the finest
level is sampled at centroids weighted by the inside indicator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Mesh",
    "FemFunction",
    "ElementField",
    "Points",
    "Quadrature",
    "build_disk_mesh",
    "locate",
    "locate_many",
    "integrate",
    "quadrature",
    "sample",
    "compose",
    "lp_norm",
    "linf_norm",
]

# barycentric coordinates of the mid-edge points (edges 12, 20, 01)
_MIDEDGE = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
_BARY_TOL = 1e-12


def _subdivision_centroids(n: int = 4) -> np.ndarray:
    """Barycentric centroids of the n*n congruent sub-triangles of a triangle."""
    out = []
    for i in range(n):
        for j in range(n - i):
            # upward triangle
            a = np.array([i, j, n - i - j], dtype=float)
            b = a + [1, 0, -1]
            c = a + [0, 1, -1]
            out.append((a + b + c) / (3 * n))
            if i + j < n - 1:
                # downward triangle
                d = a + [1, 1, -2]
                out.append((b + c + d) / (3 * n))
    return np.array(out)


def _subdivision_vertices(n: int = 4) -> np.ndarray:
    """Barycentric vertex triples (k, 3, 3) of the n*n sub-triangles."""
    out = []
    for i in range(n):
        for j in range(n - i):
            a = np.array([i, j, n - i - j], dtype=float)
            b = a + [1, 0, -1]
            c = a + [0, 1, -1]
            out.append([a / n, b / n, c / n])
            if i + j < n - 1:
                d = a + [1, 1, -2]
                out.append([b / n, d / n, c / n])
    return np.array(out)


_SUB_CENTROIDS = _subdivision_centroids()
_SUB_VERTICES = _subdivision_vertices()


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulated disk.

    Attributes
    ----------
    vertices : ndarray, shape (nv, 2)
    triangles : ndarray, shape (nt, 3), counter-clockwise
    boundary : ndarray of bool, shape (nv,)
    center : ndarray, shape (2,)
    radius : float
    resolution : int
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    center: np.ndarray
    radius: float
    resolution: int

    @property
    def key(self) -> Tuple[float, float, float, int]:
        return (float(self.center[0]), float(self.center[1]), float(self.radius), int(self.resolution))

    def same_as(self, other: Optional["Mesh"]) -> bool:
        return other is not None and (other is self or other.key == self.key)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def h(self) -> float:
        """Nominal mesh size (diameter / resolution)."""
        return 2.0 * self.radius / self.resolution

    @cached_property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.corners
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Gradients of the three hat functions on each triangle, (nt, 3, 2)."""
        p = self.corners
        area2 = 2.0 * self.signed_areas
        g = np.empty((self.n_triangles, 3, 2))
        for k in range(3):
            a = p[:, (k + 1) % 3]
            b = p[:, (k + 2) % 3]
            g[:, k, 0] = (a[:, 1] - b[:, 1]) / area2
            g[:, k, 1] = (b[:, 0] - a[:, 0]) / area2
        return g

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    @cached_property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary)

    @cached_property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    def nearest_vertex(self, x: Sequence[float]) -> int:
        d = np.linalg.norm(self.vertices - np.asarray(x, dtype=float), axis=1)
        return int(np.argmin(d))

    def quadrature_points(self) -> "Points":
        """Mid-edge quadrature points of every element (3 per triangle)."""
        return quadrature(self).points

    def contains_disk(self, center: Sequence[float], r: float, tol: float = 1e-9) -> bool:
        c = np.asarray(center, dtype=float)
        return float(np.linalg.norm(c - self.center)) + r <= self.radius * (1.0 + tol)


def build_disk_mesh(center: Sequence[float] = (0.0, 0.0), radius: float = 1.0,
                    resolution: int = 32) -> Mesh:
    """Structured triangulation of the disk ``|x - center| <= radius``.

    ``resolution`` is the number of cells along one side of the reference
    square, so the vertex count is ``(resolution + 1)**2``.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius!r}")
    if int(resolution) != resolution or resolution < 4:
        raise ValueError(f"resolution must be an integer >= 4, got {resolution!r}")
    n = int(resolution)
    center = np.asarray(center, dtype=float).reshape(2)

    s = np.linspace(-1.0, 1.0, n + 1)
    X, Y = np.meshgrid(s, s, indexing="xy")
    sq = np.column_stack([X.ravel(), Y.ravel()])
    # exact symmetric grid values
    sq[np.isclose(sq, 0.0, atol=1e-15)] = 0.0
    inf = np.max(np.abs(sq), axis=1)
    eu = np.hypot(sq[:, 0], sq[:, 1])
    scale = np.divide(inf, eu, out=np.ones_like(inf), where=eu > 0)
    unit = sq * scale[:, None]
    bnd = inf >= 1.0 - 1e-14
    # boundary points placed exactly on the circle
    unit[bnd] /= np.hypot(unit[bnd, 0], unit[bnd, 1])[:, None]
    vertices = center + radius * unit

    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # idx[row=j, col=i]
    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10 = idx[j, i], idx[j, i + 1]
            v01, v11 = idx[j + 1, i], idx[j + 1, i + 1]
            cx = s[i] + s[i + 1]
            cy = s[j] + s[j + 1]
            if cx * cy >= 0:
                # diagonal v00-v11
                tris.append((v00, v10, v11))
                tris.append((v00, v11, v01))
            else:
                # diagonal v10-v01
                tris.append((v00, v10, v01))
                tris.append((v10, v11, v01))
    triangles = np.array(tris, dtype=np.int64)
    mesh = Mesh(vertices=vertices, triangles=triangles, boundary=bnd, center=center,
                radius=float(radius), resolution=n)
    if np.any(mesh.signed_areas <= 0):
        raise RuntimeError("mesh generator produced a non-positive triangle")
    return mesh


# ---------------------------------------------------------------------------
# point location


def _barycentric(mesh: Mesh, tri: np.ndarray, xy: np.ndarray) -> np.ndarray:
    p = mesh.corners[tri]
    v0 = p[..., 1, :] - p[..., 0, :]
    v1 = p[..., 2, :] - p[..., 0, :]
    v2 = xy - p[..., 0, :]
    det = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    l1 = (v2[..., 0] * v1[..., 1] - v2[..., 1] * v1[..., 0]) / det
    l2 = (v0[..., 0] * v2[..., 1] - v0[..., 1] * v2[..., 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def locate_many(mesh: Mesh, xy: np.ndarray, extrapolate: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised point location.

    Returns ``(tri, bary)``; ``tri`` is -1 for points outside the mesh unless
    ``extrapolate`` is set, in which case the nearest element is used and its
    (possibly negative) barycentric coordinates are returned.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    npts = len(xy)
    tri = np.full(npts, -1, dtype=np.int64)
    bary = np.zeros((npts, 3))
    if npts == 0:
        return tri, bary
    k = min(12, mesh.n_triangles)
    _, cand = mesh._tree.query(xy, k=k)
    cand = np.asarray(cand).reshape(npts, k)
    lam = _barycentric(mesh, cand, xy[:, None, :])
    ok = lam.min(axis=-1) >= -_BARY_TOL
    found = ok.any(axis=1)
    first = np.argmax(ok, axis=1)
    rows = np.flatnonzero(found)
    tri[rows] = cand[rows, first[rows]]
    bary[rows] = lam[rows, first[rows]]

    # the mesh is inscribed in its circle, so points beyond it need no search
    beyond = np.hypot(*(xy - mesh.center).T) > mesh.radius * (1.0 + 1e-9)
    for r in np.flatnonzero(~found & beyond):
        if extrapolate:
            near = int(cand[r, 0])
            tri[r] = near
            bary[r] = _barycentric(mesh, np.array([near]), xy[r][None, :])[0]

    # brute force for the few points the candidate search missed
    for r in np.flatnonzero(~found & ~beyond):
        lam_all = _barycentric(mesh, np.arange(mesh.n_triangles), xy[r][None, :])
        worst = lam_all.min(axis=1)
        best = int(np.argmax(worst))
        if worst[best] >= -_BARY_TOL:
            tri[r] = best
            bary[r] = lam_all[best]
        elif extrapolate:
            near = int(cand[r, 0])
            tri[r] = near
            bary[r] = _barycentric(mesh, np.array([near]), xy[r][None, :])[0]
            continue

    inside = tri >= 0
    # clip round-off and renormalise for points genuinely inside
    genuine = inside & (bary.min(axis=1) >= -_BARY_TOL)
    b = np.clip(bary[genuine], 0.0, None)
    bary[genuine] = b / b.sum(axis=1, keepdims=True)
    return tri, bary


def locate(mesh: Mesh, x: Sequence[float]) -> Optional[Tuple[int, np.ndarray]]:
    """Containing triangle and barycentric coordinates of ``x``; None if outside."""
    tri, bary = locate_many(mesh, np.asarray(x, dtype=float).reshape(1, 2))
    if tri[0] < 0:
        return None
    return int(tri[0]), bary[0]


# ---------------------------------------------------------------------------
# evaluation points and fields


@dataclass(frozen=True, eq=False)
class Points:
    """Evaluation points, optionally tagged with their element and barycentrics."""

    xy: np.ndarray
    mesh: Optional[Mesh] = None
    elements: Optional[np.ndarray] = None
    bary: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.xy)

    def located_in(self, mesh: Mesh, extrapolate: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        if self.elements is not None and mesh.same_as(self.mesh):
            return self.elements, self.bary
        return locate_many(mesh, self.xy, extrapolate=extrapolate)


@dataclass(frozen=True, eq=False)
class FemFunction:
    """Continuous piecewise-linear function given by its nodal values.

    ``values`` has shape ``(nv,)`` for scalar functions or ``(nv, k)`` for
    vector-valued ones; complex dtypes are allowed.
    """

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.shape[0] != self.mesh.n_vertices:
            raise ValueError(f"expected {self.mesh.n_vertices} nodal values, got {v.shape[0]}")
        object.__setattr__(self, "values", v)

    def at(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        nodal = self.values[self.mesh.triangles[elements]]  # (n, 3, ...)
        return np.einsum("nk,nk...->n...", bary, nodal)

    def sample(self, pts: Points) -> np.ndarray:
        el, bary = pts.located_in(self.mesh)
        return self.at(el, bary)

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        el, bary = locate_many(self.mesh, xy)
        out = self.at(np.maximum(el, 0), bary)
        if np.any(el < 0):
            out = out.astype(np.result_type(out, float))
            out[el < 0] = np.nan
        return out

    def gradient(self) -> "ElementField":
        """Elementwise-constant gradient, shape (nt, 2) (or (nt, k, 2) for vectors)."""
        nodal = self.values[self.mesh.triangles]  # (nt, 3, ...)
        g = np.einsum("tkd,tk...->t...d", self.mesh.basis_gradients, nodal)
        return ElementField(self.mesh, g)

    def projected_gradient(self) -> "FemFunction":
        """Area-weighted vertex average of the elementwise gradients."""
        g = self.gradient().values
        area = self.mesh.areas
        tri = self.mesh.triangles
        shape = (self.mesh.n_vertices,) + g.shape[1:]
        acc = np.zeros(shape, dtype=g.dtype)
        wsum = np.zeros(self.mesh.n_vertices)
        for k in range(3):
            np.add.at(acc, tri[:, k], g * area.reshape((-1,) + (1,) * (g.ndim - 1)))
            np.add.at(wsum, tri[:, k], area)
        return FemFunction(self.mesh, acc / wsum.reshape((-1,) + (1,) * (g.ndim - 1)))

    def value_at(self, x: Sequence[float]) -> Any:
        loc = locate(self.mesh, x)
        if loc is None:
            raise ValueError(f"point {tuple(x)} lies outside the mesh")
        el, bary = loc
        return self.at(np.array([el]), bary[None, :])[0]

    @classmethod
    def interpolate(cls, mesh: Mesh, g: Callable[[np.ndarray], np.ndarray]) -> "FemFunction":
        return cls(mesh, np.asarray(g(mesh.vertices)))


@dataclass(frozen=True, eq=False)
class ElementField:
    """Piecewise-constant field, one value per triangle."""

    mesh: Mesh
    values: np.ndarray

    def at(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        return self.values[elements]

    def sample(self, pts: Points) -> np.ndarray:
        el, bary = pts.located_in(self.mesh)
        return self.values[el]


FieldLike = Union[Callable[[np.ndarray], np.ndarray], FemFunction, ElementField, float, complex, np.ndarray]


class _Composed:
    def __init__(self, fn: Callable[..., np.ndarray], fields: Sequence[Any], pass_xy: bool):
        self.fn = fn
        self.fields = fields
        self.pass_xy = pass_xy

    def sample(self, pts: Points) -> np.ndarray:
        vals = [sample(f, pts) for f in self.fields]
        if self.pass_xy:
            return self.fn(pts.xy, *vals)
        return self.fn(*vals)

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        return self.sample(Points(np.atleast_2d(np.asarray(xy, dtype=float))))


def compose(fn: Callable[..., np.ndarray], *fields: Any, pass_xy: bool = False) -> _Composed:
    """Pointwise combination of fields: ``fn(*[field values])``.

    With ``pass_xy`` the coordinates are passed as the first argument.
    """
    return _Composed(fn, fields, pass_xy)


def sample(f: Any, pts: Points) -> np.ndarray:
    """Evaluate a field-like object at ``pts``."""
    if hasattr(f, "sample"):
        return f.sample(pts)
    if callable(f):
        return np.asarray(f(pts.xy))
    arr = np.asarray(f)
    return np.broadcast_to(arr, (len(pts),) + arr.shape).copy()


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True, eq=False)
class Quadrature:
    points: Points
    weights: np.ndarray


def _point_triangle_distance(p: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Distance from point c to each triangle p (nt, 3, 2)."""
    lam = np.stack([p[:, 0], p[:, 1], p[:, 2]], axis=1)
    d = np.full(len(p), np.inf)
    for k in range(3):
        a = lam[:, k]
        b = lam[:, (k + 1) % 3]
        ab = b - a
        t = np.clip(np.einsum("nd,nd->n", c - a, ab) / np.einsum("nd,nd->n", ab, ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.minimum(d, np.linalg.norm(proj - c, axis=1))
    # zero distance when c is inside
    v0 = p[:, 1] - p[:, 0]
    v1 = p[:, 2] - p[:, 0]
    v2 = c - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
    d[inside] = 0.0
    return d


def _clip_levels(mesh: Mesh, r: float) -> int:
    # refine cut elements until sub-triangles are at most r/64 across
    ratio = mesh.h / max(r / 64.0, 1e-300)
    return int(max(2, min(6, np.ceil(np.log(max(ratio, 1.0)) / np.log(4.0)))))


def quadrature(mesh: Mesh, subdisk: Optional[Tuple[Sequence[float], float]] = None,
               clip_levels: Optional[int] = None) -> Quadrature:
    """Quadrature points and weights over the mesh or over a sub-disk."""
    nt = mesh.n_triangles
    area = mesh.areas
    if subdisk is None:
        inside = np.arange(nt)
        cut = np.empty(0, dtype=np.int64)
        c, r = mesh.center, mesh.radius
    else:
        c = np.asarray(subdisk[0], dtype=float).reshape(2)
        r = float(subdisk[1])
        if not r > 0:
            raise ValueError("sub-disk radius must be positive")
        if not mesh.contains_disk(c, r):
            raise ValueError(f"sub-disk (center={tuple(c)}, r={r}) is not contained in the mesh disk")
        dv = np.linalg.norm(mesh.corners - c, axis=2)
        tol = 1e-12 * max(r, 1.0)
        all_in = np.all(dv <= r + tol, axis=1)
        near = _point_triangle_distance(mesh.corners, c) < r
        inside = np.flatnonzero(all_in)
        cut = np.flatnonzero(near & ~all_in)

    el = np.repeat(inside, 3)
    bary = np.tile(_MIDEDGE, (len(inside), 1))
    w = np.repeat(area[inside] / 3.0, 3)
    els, barys, ws = [el], [bary], [w]

    if len(cut):
        levels = clip_levels if clip_levels is not None else _clip_levels(mesh, r)
        e_c, b_c, w_c = _clipped_points(mesh, cut, c, r, levels)
        els.append(e_c)
        barys.append(b_c)
        ws.append(w_c)

    el = np.concatenate(els)
    bary = np.concatenate(barys)
    w = np.concatenate(ws)
    xy = np.einsum("nk,nkd->nd", bary, mesh.corners[el])
    return Quadrature(Points(xy, mesh, el, bary), w)


def _clipped_points(mesh: Mesh, cut: np.ndarray, c: np.ndarray, r: float, levels: int):
    """Recursive 16-way subdivision of cut elements; indicator at the finest level."""
    # sub-triangles in barycentric coordinates of their parent: (n, 3, 3)
    parent = cut.copy()
    subs = np.tile(np.eye(3)[None], (len(cut), 1, 1))
    area = mesh.areas[cut].copy()
    out_el, out_b, out_w = [], [], []
    for level in range(levels):
        # refine every current sub-triangle into 16
        new = np.einsum("skj,njd->nskd", _SUB_VERTICES, subs)  # (n, 16, 3, 3)
        n16 = new.shape[1]
        parent = np.repeat(parent, n16)
        subs = new.reshape(-1, 3, 3)
        area = np.repeat(area / n16, n16)
        xy_v = np.einsum("nkj,njd->nkd", subs, mesh.corners[parent])
        dv = np.linalg.norm(xy_v - c, axis=2)
        all_in = np.all(dv <= r, axis=1)
        if level < levels - 1:
            near = _point_triangle_distance(xy_v, c) < r
            # whole sub-triangles inside: mid-edge rule
            idx = np.flatnonzero(all_in)
            if len(idx):
                b = np.einsum("qk,nkj->nqj", _MIDEDGE, subs[idx]).reshape(-1, 3)
                out_el.append(np.repeat(parent[idx], 3))
                out_b.append(b)
                out_w.append(np.repeat(area[idx] / 3.0, 3))
            keep = np.flatnonzero(near & ~all_in)
            parent, subs, area = parent[keep], subs[keep], area[keep]
            if len(keep) == 0:
                break
        else:
            cen = subs.mean(axis=1)
            xy = np.einsum("nj,njd->nd", cen, mesh.corners[parent])
            ind = np.linalg.norm(xy - c, axis=1) <= r
            out_el.append(parent[ind])
            out_b.append(cen[ind])
            out_w.append(area[ind])
    if not out_el:
        return np.empty(0, dtype=np.int64), np.empty((0, 3)), np.empty(0)
    return np.concatenate(out_el), np.concatenate(out_b), np.concatenate(out_w)


def integrate(mesh: Mesh, g: Any, subdisk: Optional[Tuple[Sequence[float], float]] = None,
              clip_levels: Optional[int] = None) -> float:
    """Quadrature approximation of the integral of ``g`` over the mesh or a sub-disk.

    ``g`` may be a callable of coordinates ``(n, 2) -> (n,)``, a FemFunction,
    an ElementField or anything built with :func:`compose`.
    """
    q = quadrature(mesh, subdisk, clip_levels)
    vals = sample(g, q.points)
    return np.sum(q.weights * vals)


def lp_norm(mesh: Mesh, g: Any, p: float, subdisk=None, clip_levels: Optional[int] = None) -> float:
    """L^p norm of a scalar, vector or complex field (Euclidean pointwise norm)."""
    q = quadrature(mesh, subdisk, clip_levels)
    vals = np.asarray(sample(g, q.points))
    a = np.abs(vals)
    if a.ndim > 1:
        a = np.sqrt(np.sum(a.reshape(len(a), -1) ** 2, axis=1))
    if np.isinf(p):
        return float(a.max()) if len(a) else 0.0
    return float(np.sum(q.weights * a ** p) ** (1.0 / p))


def linf_norm(u: FemFunction, subdisk=None) -> float:
    """Max of |u| over the vertices inside the closed sub-disk (P1 maxima sit at vertices)."""
    v = np.abs(u.values)
    if v.ndim > 1:
        v = np.sqrt(np.sum(v ** 2, axis=1))
    if subdisk is None:
        return float(v.max())
    c = np.asarray(subdisk[0], dtype=float)
    mask = np.linalg.norm(u.mesh.vertices - c, axis=1) <= subdisk[1] * (1 + 1e-12)
    return float(v[mask].max()) if mask.any() else 0.0
