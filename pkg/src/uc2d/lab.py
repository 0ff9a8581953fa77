"""Experiment runner: pipeline certification, contraction scaling and the
unique-continuation measurements (vanishing order, doubling, three spheres).

Every ``run_*`` function is pure: it takes an :class:`ExperimentConfig` and
returns an :class:`ExperimentOutput` holding the JSON report, CSV tables and
raster dumps. :func:`write_outputs` puts them on disk. Reports use sorted
keys and floats are written with ``repr`` so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .beltrami import (SimilarityFailure, beltrami_data, beltrami_residual, similarity_factor,
                       stream_bound_ratio, stream_function)
from .fields import BUILTIN_NAMES, CoefficientSet, builtin, coefficients_from_raster, write_raster
from .mesh import FemFunction, Mesh, Points, build_disk_mesh, lp_norm, sample
from .operators import (DegenerateInputError, NoContractionError, RhsData, assemble, contraction_iterate,
                        estimate_contraction_norm, solve_dirichlet)
from .reduction import ReductionParameters, reduce, solve_reduced, verify_factorization

__all__ = [
    "KINDS",
    "InvalidConfig",
    "ExperimentConfig",
    "ExperimentOutput",
    "NormProfile",
    "norm_profile",
    "run_pipeline",
    "run_contraction_scaling",
    "run_vanishing_order",
    "run_doubling",
    "run_three_spheres",
    "run",
    "write_outputs",
]

KINDS = ("pipeline", "contraction_scaling", "doubling", "three_spheres", "vanishing_order")
SOLUTION_KINDS = ("polynomial", "constant", "zero", "discrete", "reduced")
ZERO_LEVEL = 1e-14
FIT_FLOOR_CELLS = 5


class InvalidConfig(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (see README for the JSON schema)."""

    kind: str
    coefficients: Dict[str, Any] = field(default_factory=lambda: {"builtin": "identity"})
    center: Tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    resolutions: Tuple[int, ...] = (32, 64, 128)
    reduction: Dict[str, Any] = field(default_factory=dict)
    radii: Tuple[float, ...] = ()
    triples: Tuple[Tuple[float, float, float], ...] = ()
    solution: Dict[str, Any] = field(default_factory=lambda: {"kind": "discrete"})
    x0: Optional[Tuple[float, float]] = None
    seed: int = 0
    output: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], kind: Optional[str] = None) -> "ExperimentConfig":
        if not isinstance(raw, Mapping):
            raise InvalidConfig("config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__} | {"disk"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
        k = raw.get("kind", kind)
        if kind is not None and k != kind:
            raise InvalidConfig(f"config kind {k!r} does not match requested experiment {kind!r}")
        if k not in KINDS:
            raise InvalidConfig(f"kind must be one of {', '.join(KINDS)}, got {k!r}")
        disk = raw.get("disk", {})
        try:
            center = tuple(float(c) for c in disk.get("center", raw.get("center", (0.0, 0.0))))
            radius = float(disk.get("radius", raw.get("radius", 1.0)))
            resolutions = tuple(int(r) for r in raw.get("resolutions", (32, 64, 128)))
            radii = tuple(float(r) for r in raw.get("radii", ()))
            triples = tuple(tuple(float(v) for v in t) for t in raw.get("triples", ()))
            x0 = raw.get("x0")
            x0 = None if x0 is None else tuple(float(v) for v in x0)
            seed = int(raw.get("seed", 0))
        except (TypeError, ValueError, AttributeError) as exc:
            raise InvalidConfig(f"malformed config value: {exc}") from exc
        cfg = cls(kind=k, coefficients=dict(raw.get("coefficients", {"builtin": "identity"})), center=center,
                  radius=radius, resolutions=resolutions, reduction=dict(raw.get("reduction", {})),
                  radii=radii or _default_radii(k, radius), triples=triples,
                  solution=dict(raw.get("solution", {"kind": "discrete"})), x0=x0, seed=seed,
                  output=raw.get("output"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str, kind: Optional[str] = None) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, kind)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["center"] = list(self.center)
        d["resolutions"] = list(self.resolutions)
        d["radii"] = list(self.radii)
        d["triples"] = [list(t) for t in self.triples]
        d["x0"] = None if self.x0 is None else list(self.x0)
        return d

    @property
    def point(self) -> np.ndarray:
        return np.asarray(self.x0 if self.x0 is not None else self.center, dtype=float)

    def validate(self) -> None:
        if len(self.center) != 2:
            raise InvalidConfig("disk center must have two coordinates")
        if not self.radius > 0:
            raise InvalidConfig("disk radius must be positive")
        if not self.resolutions:
            raise InvalidConfig("at least one mesh resolution is required")
        if any(r < 4 for r in self.resolutions):
            raise InvalidConfig("mesh resolutions must be >= 4")
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise InvalidConfig("resolutions must be strictly increasing")
        if any(b >= a for a, b in zip(self.radii, self.radii[1:])):
            raise InvalidConfig("radii schedule must be strictly decreasing")
        if any(not r > 0 for r in self.radii):
            raise InvalidConfig("radii must be positive")
        offset = float(np.hypot(*(self.point - np.asarray(self.center))))
        if self.x0 is not None and len(self.x0) != 2:
            raise InvalidConfig("x0 must have two coordinates")
        if offset >= self.radius:
            raise InvalidConfig("x0 must lie inside the disk")
        reach = self.radius - offset
        if self.radii and self.radii[0] > reach * (1 + 1e-12):
            raise InvalidConfig(f"radius {self.radii[0]} around x0 leaves the disk (max {reach})")
        self._validate_coefficients()
        bad = set(self.reduction) - {"p", "t", "max_halvings", "bound_tolerance"}
        if bad:
            raise InvalidConfig(f"unknown reduction keys: {', '.join(sorted(bad))}")
        if self.kind == "contraction_scaling" and len(self.radii) < 4:
            raise InvalidConfig("contraction scaling needs at least 4 radii")
        if self.kind == "doubling" and any(2 * r > reach * (1 + 1e-12) for r in self.radii):
            raise InvalidConfig("doubling needs 2r inside the disk for every r")
        if self.kind == "three_spheres":
            for t in self.three_sphere_triples():
                if len(t) != 3 or not 0 < t[0] < t[1] < t[2] <= reach * (1 + 1e-12):
                    raise InvalidConfig(f"three-sphere triple {t} must satisfy 0 < rho < r < R <= {reach}")
            if not self.three_sphere_triples():
                raise InvalidConfig("three spheres needs triples or at least 3 radii")
        if self.kind in ("vanishing_order", "doubling", "three_spheres"):
            sk = self.solution.get("kind")
            if sk not in SOLUTION_KINDS:
                raise InvalidConfig(f"solution kind must be one of {', '.join(SOLUTION_KINDS)}, got {sk!r}")
            if sk == "polynomial":
                n = self.solution.get("n")
                if not isinstance(n, int) or n < 0:
                    raise InvalidConfig("polynomial solution needs an integer degree n >= 0")

    def _validate_coefficients(self) -> None:
        c = self.coefficients
        if ("builtin" in c) == ("raster" in c):
            raise InvalidConfig("coefficients need exactly one of 'builtin' or 'raster'")
        if "builtin" in c and c["builtin"] not in BUILTIN_NAMES:
            raise InvalidConfig(f"unknown builtin {c['builtin']!r}; valid names: {', '.join(BUILTIN_NAMES)}")
        if "raster" in c and not Path(c["raster"]).is_file():
            raise InvalidConfig(f"raster file {c['raster']!r} not found")
        if not isinstance(c.get("parameters", {}), Mapping):
            raise InvalidConfig("coefficient parameters must be an object")

    def coefficient_set(self) -> CoefficientSet:
        c = self.coefficients
        try:
            if "builtin" in c:
                return builtin(c["builtin"], c.get("parameters"))
            return coefficients_from_raster(c["raster"], q=float(c.get("q", 4.0)))
        except (ValueError, TypeError) as exc:
            raise InvalidConfig(str(exc)) from exc

    def reduction_parameters(self, resolution: int) -> ReductionParameters:
        return ReductionParameters(R_target=self.radius, resolution=resolution, **self.reduction)

    def three_sphere_triples(self) -> Tuple[Tuple[float, ...], ...]:
        if self.triples:
            return self.triples
        r = self.radii
        return tuple((r[i + 2], r[i + 1], r[i]) for i in range(len(r) - 2))


def _default_radii(kind: str, radius: float) -> Tuple[float, ...]:
    if kind == "contraction_scaling":
        base = (0.4, 0.2, 0.1, 0.05)
    elif kind == "doubling":
        base = (0.4, 0.2, 0.1, 0.05, 0.025)
    elif kind in ("vanishing_order", "three_spheres"):
        base = (0.8, 0.4, 0.2, 0.1, 0.05, 0.02)
    else:
        base = ()
    return tuple(radius * b for b in base)


# ---------------------------------------------------------------------------
# outputs


@dataclass
class ExperimentOutput:
    kind: str
    report: Dict[str, Any]
    tables: Dict[str, str] = field(default_factory=dict)
    rasters: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray, str]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.report.get("errors")

    def report_json(self) -> str:
        return json.dumps(_clean(self.report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_outputs(output: ExperimentOutput, out_dir: str) -> List[Path]:
    """Write report.json, the CSV tables and raster dumps; returns the paths written."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    p = d / "report.json"
    p.write_text(output.report_json())
    written.append(p)
    for name, text in sorted(output.tables.items()):
        p = d / name
        p.write_text(text)
        written.append(p)
    for name, (x, y, data, comment) in sorted(output.rasters.items()):
        p = d / name
        write_raster(p, x, y, data, comment=comment)
        written.append(p)
    return written


def _error(stage: str, exc: BaseException, **extra: Any) -> Dict[str, Any]:
    return {"stage": stage, "type": type(exc).__name__, "message": str(exc), **extra}


# ---------------------------------------------------------------------------
# pipeline


def _ratios(values: Sequence[Optional[float]]) -> List[Optional[float]]:
    out: List[Optional[float]] = []
    for a, b in zip(values, values[1:]):
        out.append(a / b if a is not None and b is not None and b > 0 else None)
    return out


def _radial_clamp(xy: np.ndarray, center: np.ndarray, R: float) -> np.ndarray:
    rel = xy - center
    r = np.hypot(rel[:, 0], rel[:, 1])
    scale = np.where(r > R, R / np.maximum(r, np.finfo(float).tiny), 1.0)
    return center + rel * scale[:, None]


def _raster_dumps(result, data, n: int = 65) -> Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray, str]]:
    c = result.center
    R = result.R2
    mesh = result.mesh
    x = np.linspace(c[0] - R, c[0] + R, n)
    y = np.linspace(c[1] - R, c[1] + R, n)
    X, Y = np.meshgrid(x, y, indexing="xy")
    xy = _radial_clamp(np.column_stack([X.ravel(), Y.ravel()]), c, R * (1.0 - 1.0 / mesh.resolution))
    pts = Points(xy)
    A = np.asarray(sample(result.A_hat, pts)).reshape(-1, 4)
    B = np.asarray(sample(result.B_hat, pts)).reshape(-1, 2)
    zeros = np.zeros((len(xy), 3))
    hat = np.column_stack([A, B, zeros])
    mu, nu, al = (np.asarray(sample(f, pts)) for f in (data.mu, data.nu, data.alpha))
    bel = np.column_stack([mu.real, mu.imag, nu.real, nu.imag, al.real, al.imag])
    return {
        "hat_coefficients.raster": (x, y, hat, "reduced coefficients: a11 a12 a21 a22 b1 b2 c1 c2 d"),
        "beltrami_fields.raster": (x, y, bel, "mu_re mu_im nu_re nu_im alpha_re alpha_im (beta = alpha)"),
    }


def _pipeline_resolution(cfg: ExperimentConfig, coeffs: CoefficientSet, res: int,
                         errors: List[Dict[str, Any]]):
    row: Dict[str, Any] = {"resolution": res}
    try:
        result = reduce(coeffs, (cfg.center, cfg.radius), cfg.reduction_parameters(res))
    except Exception as exc:  # noqa: BLE001 - every stage failure is reported, not raised
        errors.append(_error("reduce", exc, resolution=res))
        return row, None, None
    d = result.diagnostics
    row.update({
        "R1": result.R1,
        "R2": result.R2,
        "p": result.params.p,
        "t": result.params.t,
        "K": d["K"],
        "K_tilde": d["K_tilde"],
        "K_hat": d["K_hat"],
        "kappa": d["kappa_R1"],
        "certificates": {k: d[k] for k in ("m_min", "m_max", "w_min", "w_max", "sup_z_m", "sup_z_w",
                                           "halvings_m", "halvings_w", "grad_m_Lp", "grad_w_Lt",
                                           "K_tilde_ok", "K_hat_ok", "tilde_lower_Lp",
                                           "tilde_lower_bound", "Bhat_Lt", "Bhat_bound", "bounds_ok")},
    })
    try:
        row["factorization_residual"] = verify_factorization(coeffs, result, trials=20, seed=cfg.seed)
    except Exception as exc:  # noqa: BLE001
        errors.append(_error("factorization", exc, resolution=res))
    x0 = result.center
    try:
        v = solve_reduced(result, lambda xy: xy[:, 0] - x0[0])
        vt = stream_function(v, result.A_hat, result.B_hat, x0)
        row["stream_defect"] = vt.defect
        row["stream_relative_defect"] = vt.relative_defect
        row["stream_bound_ratio"] = stream_bound_ratio(v, vt, 0.5 * result.R2)
    except Exception as exc:  # noqa: BLE001
        errors.append(_error("stream_function", exc, resolution=res))
        return row, result, None
    try:
        data = beltrami_data(v, vt, result.A_hat, result.B_hat, x0)
        row["k_bound"] = data.k_bound
        row["beltrami_residual"] = beltrami_residual(data)
        t = result.params.t
        row["alpha_beta_Lt"] = lp_norm(v.mesh, data.alpha, t) + lp_norm(v.mesh, data.beta, t)
    except Exception as exc:  # noqa: BLE001
        errors.append(_error("beltrami", exc, resolution=res))
        return row, result, None
    try:
        sim = similarity_factor(data)
        row["similarity"] = sim.report()
    except SimilarityFailure as exc:
        row["similarity"] = {"divided_residual": exc.divided, "input_residual": exc.original}
        errors.append(_error("similarity", exc, resolution=res))
    except Exception as exc:  # noqa: BLE001
        errors.append(_error("similarity", exc, resolution=res))
    return row, result, data


def run_pipeline(cfg: ExperimentConfig) -> ExperimentOutput:
    """Reduce, verify the factorization, pass to the Beltrami system and factor out e^s, per resolution."""
    errors: List[Dict[str, Any]] = []
    coeffs = cfg.coefficient_set()
    rows = []
    last = None
    for res in cfg.resolutions:
        row, result, data = _pipeline_resolution(cfg, coeffs, res, errors)
        rows.append(row)
        if result is not None and data is not None:
            last = (result, data)
    fact = [r.get("factorization_residual") for r in rows]
    bel = [r.get("beltrami_residual") for r in rows]
    stream = [r.get("stream_bound_ratio") for r in rows]
    report: Dict[str, Any] = {
        "kind": "pipeline",
        "config": cfg.to_dict(),
        "coefficients": coeffs.name,
        "per_resolution": rows,
        "factorization_ratios": _ratios(fact),
        "beltrami_ratios": _ratios(bel),
        "stream_ratio_changes": [abs(b - a) / a if a and b is not None else None
                                 for a, b in zip(stream, stream[1:])],
        "errors": errors,
    }
    finest = rows[-1]
    for key in ("K", "kappa", "R1", "R2", "k_bound", "certificates"):
        if key in finest:
            report[key] = finest[key]
    if "similarity" in finest:
        report["divided_residual"] = finest["similarity"].get("divided_residual")
    out = ExperimentOutput("pipeline", report)
    if last is not None:
        out.rasters = _raster_dumps(*last)
        report["rasters"] = sorted(out.rasters)
    report["status"] = "failed" if errors else "ok"
    return out


# ---------------------------------------------------------------------------
# contraction scaling


def _loglog_slope(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    pts = [(a, b) for a, b in zip(x, y) if b is not None and a > 0 and b > 0 and math.isfinite(b)]
    if len(pts) < 2:
        return None
    lx, ly = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
    return float(np.polyfit(lx, ly, 1)[0])


def run_contraction_scaling(cfg: ExperimentConfig) -> ExperimentOutput:
    """Estimated norm of L0^-1 M on B_R and the empirical iteration factor, for each R."""
    coeffs = cfg.coefficient_set()
    res = cfg.resolutions[-1]
    rows = []
    errors: List[Dict[str, Any]] = []
    for R in cfg.radii:
        mesh = build_disk_mesh(cfg.point, R, res)
        L0 = assemble(mesh, coeffs, kind="L0")
        M = assemble(mesh, coeffs, kind="M", check=False)
        est = estimate_contraction_norm(L0, M, seed=cfg.seed)
        try:
            it = contraction_iterate(L0, M, RhsData(f=1.0))
            rows.append((R, est, it.contraction_factor, "ok" if it.converged else "max_iter"))
        except NoContractionError as exc:
            rows.append((R, est, None, "no_contraction"))
            errors.append(_error("contraction", exc, radius=R, fatal=False))
    norms = [r[1] for r in rows]
    flat = all(n <= 1e-12 for n in norms)
    slope = None if flat else _loglog_slope([r[0] for r in rows], norms)
    floor = 1.0 - 2.0 / coeffs.q
    flag = "undefined" if slope is None else ("ok" if slope >= floor - 0.1 else "below_floor")
    table = _csv(["R", "estimated_norm", "empirical_factor", "status"],
                 list(rows) + [("slope", slope, None, flag), ("floor", floor, None, "")])
    report = {
        "kind": "contraction_scaling",
        "config": cfg.to_dict(),
        "coefficients": coeffs.name,
        "resolution": res,
        "rows": [{"R": r[0], "estimated_norm": r[1], "empirical_factor": r[2], "status": r[3]} for r in rows],
        "slope": slope,
        "slope_flag": flag,
        "floor": floor,
        "notes": [e for e in errors],
        "errors": [],
        "status": "ok",
    }
    return ExperimentOutput("contraction_scaling", report, {"contraction.csv": table})


# ---------------------------------------------------------------------------
# unique-continuation measurements


@dataclass(frozen=True)
class NormProfile:
    """L^2 and L^inf norms of u on B_r(x0) over a radii schedule, with the fitted vanishing order."""

    radii: Tuple[float, ...]
    l2_norms: Tuple[float, ...]
    linf_norms: Tuple[float, ...]
    fitted_slope: Optional[float]
    fitted_order: Optional[float]
    window: Tuple[float, ...] = ()
    identically_zero: bool = False
    local_slopes: Tuple[Optional[float], ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_csv(self) -> str:
        rows = [(r, a, b, r in self.window) for r, a, b in zip(self.radii, self.l2_norms, self.linf_norms)]
        rows.append(("fitted_order", self.fitted_order, None, None))
        return _csv(["r", "l2_norm", "linf_norm", "in_fit_window"], rows)


def norm_profile(u: Any, mesh: Mesh, x0: Sequence[float], radii: Sequence[float]) -> NormProfile:
    """Profile of a field-like ``u`` on disks B_r(x0); the fit window drops r < 5h and the largest r."""
    x0 = np.asarray(x0, dtype=float)
    l2 = tuple(lp_norm(mesh, u, 2, (x0, r)) for r in radii)
    linf = tuple(lp_norm(mesh, u, np.inf, (x0, r)) for r in radii)
    if all(n < ZERO_LEVEL for n in l2):
        return NormProfile(tuple(radii), l2, linf, None, None, (), True)
    rmax = max(radii)
    window = tuple(r for r in radii if r >= FIT_FLOOR_CELLS * mesh.h and r < rmax)
    if len(window) < 2:
        window = tuple(r for r in radii if r < rmax) if len(radii) > 2 else tuple(radii)
    sel = [i for i, r in enumerate(radii) if r in window]
    slope = _loglog_slope([radii[i] for i in sel], [l2[i] for i in sel])
    local = tuple(_loglog_slope([a, b], [na, nb]) for a, b, na, nb in zip(radii, radii[1:], l2, l2[1:]))
    order = None if slope is None else slope - 1.0
    return NormProfile(tuple(radii), l2, linf, slope, order, window, False, local)


class _Polynomial:
    def __init__(self, n: int, x0: np.ndarray, scale: float = 1.0):
        self.n, self.x0, self.scale = n, x0, scale

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        z = (xy[:, 0] - self.x0[0]) + 1j * (xy[:, 1] - self.x0[1])
        return self.scale * np.real(z ** self.n)


def _solution(cfg: ExperimentConfig, res: int) -> Tuple[Any, Mesh, Dict[str, Any]]:
    """Solution recipe of the config on a mesh of the disk at resolution ``res``."""
    recipe = cfg.solution
    kind = recipe["kind"]
    x0 = cfg.point
    if kind in ("polynomial", "constant", "zero"):
        mesh = build_disk_mesh(cfg.center, cfg.radius, res)
        if kind == "polynomial":
            return _Polynomial(int(recipe["n"]), x0), mesh, {}
        value = 0.0 if kind == "zero" else float(recipe.get("value", 1.0))
        return (lambda xy: np.full(len(xy), value)), mesh, {}

    coeffs = cfg.coefficient_set()
    info: Dict[str, Any] = {}
    if kind == "discrete":
        mesh = build_disk_mesh(cfg.center, cfg.radius, res)
        op = assemble(mesh, coeffs, kind="L")

        def solve(g: Callable[[np.ndarray], np.ndarray]) -> FemFunction:
            return solve_dirichlet(op, RhsData(boundary_values=FemFunction.interpolate(mesh, g)))
    else:
        result = reduce(coeffs, (cfg.center, cfg.radius), cfg.reduction_parameters(res))
        mesh = result.mesh
        info["R2"] = result.R2

        def solve(g: Callable[[np.ndarray], np.ndarray]) -> FemFunction:
            return solve_reduced(result, g)

    u1 = solve(lambda xy: xy[:, 0] - x0[0])
    u2 = solve(lambda xy: np.ones(len(xy)))
    a, b = float(u1.value_at(x0)), float(u2.value_at(x0))
    if abs(b) < 1e-12:
        raise DegenerateInputError("the constant-data solution vanishes at x0; cannot shape u(x0) = 0")
    u = FemFunction(mesh, u1.values - (a / b) * u2.values)
    info["u_at_x0"] = float(u.value_at(x0))
    return u, mesh, info


def run_vanishing_order(cfg: ExperimentConfig) -> ExperimentOutput:
    """Norm profile of the recipe solution and its fitted vanishing order at every resolution."""
    errors: List[Dict[str, Any]] = []
    profiles: List[Tuple[int, NormProfile, Dict[str, Any]]] = []
    for res in cfg.resolutions:
        try:
            u, mesh, info = _solution(cfg, res)
            if max(cfg.radii) > mesh.radius - float(np.hypot(*(cfg.point - mesh.center))) + 1e-12:
                raise InvalidConfig(f"radii exceed the reduced disk of radius {mesh.radius}")
            profiles.append((res, norm_profile(u, mesh, cfg.point, cfg.radii), info))
        except InvalidConfig:
            raise
        except Exception as exc:  # noqa: BLE001
            errors.append(_error("solve", exc, resolution=res))
    orders = [p.fitted_order for _, p, _ in profiles]
    change = None
    if len(orders) >= 2 and orders[-1] is not None and orders[-2] is not None:
        change = abs(orders[-1] - orders[-2]) / max(abs(orders[-1]), 1e-12)
    report: Dict[str, Any] = {
        "kind": "vanishing_order",
        "config": cfg.to_dict(),
        "per_resolution": [{"resolution": r, **p.to_dict(), **info} for r, p, info in profiles],
        "fitted_order": orders[-1] if orders else None,
        "order_change": change,
        "identically_zero": bool(profiles) and profiles[-1][1].identically_zero,
        "errors": errors,
        "status": "failed" if errors else "ok",
    }
    tables = {"vanishing_order.csv": profiles[-1][1].to_csv()} if profiles else {}
    return ExperimentOutput("vanishing_order", report, tables)


def run_doubling(cfg: ExperimentConfig) -> ExperimentOutput:
    """Ratios ||u||_{L^2(B_2r)} / ||u||_{L^2(B_r)} over the schedule (finest resolution)."""
    res = cfg.resolutions[-1]
    errors: List[Dict[str, Any]] = []
    rows = []
    try:
        u, mesh, info = _solution(cfg, res)
    except Exception as exc:  # noqa: BLE001
        errors.append(_error("solve", exc, resolution=res))
        u = None
    if u is not None:
        for r in cfg.radii:
            small = lp_norm(mesh, u, 2, (cfg.point, r))
            big = lp_norm(mesh, u, 2, (cfg.point, 2 * r))
            if small < ZERO_LEVEL:
                rows.append((r, small, big, None, "degenerate"))
            else:
                rows.append((r, small, big, big / small, "ok"))
    ratios = [row[3] for row in rows if row[3] is not None]
    max_ratio = max(ratios) if ratios else None
    table = _csv(["r", "norm_r", "norm_2r", "ratio", "status"], rows + [("max_ratio", max_ratio, None, None, "")])
    report = {
        "kind": "doubling",
        "config": cfg.to_dict(),
        "resolution": res,
        "rows": [dict(zip(("r", "norm_r", "norm_2r", "ratio", "status"), row)) for row in rows],
        "max_ratio": max_ratio,
        "errors": errors,
        "status": "failed" if errors else "ok",
    }
    return ExperimentOutput("doubling", report, {"doubling.csv": table})


def three_sphere_exponent(n_rho: float, n_r: float, n_R: float) -> Optional[float]:
    """Largest theta in [0, 1] with n_r <= n_rho^theta n_R^(1 - theta); None if degenerate."""
    if min(n_rho, n_r, n_R) < ZERO_LEVEL or n_R <= n_rho:
        return None
    theta = math.log(n_R / n_r) / math.log(n_R / n_rho)
    return min(1.0, max(0.0, theta))


def run_three_spheres(cfg: ExperimentConfig) -> ExperimentOutput:
    """Log-interpolation exponent theta* for each triple rho < r < R (finest resolution)."""
    res = cfg.resolutions[-1]
    errors: List[Dict[str, Any]] = []
    rows = []
    try:
        u, mesh, info = _solution(cfg, res)
    except Exception as exc:  # noqa: BLE001
        errors.append(_error("solve", exc, resolution=res))
        u = None
    if u is not None:
        cache: Dict[float, float] = {}

        def nrm(r: float) -> float:
            if r not in cache:
                cache[r] = lp_norm(mesh, u, 2, (cfg.point, r))
            return cache[r]

        for rho, r, R in cfg.three_sphere_triples():
            a, b, c = nrm(rho), nrm(r), nrm(R)
            theta = three_sphere_exponent(a, b, c)
            rows.append((rho, r, R, a, b, c, theta, "ok" if theta is not None else "degenerate"))
    thetas = [row[6] for row in rows if row[6] is not None]
    min_theta = min(thetas) if thetas else None
    header = ["rho", "r", "R", "norm_rho", "norm_r", "norm_R", "theta", "status"]
    table = _csv(header, rows + [("min_theta", min_theta, None, None, None, None, None, "")])
    report = {
        "kind": "three_spheres",
        "config": cfg.to_dict(),
        "resolution": res,
        "rows": [dict(zip(header, row)) for row in rows],
        "min_theta": min_theta,
        "errors": errors,
        "status": "failed" if errors else "ok",
    }
    return ExperimentOutput("three_spheres", report, {"three_spheres.csv": table})


_RUNNERS = {
    "pipeline": run_pipeline,
    "contraction_scaling": run_contraction_scaling,
    "vanishing_order": run_vanishing_order,
    "doubling": run_doubling,
    "three_spheres": run_three_spheres,
}


def run(cfg: ExperimentConfig) -> ExperimentOutput:
    return _RUNNERS[cfg.kind](cfg)
