"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""
import functools
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import i0

from uc2d.beltrami import dilatations
from uc2d.fields import BUILTIN_NAMES, J, builtin, ellipticity_profile
from uc2d.lab import ExperimentConfig, run, write_outputs
from uc2d.mesh import quadrature, sample
from uc2d.reduction import ReductionParameters, reduce, verify_factorization

RESOLUTIONS = (32, 64, 128)
UNIT = ((0.0, 0.0), 1.0)
ROUGH = tuple(n for n in BUILTIN_NAMES if n != "identity")

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


@functools.lru_cache(maxsize=None)
def pipeline(name):
    cfg = ExperimentConfig.from_dict({"coefficients": {"builtin": name}, "resolutions": list(RESOLUTIONS)},
                                     "pipeline")
    return run(cfg).report


def criterion_1():
    ok, parts = True, []
    for name in ("identity", "constant_d", "rotation_nonsym", "full_lower_order"):
        cs = builtin(name)
        t0 = time.perf_counter()
        res = [verify_factorization(cs, reduce(cs, UNIT, ReductionParameters(resolution=n)), trials=20, seed=0)
               for n in RESOLUTIONS]
        elapsed = time.perf_counter() - t0
        if name == "identity":
            good = max(res) <= 1e-12
            parts.append(f"{name} max={max(res):.1e}")
        else:
            ratios = [a / b for a, b in zip(res, res[1:])]
            good = all(r >= 1.5 for r in ratios)
            parts.append(f"{name} ratios={'/'.join(f'{r:.2f}' for r in ratios)}")
        ok &= good and elapsed <= 120
    return ok, "; ".join(parts)


def criterion_2():
    lo, hi = math.inf, -math.inf
    for name in BUILTIN_NAMES:
        r = reduce(builtin(name), UNIT, ReductionParameters(resolution=64))
        lo = min(lo, r.m.values.min(), r.w.values.min())
        hi = max(hi, r.m.values.max(), r.w.values.max())
    r = reduce(builtin("constant_d"), UNIT, ReductionParameters(resolution=128))
    k = math.sqrt(2.0)
    exact = i0(k * np.hypot(*r.m.mesh.vertices.T)) / i0(k * r.R1)
    err = float(np.max(np.abs(r.m.values - exact)) / np.max(np.abs(exact)))
    ok = lo >= 0.48 and hi <= 2.02 and err <= 0.01
    return ok, f"m,w in [{lo:.3f}, {hi:.3f}]; Bessel rel Linf err {err:.1e}"


def _random_elliptic(rng, count, kmax=10.0):
    out = []
    while sum(len(a) for a in out) < count:
        n = 4 * count
        theta = rng.uniform(0, np.pi, n)
        c, s = np.cos(theta), np.sin(theta)
        Rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        lam = np.exp(rng.uniform(-1.2, 1.2, (n, 2)))
        S = Rot @ (lam[:, :, None] * np.swapaxes(Rot, 1, 2))
        A = S + rng.uniform(-2.0, 2.0, n)[:, None, None] * J
        la, li = ellipticity_profile(A)
        K = 1.0 / np.minimum(la, li)
        out.append(A[K <= kmax])
    return np.concatenate(out)[:count]


def criterion_3():
    A = _random_elliptic(np.random.default_rng(0), 10_000)
    mu, nu = dilatations(A)
    worst = float(np.max(np.abs(mu) + np.abs(nu)))
    for name in BUILTIN_NAMES:
        r = reduce(builtin(name), UNIT, ReductionParameters(resolution=64))
        Ah = np.asarray(sample(r.A_hat, quadrature(r.mesh).points)).reshape(-1, 2, 2)
        m, n = dilatations(Ah)
        worst = max(worst, float(np.max(np.abs(m) + np.abs(n))))
    iso = 0.0
    for s in np.geomspace(0.01, 100, 41):
        m, n = dilatations(s * np.eye(2))
        iso = max(iso, abs(m), abs(abs(n) - abs(1 - s) / (1 + s)))
    return worst < 1 and iso <= 1e-12, f"max |mu|+|nu| = {worst:.4f}; isotropic oracle err {iso:.1e}"


def criterion_4():
    ident = pipeline("identity")["per_resolution"]
    ok = all(row["beltrami_residual"] <= 1e-8 for row in ident)
    worst = math.inf
    for name in ROUGH:
        ratios = pipeline(name)["beltrami_ratios"]
        worst = min(worst, *[r if r is not None else 0.0 for r in ratios])
    ok &= worst >= 1.5
    return ok, f"identity max {max(r['beltrami_residual'] for r in ident):.1e}; min ratio {worst:.2f}"


def criterion_5():
    cfg = ExperimentConfig.from_dict({"coefficients": {"builtin": "full_lower_order", "parameters": {"q": 4}},
                                      "radii": [0.4, 0.2, 0.1, 0.05], "resolutions": [32]},
                                     "contraction_scaling")
    rep = run(cfg).report
    slope = rep["slope"]
    return slope is not None and slope >= 0.4, f"slope {slope:.3f} (q = 4)"


def _profile(raw, kind):
    return run(ExperimentConfig.from_dict(raw, kind)).report


def criterion_6():
    ok, parts = True, []
    for n in (1, 2, 3):
        rep = _profile({"solution": {"kind": "polynomial", "n": n}, "resolutions": [128]}, "vanishing_order")
        order = rep["fitted_order"]
        ok &= abs(order - n) <= 0.05 * n
        parts.append(f"n={n}: {order:.3f}")
    rep = _profile({"solution": {"kind": "polynomial", "n": 2}, "resolutions": [128]}, "doubling")
    ratios = [row["ratio"] for row in rep["rows"]]
    ok &= all(abs(r - 8.0) <= 0.4 for r in ratios)
    parts.append(f"doubling n=2 in [{min(ratios):.3f}, {max(ratios):.3f}]")
    return ok, "; ".join(parts)


def criterion_7():
    ok, err = True, 0.0
    for n in (1, 2, 3):
        rep = _profile({"solution": {"kind": "polynomial", "n": n}, "resolutions": [128]}, "three_spheres")
        for row in rep["rows"]:
            expected = math.log(row["R"] / row["r"]) / math.log(row["R"] / row["rho"])
            e = abs(row["theta"] - expected) / expected
            err = max(err, e)
    ok &= err <= 0.02
    lo, hi = 1.0, 0.0
    for name in ROUGH:
        rep = _profile({"coefficients": {"builtin": name}, "resolutions": [128]}, "three_spheres")
        thetas = [row["theta"] for row in rep["rows"]]
        if any(t is None for t in thetas):
            ok = False
            continue
        lo, hi = min(lo, *thetas), max(hi, *thetas)
    ok &= 0.01 < lo and hi < 0.99
    return ok, f"polynomial max rel err {err:.1e}; rough theta* in [{lo:.3f}, {hi:.3f}]"


def criterion_8():
    worst = 0.0
    for name in BUILTIN_NAMES:
        changes = pipeline(name)["stream_ratio_changes"]
        if any(c is None for c in changes):
            return False, f"{name}: stream ratio missing"
        worst = max(worst, *changes)
    return worst <= 0.2, f"max change under doubling {worst:.2%}"


def criterion_9():
    ok, parts = True, []
    for name in BUILTIN_NAMES:
        rep = _profile({"coefficients": {"builtin": name}, "resolutions": list(RESOLUTIONS)}, "vanishing_order")
        finest = rep["per_resolution"][-1]
        order = rep["fitted_order"]
        local = [s for s in finest["local_slopes"] if s is not None]
        finite = order is not None and math.isfinite(order) and len(local) == len(finest["radii"]) - 1
        stable = rep["order_change"] is not None and rep["order_change"] <= 0.05
        # superpolynomial decay would make the local slopes blow up as r shrinks
        bounded = finite and max(local) <= 2.0 * (order + 1.0)
        ok &= bool(finite and stable and bounded and not rep["errors"])
        parts.append(f"{name} {order:.2f}")
    zero = _profile({"solution": {"kind": "zero"}, "resolutions": [32]}, "vanishing_order")
    ok &= zero["identically_zero"] is True
    return ok, "orders " + ", ".join(parts) + f"; zero flag {zero['identically_zero']}"


def criterion_10():
    configs = [
        ({"coefficients": {"builtin": "mollified_checkerboard"}, "resolutions": [32, 64]}, "pipeline"),
        ({"coefficients": {"builtin": "singular_lower_order"}, "resolutions": [32]}, "contraction_scaling"),
        ({"coefficients": {"builtin": "rotation_nonsym"}, "resolutions": [32, 64]}, "vanishing_order"),
        ({"coefficients": {"builtin": "full_lower_order"}, "resolutions": [64], "seed": 7}, "doubling"),
        ({"coefficients": {"builtin": "anisotropic"}, "resolutions": [64]}, "three_spheres"),
    ]
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        for i, (raw, kind) in enumerate(configs):
            files = []
            for rep in ("a", "b"):
                out = run(ExperimentConfig.from_dict(raw, kind))
                files.append(write_outputs(out, str(Path(tmp) / f"{i}{rep}")))
            ok &= [p.name for p in files[0]] == [p.name for p in files[1]]
            ok &= all(a.read_bytes() == b.read_bytes() for a, b in zip(*files))
    return ok, f"{len(configs)} experiments rerun byte-identically" if ok else "outputs differ"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


@pytest.mark.parametrize("n", range(1, 11))
def test_criterion(n):
    ok, detail = CRITERIA[n - 1]()
    assert record(n, ok, detail), detail


if __name__ == "__main__":
    failed = 0
    for i, check in enumerate(CRITERIA, 1):
        ok, detail = check()
        failed += not record(i, ok, detail)
    raise SystemExit(1 if failed else 0)
