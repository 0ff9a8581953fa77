import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uc2d.fields import (BUILTIN_NAMES, J, CoefficientSet, NonEllipticError, builtin, check_ellipticity,
                         coefficients_from_raster, lower_order_norms, read_raster, validate_declared,
                         write_coefficient_raster, write_raster)
from uc2d.mesh import Points, build_disk_mesh

SAMPLES = Points(np.random.default_rng(0).uniform(-0.7, 0.7, (200, 2)))


def const(M):
    return lambda x: np.broadcast_to(np.asarray(M, dtype=float), (len(x),) + np.shape(M)).copy()


def test_identity_K():
    assert check_ellipticity(const(np.eye(2)), SAMPLES) == pytest.approx(1.0)


def test_diagonal_K():
    assert check_ellipticity(const(np.diag([2.0, 0.5])), SAMPLES) == pytest.approx(2.0)


def test_rotation_K():
    # sym(A) = I and sym(A^-1) = I/2
    A = np.array([[1.0, 1.0], [-1.0, 1.0]])
    assert np.allclose(0.5 * (np.linalg.inv(A) + np.linalg.inv(A).T), 0.5 * np.eye(2))
    assert check_ellipticity(const(A), SAMPLES) == pytest.approx(2.0)


def test_non_elliptic_reports_point():
    def A(x):
        out = np.tile(np.eye(2), (len(x), 1, 1))
        out[:, 1, 1] = np.where(x[:, 0] > 0.5, -1.0, 1.0)
        return out

    with pytest.raises(NonEllipticError) as exc:
        check_ellipticity(A, SAMPLES)
    assert exc.value.point is not None and exc.value.point[0] > 0.5


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(-2, 2), st.floats(0.1, 3.0), st.floats(-1.5, 1.5))
def test_transpose_invariance(a, b, c, skew):
    S = np.array([[a, b], [b, c]])
    if np.linalg.eigvalsh(S).min() <= 1e-3:
        return
    A = S + skew * J
    k1 = check_ellipticity(const(A), SAMPLES)
    k2 = check_ellipticity(const(A.T), SAMPLES)
    assert k1 == pytest.approx(k2, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 20.0))
def test_scalar_multiple_of_identity(c):
    assert check_ellipticity(const(c * np.eye(2)), SAMPLES) == pytest.approx(max(c, 1 / c), rel=1e-12)


def test_lower_order_norms_zero():
    assert lower_order_norms(CoefficientSet(), ((0, 0), 1.0)) == 0.0


def test_lower_order_norms_constant_B():
    cs = CoefficientSet(B=const([1.0, 0.0]), q=4)
    assert lower_order_norms(cs, ((0, 0), 1.0), resolution=128) == pytest.approx(math.pi ** 0.25, rel=2e-3)


def test_lower_order_norms_constant_d():
    cs = CoefficientSet(d=lambda x: np.ones(len(x)), q=4)
    assert lower_order_norms(cs, ((0, 0), 1.0), resolution=128) == pytest.approx(math.sqrt(math.pi), rel=2e-3)


@pytest.mark.parametrize("lam", [0.5, 2.0, 3.7])
def test_lower_order_norms_homogeneous(lam):
    base = builtin("full_lower_order")
    B, C = base.B, base.C
    scaled = CoefficientSet(A=base.A, B=lambda x: lam * B(x), C=lambda x: lam * C(x), q=base.q)
    plain = CoefficientSet(A=base.A, B=B, C=C, q=base.q)
    mesh = build_disk_mesh((0, 0), 1.0, 32)
    assert lower_order_norms(scaled, ((0, 0), 1.0), mesh) == pytest.approx(
        lam * lower_order_norms(plain, ((0, 0), 1.0), mesh), rel=1e-12)


def test_builtin_identity():
    cs = builtin("identity")
    A, B, C, d = cs.evaluate(SAMPLES)
    assert np.all(A == np.eye(2)) and not B.any() and not C.any() and not d.any()
    assert check_ellipticity(cs.A, SAMPLES) == 1.0


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_builtin_rotation_nonsym(t):
    cs = builtin("rotation_nonsym", {"t": t})
    A = cs.evaluate(SAMPLES)[0]
    np.testing.assert_allclose(A, np.broadcast_to(np.eye(2) + t * J, A.shape))
    assert check_ellipticity(cs.A, SAMPLES) == pytest.approx(1 + t * t, rel=1e-12)


def test_builtin_singular_profile():
    cs = builtin("singular_lower_order", {"q": 4, "eps": 0.4})
    x0 = np.array(cs.params.get("x0", (0.1, -0.05)))
    near = x0 + np.array([[1e-12, 0.0], [0.0, 1e-11]])
    assert np.max(np.linalg.norm(cs.B(near), axis=1)) >= 1e3
    assert np.isfinite(lower_order_norms(cs, ((0, 0), 1.0), resolution=64))


def test_builtin_singular_requires_integrability():
    with pytest.raises(ValueError):
        builtin("singular_lower_order", {"q": 4, "eps": 0.6})


def test_builtin_unknown_name_lists_valid():
    with pytest.raises(ValueError, match="rotation_nonsym"):
        builtin("nope")


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_elliptic_and_shapes(name):
    cs = builtin(name)
    A, B, C, d = cs.evaluate(SAMPLES)
    assert A.shape == (200, 2, 2) and B.shape == (200, 2) and C.shape == (200, 2) and d.shape == (200,)
    assert 1.0 <= check_ellipticity(cs.A, build_disk_mesh((0, 0), 1, 16)) < 10


def test_checkerboard_is_nonsymmetric_and_rough():
    cs = builtin("mollified_checkerboard", {"contrast": 9, "width": 0.05})
    A = cs.evaluate(SAMPLES)[0]
    assert not np.allclose(A, np.swapaxes(A, 1, 2))
    a = A[:, 0, 0]
    assert a.max() / a.min() > 5


def test_validate_declared():
    cs = CoefficientSet(declared_K=2.0, declared_kappa=1.0)
    assert validate_declared(cs, 2.01, 0.5) == {"K_ok": True, "kappa_ok": True}
    assert validate_declared(cs, 2.1, 1.2) == {"K_ok": False, "kappa_ok": False}


def test_raster_round_trip(tmp_path):
    cs = builtin("full_lower_order")
    path = tmp_path / "c.raster"
    write_coefficient_raster(path, cs, (-1, 1, -1, 1), (41, 41))
    back = coefficients_from_raster(path, q=4)
    pts = Points(np.random.default_rng(1).uniform(-0.9, 0.9, (50, 2)))
    for a, b in zip(cs.evaluate(pts), back.evaluate(pts)):
        np.testing.assert_allclose(a, b, atol=5e-3)
    # grid nodes are reproduced exactly
    node = Points(np.array([[-1.0, -1.0], [0.5, 0.0]]))
    for a, b in zip(cs.evaluate(node), back.evaluate(node)):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_raster_clamps_outside_box(tmp_path):
    path = tmp_path / "s.raster"
    x = np.linspace(0, 1, 3)
    write_raster(path, x, x, np.arange(9.0))
    r = read_raster(path)
    assert r(np.array([[5.0, 5.0]]))[0, 0] == 8.0


def test_raster_malformed(tmp_path):
    bad = tmp_path / "bad.raster"
    bad.write_text("uc2d-raster 1\n2 2 1\n0 1 0 1\n1\n2\n3\n")
    with pytest.raises(ValueError):
        read_raster(bad)
    bad.write_text("hello\n")
    with pytest.raises(ValueError):
        read_raster(bad)
