import math

import numpy as np
import pytest
from scipy.special import i0, i1

from uc2d.fields import BUILTIN_NAMES, CoefficientSet, builtin, check_ellipticity
from uc2d.mesh import FemFunction, Points, build_disk_mesh, lp_norm, quadrature, sample
from uc2d.reduction import (EllipticityFailure, InvalidMultiplierError, RadiusExhaustedError, ReductionParameters,
                            build_multiplier, hat_coefficients, hat_set, reduce, solve_reduced,
                            tilde_coefficients, verify_factorization)

UNIT = ((0.0, 0.0), 1.0)


def bessel_m(delta, R):
    k = math.sqrt(delta)
    return lambda x: i0(k * np.hypot(x[:, 0], x[:, 1])) / i0(k * R)


def test_parameter_defaults():
    p = ReductionParameters().resolved(8.0)
    assert (p.p, p.t) == (4.0, 3.0)
    p = ReductionParameters().resolved(3.0)
    assert p.p == 2.5 and p.t == 2.25
    with pytest.raises(ValueError):
        ReductionParameters(p=5.0).resolved(4.0)
    with pytest.raises(ValueError):
        ReductionParameters(max_halvings=-1).resolved(4.0)


def test_identity_multipliers_are_one():
    r = reduce(builtin("identity"), UNIT, ReductionParameters(resolution=32))
    np.testing.assert_allclose(r.m.values, 1.0, atol=1e-14)
    np.testing.assert_allclose(r.w.values, 1.0, atol=1e-14)
    assert r.R1 == r.R2 == 1.0
    pts = quadrature(r.mesh).points
    np.testing.assert_allclose(sample(r.A_hat, pts), np.broadcast_to(np.eye(2), (len(pts.xy), 2, 2)), atol=1e-13)
    assert np.max(np.abs(sample(r.B_hat, pts))) <= 1e-12


@pytest.mark.parametrize("res", [64, 128])
def test_constant_d_matches_bessel(res):
    r = reduce(builtin("constant_d"), UNIT, ReductionParameters(resolution=res))
    exact = bessel_m(2.0, r.R1)(r.m.mesh.vertices)
    assert np.max(np.abs(r.m.values - exact)) / np.max(exact) <= 0.01


def test_large_delta_shrinks_radius():
    mult = build_multiplier(builtin("constant_d", {"delta": 50.0}), UNIT, ReductionParameters(resolution=32))
    assert mult.R_used < 1.0
    assert mult.halvings == round(math.log2(1.0 / mult.R_used))
    assert mult.sup_z <= 0.5
    # the oracle predicts acceptance at R = 1/4
    assert mult.R_used == 0.25
    assert 1 - i0(math.sqrt(50) * 0.5) ** -1 > 0.5 >= 1 - i0(math.sqrt(50) * 0.25) ** -1


def test_radius_exhausted():
    cs = builtin("constant_d", {"delta": 50.0})
    with pytest.raises(RadiusExhaustedError) as exc:
        build_multiplier(cs, UNIT, ReductionParameters(max_halvings=0, resolution=16))
    assert exc.value.best_sup_z > 0.5


def test_target_radius_validated():
    with pytest.raises(ValueError):
        build_multiplier(builtin("identity"), UNIT, ReductionParameters(R_target=2.0, resolution=16))


def test_invalid_multiplier_rejected():
    mesh = build_disk_mesh((0, 0), 1.0, 16)
    with pytest.raises(InvalidMultiplierError):
        tilde_coefficients(CoefficientSet(), FemFunction(mesh, np.full(mesh.n_vertices, 3.0)))
    with pytest.raises(InvalidMultiplierError):
        hat_coefficients(CoefficientSet(), FemFunction(mesh, np.ones(mesh.n_vertices)),
                         FemFunction(mesh, np.full(mesh.n_vertices, 0.1)))


def test_ellipticity_failure_reported():
    mesh = build_disk_mesh((0, 0), 1.0, 16)
    low = FemFunction(mesh, np.full(mesh.n_vertices, 0.485))
    # m w A = 0.235 I, just under the 1/(4K) = 1/4 floor
    with pytest.raises(EllipticityFailure) as exc:
        hat_coefficients(CoefficientSet(), low, low)
    assert exc.value.eigenvalue < 0.25


def test_tilde_transpose_for_unit_multiplier():
    cs = builtin("rotation_nonsym")
    mesh = build_disk_mesh((0, 0), 1.0, 16)
    one = FemFunction(mesh, np.ones(mesh.n_vertices))
    t = tilde_coefficients(cs, one)
    pts = quadrature(mesh).points
    np.testing.assert_allclose(sample(t.A, pts), np.swapaxes(cs.A(pts.xy), 1, 2), atol=1e-14)
    np.testing.assert_allclose(sample(t.B, pts), cs.C(pts.xy), atol=1e-14)
    np.testing.assert_allclose(sample(t.C, pts), cs.B(pts.xy), atol=1e-14)


def test_tilde_drift_is_minus_grad_m():
    r = reduce(builtin("constant_d"), UNIT, ReductionParameters(resolution=64))
    k = math.sqrt(2.0)

    def grad_exact(x):
        rad = np.hypot(x[:, 0], x[:, 1])
        g = k * i1(k * rad) / i0(k * r.R1)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(rad[:, None] > 0, x / rad[:, None], 0.0)
        return g[:, None] * unit

    mesh = r.m.mesh
    err = lp_norm(mesh, lambda x: sample(r.B_tilde, Points(x, mesh)) + grad_exact(x), 2)
    assert err <= 0.05 * lp_norm(mesh, grad_exact, 2)
    assert np.max(np.abs(sample(r.C_tilde, quadrature(mesh).points))) == 0.0


def test_hat_coefficients_pointwise():
    cs = builtin("full_lower_order")
    r = reduce(cs, UNIT, ReductionParameters(resolution=32))
    pts = quadrature(r.mesh).points
    A, B, C, _ = cs.evaluate(pts)
    m, w = r.m.sample(pts), r.w.sample(pts)
    gm, gw = r.m.projected_gradient().sample(pts), r.w.projected_gradient().sample(pts)
    Ah = (m * w)[:, None, None] * A
    Bh = (w[:, None] * np.einsum("nij,nj->ni", A, gm) + (m * w)[:, None] * B
          - m[:, None] * np.einsum("nji,nj->ni", A, gw) - (m * w)[:, None] * C)
    np.testing.assert_allclose(sample(r.A_hat, pts), Ah, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(sample(r.B_hat, pts), Bh, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_reduce_corpus_certificates(name):
    r = reduce(builtin(name), UNIT, ReductionParameters(resolution=32))
    d = r.diagnostics
    for key in ("m_min", "w_min"):
        assert d[key] >= 0.48
    for key in ("m_max", "w_max"):
        assert d[key] <= 2.02
    assert r.R2 <= r.R1 <= 1.0
    assert d["K_tilde_ok"] and d["K_hat_ok"]
    assert d["bounds_ok"]
    # the w-mesh sits inside the m-mesh
    assert np.all(np.hypot(*r.mesh.vertices.T) <= r.R1 * (1 + 1e-12))
    pts = quadrature(r.mesh).points
    assert check_ellipticity(r.A_hat, pts) <= 4 * d["K"] * (1 + 1e-9)


def test_factorization_identity_exact():
    cs = builtin("identity")
    r = reduce(cs, UNIT, ReductionParameters(resolution=32))
    assert verify_factorization(cs, r, trials=20) <= 1e-12


def test_factorization_converges_constant_d():
    cs = builtin("constant_d")
    res = [verify_factorization(cs, reduce(cs, UNIT, ReductionParameters(resolution=n))) for n in (32, 64)]
    assert res[0] / res[1] >= 1.7


def test_factorization_seeded():
    cs = builtin("full_lower_order")
    r = reduce(cs, UNIT, ReductionParameters(resolution=16))
    assert verify_factorization(cs, r, seed=3) == verify_factorization(cs, r, seed=3)


def test_reduced_solve_reproduces_affine_for_identity():
    r = reduce(builtin("identity"), UNIT, ReductionParameters(resolution=16))
    v = solve_reduced(r, lambda x: 2 * x[:, 0] - x[:, 1])
    np.testing.assert_allclose(v.values, 2 * r.mesh.vertices[:, 0] - r.mesh.vertices[:, 1], atol=1e-10)
    hs = hat_set(r)
    assert hs.C(np.zeros((3, 2))).shape == (3, 2) and not hs.d(np.zeros((3, 2))).any()


def test_to_dict_has_diagnostics():
    r = reduce(builtin("constant_d"), UNIT, ReductionParameters(resolution=16))
    d = r.to_dict()
    assert d["R1"] == r.R1 and d["p"] == 3.0 and "sup_z_m" in d
