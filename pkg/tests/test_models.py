from __future__ import annotations

import numpy as np
import pytest

from wavecurves.models import (
    CoreyQuadParams,
    IcdowParams,
    buckley_leverett_model,
    build_model,
    corey_model,
    corey_umbilic_point,
    crossing_pencil_model,
    fd_hessian_from_jacobian,
    fd_jacobian,
    fold_pencil_model,
    icdow_model,
    synthetic_pencil_model,
)

ALL_MODELS = [
    corey_model(),
    corey_model(CoreyQuadParams(2.0, 1.0, 1.0)),
    buckley_leverett_model(),
    buckley_leverett_model(mobility_ratio=2.0),
    icdow_model(),
    fold_pencil_model(),
    crossing_pencil_model(),
]


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.name)
def test_jacobians_match_finite_differences(model):
    rng = np.random.default_rng(42)
    for U in model.sample_states(40, rng):
        JF = model.jacobian_F(U)
        JG = model.jacobian_G(U)
        scale = max(1.0, np.abs(JF).max())
        assert np.abs(JF - fd_jacobian(model.flux, U)).max() < 1e-6 * scale
        scale_g = max(1.0, np.abs(JG).max())
        assert np.abs(JG - fd_jacobian(model.accumulation, U)).max() < 1e-6 * scale_g


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.name)
def test_hessians_match_finite_differences(model):
    rng = np.random.default_rng(7)
    for U in model.sample_states(25, rng):
        HF = model.hessian_F(U)
        HG = model.hessian_G(U)
        # symmetry in the two differentiation axes
        assert np.abs(HF - HF.transpose(0, 2, 1)).max() < 1e-12
        assert np.abs(HG - HG.transpose(0, 2, 1)).max() < 1e-12
        scale = max(1.0, np.abs(HF).max())
        fd = fd_hessian_from_jacobian(model.jacobian_F, U)
        assert np.abs(HF - fd).max() < 1e-5 * scale
        fd_g = fd_hessian_from_jacobian(model.jacobian_G, U)
        assert np.abs(HG - fd_g).max() < 1e-5 * max(1.0, np.abs(HG).max())


def test_corey_fractional_flows_sum_to_one():
    model = corey_model(CoreyQuadParams(2.0, 0.5, 1.5))
    rng = np.random.default_rng(0)
    a, b, g = 2.0, 0.5, 1.5
    for U in model.sample_states(30, rng):
        u, v = U
        w = 1.0 - u - v
        D = a * u * u + b * v * v + g * w * w
        F = model.flux(U)
        assert abs(F[0] + F[1] + g * w * w / D - 1.0) < 1e-14


def test_corey_symmetric_point():
    # with equal weights the barycenter is a fixed point of the flux
    model = corey_model()
    F = model.flux(np.array([1 / 3, 1 / 3]))
    assert np.allclose(F, [1 / 3, 1 / 3], atol=1e-15)


def test_corey_umbilic_point_is_isotropic():
    for params in (CoreyQuadParams(), CoreyQuadParams(2.0, 1.0, 1.0)):
        model = corey_model(params)
        Ustar = corey_umbilic_point(params)
        A = model.jacobian_F(Ustar)
        # Jacobian is a multiple of the identity: both speeds coincide and
        # every direction is characteristic
        assert abs(A[0, 1]) < 1e-13 and abs(A[1, 0]) < 1e-13
        assert abs(A[0, 0] - A[1, 1]) < 1e-13


def test_corey_rejects_nonpositive_parameters():
    with pytest.raises(ValueError):
        CoreyQuadParams(alpha=0.0)


def test_buckley_flux_shape():
    model = buckley_leverett_model()
    # equal mobilities: f(1/2) = 1/2 and the inflection sits there too
    f_half = model.flux(np.array([0.5, 0.0]))[0]
    assert abs(f_half - 0.5) < 1e-14
    assert abs(model.hessian_F(np.array([0.5, 0.0]))[0, 0, 0]) < 1e-12
    # max derivative of the S-curve is 2, attained at u = 1/2
    assert abs(model.jacobian_F(np.array([0.5, 0.0]))[0, 0] - 2.0) < 1e-13


def test_icdow_accumulation_ignores_total_velocity():
    model = icdow_model()
    rng = np.random.default_rng(3)
    for U in model.sample_states(20, rng):
        JG = model.jacobian_G(U)
        assert np.all(JG[:, 2] == 0.0)
        U2 = U.copy()
        U2[2] += 0.37
        assert np.allclose(model.accumulation(U), model.accumulation(U2))


def test_icdow_flux_scales_linearly_with_total_velocity():
    model = icdow_model()
    U = np.array([0.4, 0.3, 1.3])
    U1 = np.array([0.4, 0.3, 1.0])
    assert np.allclose(model.flux(U), 1.3 * model.flux(U1), atol=1e-14)


def test_icdow_custom_fractional_flow_falls_back_to_differences():
    params = IcdowParams(fw=lambda s: s * s * (3 - 2 * s))  # smooth ramp
    model = icdow_model(params)
    rng = np.random.default_rng(11)
    for U in model.sample_states(10, rng):
        JF = model.jacobian_F(U)
        fd = fd_jacobian(model.flux, U)
        assert np.abs(JF - fd).max() < 1e-4


def test_synthetic_pencil_jacobians_at_origin():
    rng = np.random.default_rng(5)
    A0 = rng.standard_normal((3, 3))
    B0 = rng.standard_normal((3, 3))
    P = rng.standard_normal((3, 3, 3))
    model = synthetic_pencil_model(A0, B0, P)
    zero = np.zeros(3)
    assert np.allclose(model.jacobian_F(zero), A0, atol=1e-15)
    assert np.allclose(model.jacobian_G(zero), B0, atol=1e-15)
    # Jacobian varies linearly: slope along e_k is the symmetrized tensor
    Ps = 0.5 * (P + P.transpose(0, 2, 1))
    U = rng.standard_normal(3)
    expect = A0 + np.einsum("ijk,k->ij", Ps, U)
    assert np.allclose(model.jacobian_F(U), expect, atol=1e-14)


def test_synthetic_pencil_shape_validation():
    with pytest.raises(ValueError):
        synthetic_pencil_model(np.eye(2), np.eye(3))
    with pytest.raises(ValueError):
        synthetic_pencil_model(np.eye(2), np.eye(2), np.zeros((3, 3, 3)))


def test_fold_model_speeds():
    model = fold_pencil_model()
    # at v = 2 the speeds are 2 +/- sqrt(3)
    lams = np.sort(np.linalg.eigvals(model.jacobian_F(np.array([0.3, 2.0]))).real)
    assert np.allclose(lams, [2 - np.sqrt(3), 2 + np.sqrt(3)], atol=1e-12)
    # inside the strip |v| < 1 the speeds are complex
    lams_c = np.linalg.eigvals(model.jacobian_F(np.array([0.0, 0.0])))
    assert np.abs(lams_c.imag).max() > 0.5


def test_crossing_model_speeds():
    model = crossing_pencil_model(coupling=0.7, base_speed=1.0, slope=0.8)
    U = np.array([0.2, -0.5])
    lams = np.sort(np.linalg.eigvals(model.jacobian_F(U)).real)
    assert np.allclose(lams, sorted([0.2, 1.0 + 0.8 * (-0.5)]), atol=1e-13)


def test_sample_states_inside_domain_and_deterministic():
    model = corey_model()
    a = model.sample_states(15, np.random.default_rng(123))
    b = model.sample_states(15, np.random.default_rng(123))
    for Ua, Ub in zip(a, b):
        assert np.array_equal(Ua, Ub)
        assert model.domain(Ua)


def test_boundary_plane_value():
    model = corey_model()
    plane = model.boundary_planes[2]  # u + v = 1
    assert plane.value(np.array([0.6, 0.4])) == pytest.approx(0.0, abs=1e-15)
    assert plane.value(np.array([0.1, 0.1])) < 0.0


def test_build_model_registry():
    assert build_model("corey", {"alpha": 2.0}).parameters["alpha"] == 2.0
    assert build_model("icdow").dimension == 3
    assert build_model("buckley").name == "buckley"
    assert build_model("fold").name == "fold"
    assert build_model("crossing", {"coupling": 0.3}).name == "crossing"
    with pytest.raises(ValueError):
        build_model("nope")
