from __future__ import annotations

import numpy as np
import pytest
from conftest import charpoly_roots, fd_gradient, icdow_coincidence

from wavecurves.errors import (
    ComplexPair,
    FullGeometricMultiplicity,
    NotDoubleEigenvalue,
    PseudoinverseUndefined,
    RankDeficient,
    SingularPencil,
    TangentCoincidence,
)
from wavecurves.geneig import (
    EigenPair,
    JordanChainData,
    asymptotic_state,
    chain_residuals,
    discriminant,
    jordan_chain,
    pencil_at,
    right_pseudoinverse,
    sheet_coordinates,
    solve_pencil,
    taylor_R,
    versal_derivatives,
)
from wavecurves.models import (
    ModelDescriptor,
    corey_model,
    corey_umbilic_point,
    fold_pencil_model,
    icdow_model,
    synthetic_pencil_model,
)


def eigen_residual(pair: EigenPair, A, B):
    scale = np.linalg.norm(A) + abs(pair.lam) * np.linalg.norm(B)
    right = np.linalg.norm(A @ pair.r - pair.lam * (B @ pair.r))
    left = np.linalg.norm(pair.l @ A - pair.lam * (pair.l @ B))
    # left residual scales with ||l||, which is O(1/gap) near coincidences
    return max(right, left / max(1.0, np.linalg.norm(pair.l))) / scale


# ---------------------------------------------------------------------------
# solve_pencil


def test_solve_pencil_diagonal():
    pairs, ninf = solve_pencil(np.diag([2.0, 3.0]), np.eye(2))
    assert ninf == 0
    assert [p.lam for p in pairs] == pytest.approx([2.0, 3.0])
    assert np.allclose(np.abs(pairs[0].r), [1, 0])
    assert np.allclose(np.abs(pairs[1].r), [0, 1])
    assert pairs[0].family == 1 and pairs[1].family == 2


def test_solve_pencil_icdow_saturation_speed():
    # the saturation family has speed (u/phi) * dfw/ds with eigenvector e1
    model = icdow_model()
    U = np.array([0.3, 0.5, 1.2])
    s = 0.3
    d = s * s + (1 - s) ** 2
    lam_s = 1.2 * (2 * s * (1 - s) / (d * d))
    pairs, ninf = solve_pencil(*pencil_at(model, U))
    assert ninf == 1
    best = min(pairs, key=lambda p: abs(p.lam - lam_s))
    assert best.lam == pytest.approx(lam_s, rel=1e-10)
    assert abs(best.r @ np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0, abs=1e-10)


def test_solve_pencil_zero_column_B_against_charpoly():
    rng = np.random.default_rng(17)
    for _ in range(10):
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 3))
        B[:, 2] = 0.0  # one infinite eigenvalue
        roots = np.sort(charpoly_roots(A, B).real)
        if len(roots) != 2:
            continue
        try:
            pairs, ninf = solve_pencil(A, B)
        except ComplexPair:
            assert np.abs(charpoly_roots(A, B).imag).max() > 1e-7
            continue
        assert ninf == 1
        got = np.array([p.lam for p in pairs])
        assert np.allclose(got, roots, rtol=1e-8, atol=1e-10)


def test_solve_pencil_random_regular_matches_charpoly():
    rng = np.random.default_rng(99)
    checked = 0
    for n in (2, 3, 4):
        for _ in range(15):
            A = rng.standard_normal((n, n))
            B = rng.standard_normal((n, n)) + 3.0 * np.eye(n)
            roots = charpoly_roots(A, B)
            if np.abs(roots.imag).max() > 1e-9:
                continue
            pairs, ninf = solve_pencil(A, B)
            assert ninf == 0
            got = np.array([p.lam for p in pairs])
            assert np.allclose(got, np.sort(roots.real), rtol=1e-8, atol=1e-9)
            for p in pairs:
                assert eigen_residual(p, A, B) < 1e-10
            checked += 1
    assert checked >= 10


def test_solve_pencil_left_normalization():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((3, 3))
    B = np.eye(3)
    try:
        pairs, _ = solve_pencil(A, B)
    except ComplexPair:
        A = A + A.T  # symmetric: real spectrum
        pairs, _ = solve_pencil(A, B)
    for p in pairs:
        assert p.l @ (B @ p.r) == pytest.approx(1.0, abs=1e-9)


def test_solve_pencil_complex_pair_raises():
    model = fold_pencil_model()
    A, B = pencil_at(model, np.array([0.0, 0.0]))  # inside the elliptic strip
    with pytest.raises(ComplexPair):
        solve_pencil(A, B)


def test_solve_pencil_singular_pencil_raises():
    A = np.array([[1.0, 0.0], [0.0, 0.0]])
    B = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(SingularPencil):
        solve_pencil(A, B)


def test_solve_pencil_collapses_defective_noise():
    # a defective double eigenvalue perturbed at machine scale splits by
    # ~sqrt(eps); the solver must still report two real eigenvalues
    A = np.array([[5.0, 1.0], [1e-14, 5.0]])
    pairs, _ = solve_pencil(A, np.eye(2))
    assert len(pairs) == 2
    assert all(abs(p.lam - 5.0) < 1e-6 for p in pairs)


# ---------------------------------------------------------------------------
# discriminant


def test_discriminant_trivial_values():
    assert discriminant(np.diag([2.0, 3.0]), np.eye(2)) == pytest.approx(1.0)
    assert discriminant(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2)) == (
        pytest.approx(0.0, abs=1e-14))


def test_discriminant_negative_on_elliptic_states():
    model = fold_pencil_model()
    A, B = pencil_at(model, np.array([0.2, 0.0]))
    assert discriminant(A, B) == pytest.approx(-4.0)  # 4(v^2-1) at v=0


def test_discriminant_corey_minimum_at_umbilic():
    from scipy.optimize import minimize

    model = corey_model()

    def D(x):
        return discriminant(*pencil_at(model, x))

    res = minimize(D, x0=np.array([0.3, 0.3]), method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-24})
    assert res.fun < 1e-18
    assert np.allclose(res.x, corey_umbilic_point(), atol=1e-6)


def test_discriminant_sign_agrees_with_eigenvalue_gap():
    rng = np.random.default_rng(31)
    model = corey_model()
    for U in model.sample_states(1000, rng):
        A, B = pencil_at(model, U)
        D = discriminant(A, B)
        lams = np.sort(np.linalg.eigvals(A).real)
        gap = lams[1] - lams[0]
        assert (D > 1e-12) == (gap > 1e-6), (U, D, gap)
        assert D == pytest.approx(gap * gap, rel=1e-7, abs=1e-12)


def test_discriminant_icdow_via_finite_reduction():
    model = icdow_model()
    U = np.array([0.45, 0.3, 1.0])
    A, B = pencil_at(model, U)
    D = discriminant(A, B)
    roots = np.sort(charpoly_roots(A, B).real)
    assert D == pytest.approx((roots[1] - roots[0]) ** 2, rel=1e-8)


def test_discriminant_needs_two_finite_eigenvalues():
    # B with rank 1 leaves a single finite eigenvalue
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(PseudoinverseUndefined):
        discriminant(A, B)


# ---------------------------------------------------------------------------
# right_pseudoinverse


def test_right_pseudoinverse_trivial():
    assert np.allclose(right_pseudoinverse(np.eye(3)), np.eye(3))
    B = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert np.allclose(right_pseudoinverse(B),
                       np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))


def test_right_pseudoinverse_random_full_rank():
    rng = np.random.default_rng(2)
    for _ in range(20):
        B = rng.standard_normal((2, 3))
        Bp = right_pseudoinverse(B)
        assert np.linalg.norm(B @ Bp - np.eye(2)) < 1e-12


def test_right_pseudoinverse_rank_deficient():
    B = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(RankDeficient):
        right_pseudoinverse(B)


# ---------------------------------------------------------------------------
# jordan_chain


def test_jordan_chain_trivial_block():
    A0 = np.array([[5.0, 1.0], [0.0, 5.0]])
    chain = jordan_chain(A0, np.eye(2), 5.0)
    assert chain_residuals(chain, A0, np.eye(2)) < 1e-12
    assert abs(chain.r0 @ np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert abs(chain.r1 @ np.array([0.0, 1.0])) == pytest.approx(1.0)
    assert abs(chain.l0 @ np.array([0.0, 1.0])) > 0.99 * np.linalg.norm(chain.l0)
    assert abs(chain.l1 @ np.array([1.0, 0.0])) > 0.99 * np.linalg.norm(chain.l1)


def test_jordan_chain_constructed_pencil():
    # build A0 = B0 R J R^{-1} from a prescribed chain and recover it
    rng = np.random.default_rng(8)
    for _ in range(10):
        B0 = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        Rb, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        lam0, mu = 0.7, 3.0
        J = np.array([[lam0, 1.0, 0.0], [0.0, lam0, 0.0], [0.0, 0.0, mu]])
        A0 = B0 @ Rb @ J @ np.linalg.inv(Rb)
        chain = jordan_chain(A0, B0, lam0)
        assert chain_residuals(chain, A0, B0) < 1e-9
        # r0 spans the prescribed eigenvector, r1 the chain plane
        assert abs(chain.r0 @ Rb[:, 0]) == pytest.approx(1.0, abs=1e-8)
        span = np.linalg.lstsq(Rb[:, :2], chain.r1, rcond=None)[1]
        assert (span.size == 0 or span[0] < 1e-16)
        # minimal-norm gauge: r1 orthogonal to r0
        assert abs(chain.r1 @ chain.r0) < 1e-10


def test_jordan_chain_singular_B():
    # pencil with B = diag(1,1,0): double defective eigenvalue + 1 infinite
    A0 = np.array([[2.0, 1.0, 0.3], [0.0, 2.0, 0.0], [0.0, 0.5, 1.0]])
    B0 = np.diag([1.0, 1.0, 0.0])
    chain = jordan_chain(A0, B0, 2.0)
    assert chain_residuals(chain, A0, B0) < 1e-10


def test_jordan_chain_rejects_simple_eigenvalue():
    model = fold_pencil_model()
    A, B = pencil_at(model, np.array([0.0, 2.0]))
    with pytest.raises(NotDoubleEigenvalue):
        jordan_chain(A, B, 2.0 + np.sqrt(3.0))


def test_jordan_chain_full_geometric_multiplicity():
    with pytest.raises(FullGeometricMultiplicity):
        jordan_chain(np.diag([5.0, 5.0]), np.eye(2), 5.0)
    # the Corey umbilic point is the same structure in disguise
    model = corey_model()
    Ustar = corey_umbilic_point()
    A, B = pencil_at(model, Ustar)
    lam0 = 0.5 * np.trace(np.linalg.solve(B, A))
    with pytest.raises(FullGeometricMultiplicity):
        jordan_chain(A, B, lam0)


def test_jordan_chain_deterministic():
    model = fold_pencil_model()
    A, B = pencil_at(model, np.array([0.3, 1.0]))
    c1 = jordan_chain(A, B, 1.0)
    c2 = jordan_chain(A, B, 1.0)
    for a, b in ((c1.r0, c2.r0), (c1.r1, c2.r1), (c1.l0, c2.l0), (c1.l1, c2.l1)):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# versal_derivatives: a designed fixture with exact gradients

def exact_sheet_model(seed=4):
    """Model whose pencil satisfies A(U) [r0 r1] = B0 [r0 r1] N(U) exactly
    with s(U) = a.U and p(U) = b.U linear: the sheet gradients are a and b
    by construction and the basis columns are constant (dR0 = dR1 = 0).

    The Jacobian field A(U) of this fixture is not a gradient of any flux,
    so the descriptor is assembled by hand (the eigenstructure code consumes
    only Jacobians and their derivatives).
    """
    rng = np.random.default_rng(seed)
    B0 = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    Rb, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    r0, r1 = Rb[:, 0], Rb[:, 1]
    lam0, mu = 0.7, 3.0
    J = np.array([[lam0, 1.0, 0.0], [0.0, lam0, 0.0], [0.0, 0.0, mu]])
    A0 = B0 @ Rb @ J @ np.linalg.inv(Rb)
    duals = np.linalg.inv(Rb)
    m0, m1 = duals[0], duals[1]
    a = np.array([0.3, -0.2, 0.5])
    b = np.array([1.1, 0.4, -0.7])
    S1 = B0 @ (np.outer(r0, m0) + np.outer(r1, m1))
    S2 = B0 @ np.outer(r1, m0)
    P = np.einsum("ij,k->ijk", S1, a) + np.einsum("ij,k->ijk", S2, b)

    def jacobian_F(U):
        return A0 + float(a @ U) * S1 + float(b @ U) * S2

    model = ModelDescriptor(
        name="exact-sheet", dimension=3,
        accumulation=lambda U: B0 @ U,
        flux=lambda U: jacobian_F(U) @ U,  # placeholder, unused
        jacobian_G=lambda U: B0,
        jacobian_F=jacobian_F,
        hessian_G=lambda U: np.zeros((3, 3, 3)),
        hessian_F=lambda U: P,
        domain=lambda U: bool(np.all(np.abs(U) < 4.0)),
        boundary_planes=(), box=(-4 * np.ones(3), 4 * np.ones(3)))
    return model, A0, B0, lam0, r0, r1, a, b


def test_versal_derivatives_exact_fixture():
    model, A0, B0, lam0, r0, r1, a, b = exact_sheet_model()
    chain = jordan_chain(A0, B0, lam0)
    full = versal_derivatives(model, np.zeros(3), chain)
    assert np.allclose(full.grad_p, b, atol=1e-9)
    assert np.allclose(full.grad_s, a, atol=1e-9)
    assert np.abs(full.dR0).max() < 1e-9
    assert np.abs(full.dR1).max() < 1e-9
    # Z maps the chain vectors onto each other
    assert np.allclose(full.Z @ full.r0, B0 @ full.r1, atol=1e-9)
    assert np.allclose(full.Z @ full.r1, B0 @ full.r0, atol=1e-9)


def test_versal_derivatives_zero_perturbation():
    A0 = np.array([[2.0, 1.0, 0.3], [0.0, 2.0, 0.0], [0.0, 0.5, 1.0]])
    B0 = np.diag([1.0, 1.0, 0.0])
    model = synthetic_pencil_model(A0, B0)  # constant Jacobians
    chain = jordan_chain(A0, B0, 2.0)
    full = versal_derivatives(model, np.zeros(3), chain)
    assert np.abs(full.grad_p).max() < 1e-12
    assert np.abs(full.grad_s).max() < 1e-12


def test_versal_derivatives_fold_gradients():
    # speeds v +/- sqrt(v^2-1): p = v^2 - 1, s = v - 1 near the locus v = 1,
    # so grad_p = (0, 2) and grad_s = (0, 1) exactly at (u, 1)
    model = fold_pencil_model()
    U0 = np.array([0.3, 1.0])
    A, B = pencil_at(model, U0)
    chain = versal_derivatives(model, U0, jordan_chain(A, B, 1.0))
    assert np.allclose(chain.grad_p, [0.0, 2.0], atol=1e-10)
    assert np.allclose(chain.grad_s, [0.0, 1.0], atol=1e-10)


def test_versal_derivatives_match_finite_differences_icdow():
    model = icdow_model()
    for y, u in ((0.25, 0.9), (0.4, 1.0), (0.6, 1.4)):
        s_star, lam0 = icdow_coincidence(model, y, u)
        U0 = np.array([s_star, y, u])
        chain = versal_derivatives(model, U0, jordan_chain(*pencil_at(model, U0), lam0))

        def p_of(U):
            return sheet_coordinates(model, U, lam0).p

        def s_of(U):
            return sheet_coordinates(model, U, lam0).s

        gp_fd = fd_gradient(p_of, U0, h=1e-5)
        gs_fd = fd_gradient(s_of, U0, h=1e-5)
        # crossing-type locus: grad_p vanishes identically along it
        assert np.abs(chain.grad_p).max() < 1e-7
        assert np.abs(gp_fd).max() < 1e-7
        scale = np.abs(gs_fd).max()
        assert np.abs(chain.grad_s - gs_fd).max() < 1e-5 * scale


def test_versal_derivatives_frozen_icdow_point():
    # frozen reference values at (y, u) = (0.4, 1.0)
    model = icdow_model()
    s_star, lam0 = icdow_coincidence(model, 0.4, 1.0)
    assert s_star == pytest.approx(0.5912017515638888, abs=1e-9)
    assert lam0 == pytest.approx(1.810948968722166, abs=1e-9)
    U0 = np.array([s_star, 0.4, 1.0])
    A, B = pencil_at(model, U0)
    chain = versal_derivatives(model, U0, jordan_chain(A, B, lam0))
    assert chain_residuals(chain, A, B) < 1e-9
    assert np.allclose(chain.grad_s,
                       [-1.96213222, -0.12621969, 1.81094897], atol=2e-6)


# ---------------------------------------------------------------------------
# taylor_R


def unoa1_residual(model, chain, U0, U):
    """Frobenius residual of A R = B R N with first-order R and exact s, p."""
    A = model.jacobian_F(U)
    B = model.jacobian_G(U)
    dU = U - U0
    R = np.column_stack([chain.r0 + chain.dR0 @ dU, chain.r1 + chain.dR1 @ dU])
    co = sheet_coordinates(model, U, chain.lambda0)
    N = np.array([[chain.lambda0 + co.s, 1.0], [co.p, chain.lambda0 + co.s]])
    return np.linalg.norm(A @ R - B @ (R @ N))


def test_taylor_R_at_base_point():
    model, A0, B0, lam0, *_ = exact_sheet_model()
    chain = versal_derivatives(model, np.zeros(3), jordan_chain(A0, B0, lam0))
    R0, R1 = taylor_R(chain, np.zeros(3), np.zeros(3))
    assert np.array_equal(R0, chain.r0)
    assert np.array_equal(R1, chain.r1)


def test_taylor_R_exact_on_designed_pencil():
    model, A0, B0, lam0, r0, r1, a, b = exact_sheet_model()
    chain = versal_derivatives(model, np.zeros(3), jordan_chain(A0, B0, lam0))
    rng = np.random.default_rng(1)
    for _ in range(5):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        if b @ d < 0:
            d = -d  # stay on the hyperbolic side p > 0
        U = 1e-2 * d
        assert unoa1_residual(model, chain, np.zeros(3), U) < 1e-10


def test_taylor_R_second_order_residual_icdow():
    model = icdow_model()
    s_star, lam0 = icdow_coincidence(model, 0.4, 1.0)
    U0 = np.array([s_star, 0.4, 1.0])
    chain = versal_derivatives(model, U0, jordan_chain(*pencil_at(model, U0), lam0))
    rng = np.random.default_rng(6)
    ratios = []
    for _ in range(5):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        res = [unoa1_residual(model, chain, U0, U0 + delta * d)
               for delta in (4e-3, 2e-3, 1e-3)]
        ratios += [res[0] / res[1], res[1] / res[2]]
    for r in ratios:
        assert 3.2 < r < 4.8, ratios


def test_taylor_R_sign_convention():
    model, A0, B0, lam0, *_ = exact_sheet_model()
    chain = versal_derivatives(model, np.zeros(3), jordan_chain(A0, B0, lam0))
    rng = np.random.default_rng(9)
    for _ in range(10):
        U = 1e-2 * rng.standard_normal(3)
        R0, R1 = taylor_R(chain, np.zeros(3), U)
        assert R0 @ chain.r0 > 0.0
        assert R1 @ chain.r0 >= 0.0


# ---------------------------------------------------------------------------
# asymptotic_state


def fold_chain():
    model = fold_pencil_model()
    U0 = np.array([0.3, 1.0])
    A, B = pencil_at(model, U0)
    return model, U0, versal_derivatives(model, U0, jordan_chain(A, B, 1.0))


def test_asymptotic_state_zero_shift():
    model, U0, chain = fold_chain()
    assert np.allclose(asymptotic_state(chain, U0, "omega2", 0.0), U0)


def test_asymptotic_state_side_signs():
    model, U0, chain = fold_chain()
    for eps in (1e-2, 5e-3, 2.5e-3, 1e-3):
        U2 = asymptotic_state(chain, U0, "omega2", eps)
        U1 = asymptotic_state(chain, U0, "omega1", eps)
        assert discriminant(*pencil_at(model, U2)) > 0.0
        assert discriminant(*pencil_at(model, U1)) < 0.0


def test_asymptotic_state_eigenvalue_consistency():
    model, U0, chain = fold_chain()
    lam0 = chain.lambda0
    errs = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        U2 = asymptotic_state(chain, U0, "omega2", eps)
        pairs, _ = solve_pencil(*pencil_at(model, U2))
        lam_up = pairs[-1].lam  # family i+1 sheet for dlambda > 0
        errs.append(abs(lam_up - (lam0 + eps)))
    assert 3.0 < errs[0] / errs[1] < 5.0
    assert 3.0 < errs[1] / errs[2] < 5.0


def test_asymptotic_state_tangent_raises():
    # crossing-type locus: grad_p = 0, asymptotics undefined
    model = icdow_model()
    s_star, lam0 = icdow_coincidence(model, 0.4, 1.0)
    U0 = np.array([s_star, 0.4, 1.0])
    chain = versal_derivatives(model, U0, jordan_chain(*pencil_at(model, U0), lam0))
    with pytest.raises(TangentCoincidence):
        asymptotic_state(chain, U0, "omega2", 1e-3)


def test_asymptotic_state_rejects_bad_side():
    model, U0, chain = fold_chain()
    with pytest.raises(ValueError):
        asymptotic_state(chain, U0, "omega3", 1e-3)
